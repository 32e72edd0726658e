//! Sequential NCHW kernels. Loop order is fixed so results are bit-stable.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Valid output range [lo, hi) along an axis of length `n` for tap offset `d`.
    fn range(n: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Visits every (batch, out-channel, in-channel, tap) with the in-bounds
    /// output window, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, isize, isize)) {
        let pad = self.pad();
        let cin_g = self.cin_per_group();
        let cout_g = self.cout_per_group();
        for b in 0..self.batch {
            for co in 0..self.cout {
                let g = co / cout_g;
                for cil in 0..cin_g {
                    let ci = g * cin_g + cil;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let dy = (ky * self.dilation) as isize - pad;
                            let dx = (kx * self.dilation) as isize - pad;
                            let widx = ((co * cin_g + cil) * self.k + ky) * self.k + kx;
                            f(b, co, ci, widx, dy, dx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    geom: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (h, w) = (geom.h, geom.w);
    let plane = h * w;
    if let Some(bias) = bias {
        for b in 0..geom.batch {
            for co in 0..geom.cout {
                let base = (b * geom.cout + co) * plane;
                out[base..base + plane].iter_mut().for_each(|v| *v = bias[co]);
            }
        }
    }
    geom.for_each_tap(|b, co, ci, widx, dy, dx| {
        let wv = weight[widx];
        let (y0, y1) = ConvGeom::range(h, dy);
        let (x0, x1) = ConvGeom::range(w, dx);
        if x0 >= x1 {
            return;
        }
        let in_base = (b * geom.cin + ci) * plane;
        let out_base = (b * geom.cout + co) * plane;
        for y in y0..y1 {
            let iy = (y as isize + dy) as usize;
            let src = &input[in_base + iy * w..in_base + (iy + 1) * w];
            let dst = &mut out[out_base + y * w + x0..out_base + y * w + x1];
            let src = &src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
            for (o, i) in dst.iter_mut().zip(src) {
                *o += wv * i;
            }
        }
    });
}

pub(crate) fn conv2d_backward_input(
    geom: &ConvGeom,
    grad_out: &[f64],
    weight: &[f64],
    grad_in: &mut [f64],
) {
    let (h, w) = (geom.h, geom.w);
    let plane = h * w;
    geom.for_each_tap(|b, co, ci, widx, dy, dx| {
        let wv = weight[widx];
        let (y0, y1) = ConvGeom::range(h, dy);
        let (x0, x1) = ConvGeom::range(w, dx);
        if x0 >= x1 {
            return;
        }
        let in_base = (b * geom.cin + ci) * plane;
        let out_base = (b * geom.cout + co) * plane;
        for y in y0..y1 {
            let iy = (y as isize + dy) as usize;
            let g = &grad_out[out_base + y * w + x0..out_base + y * w + x1];
            let lo = in_base + iy * w + (x0 as isize + dx) as usize;
            let dst = &mut grad_in[lo..lo + (x1 - x0)];
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    });
}

pub(crate) fn conv2d_backward_weight(
    geom: &ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    grad_w: &mut [f64],
) {
    let (h, w) = (geom.h, geom.w);
    let plane = h * w;
    geom.for_each_tap(|b, co, ci, widx, dy, dx| {
        let (y0, y1) = ConvGeom::range(h, dy);
        let (x0, x1) = ConvGeom::range(w, dx);
        if x0 >= x1 {
            return;
        }
        let in_base = (b * geom.cin + ci) * plane;
        let out_base = (b * geom.cout + co) * plane;
        let mut acc = 0.0;
        for y in y0..y1 {
            let iy = (y as isize + dy) as usize;
            let g = &grad_out[out_base + y * w + x0..out_base + y * w + x1];
            let lo = in_base + iy * w + (x0 as isize + dx) as usize;
            let src = &input[lo..lo + (x1 - x0)];
            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        }
        grad_w[widx] += acc;
    });
}

pub(crate) fn conv2d_backward_bias(geom: &ConvGeom, grad_out: &[f64], grad_b: &mut [f64]) {
    let plane = geom.h * geom.w;
    for b in 0..geom.batch {
        for co in 0..geom.cout {
            let base = (b * geom.cout + co) * plane;
            grad_b[co] += grad_out[base..base + plane].iter().sum::<f64>();
        }
    }
}

/// 3x3, stride 1, same padding. Out-of-bounds taps are ignored (equivalent to
/// -inf padding for max and in-bounds renormalization for average).
/// Returns the flat argmax index per output for max pooling.
pub(crate) fn pool3_forward(
    dims: [usize; 4],
    input: &[f64],
    out: &mut [f64],
    max: bool,
) -> Vec<u32> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut argmax = if max { vec![0u32; input.len()] } else { Vec::new() };
    for p in 0..b * c {
        let base = p * plane;
        for y in 0..h {
            for x in 0..w {
                let (ylo, yhi) = (y.saturating_sub(1), (y + 2).min(h));
                let (xlo, xhi) = (x.saturating_sub(1), (x + 2).min(w));
                let o = base + y * w + x;
                if max {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for yy in ylo..yhi {
                        for xx in xlo..xhi {
                            let idx = base + yy * w + xx;
                            // strict comparison keeps the lowest flat index on ties
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                } else {
                    let mut s = 0.0;
                    for yy in ylo..yhi {
                        for xx in xlo..xhi {
                            s += input[base + yy * w + xx];
                        }
                    }
                    out[o] = s / ((yhi - ylo) * (xhi - xlo)) as f64;
                }
            }
        }
    }
    argmax
}

pub(crate) fn avgpool3_backward(dims: [usize; 4], grad_out: &[f64], grad_in: &mut [f64]) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    for p in 0..b * c {
        let base = p * plane;
        for y in 0..h {
            for x in 0..w {
                let (ylo, yhi) = (y.saturating_sub(1), (y + 2).min(h));
                let (xlo, xhi) = (x.saturating_sub(1), (x + 2).min(w));
                let g = grad_out[base + y * w + x] / ((yhi - ylo) * (xhi - xlo)) as f64;
                for yy in ylo..yhi {
                    for xx in xlo..xhi {
                        grad_in[base + yy * w + xx] += g;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling; argmax ties go to the lowest flat index.
pub(crate) fn maxpool2_forward(dims: [usize; 4], input: &[f64], out: &mut [f64]) -> Vec<u32> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0u32; b * c * oh * ow];
    for p in 0..b * c {
        let ib = p * h * w;
        let ob = p * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out[ob + y * ow + x] = best;
                argmax[ob + y * ow + x] = best_idx as u32;
            }
        }
    }
    argmax
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2_forward(dims: [usize; 4], input: &[f64], out: &mut [f64]) {
    let [b, c, h, w] = dims;
    let ow = 2 * w;
    for p in 0..b * c {
        let ib = p * h * w;
        let ob = p * 4 * h * w;
        for y in 0..2 * h {
            for x in 0..ow {
                out[ob + y * ow + x] = input[ib + (y / 2) * w + x / 2];
            }
        }
    }
}

pub(crate) fn upsample2_backward(dims: [usize; 4], grad_out: &[f64], grad_in: &mut [f64]) {
    let [b, c, h, w] = dims;
    let ow = 2 * w;
    for p in 0..b * c {
        let ib = p * h * w;
        let ob = p * 4 * h * w;
        for y in 0..2 * h {
            for x in 0..ow {
                grad_in[ib + (y / 2) * w + x / 2] += grad_out[ob + y * ow + x];
            }
        }
    }
}
