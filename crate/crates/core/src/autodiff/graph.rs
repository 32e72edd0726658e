use super::kernels::{self, ConvGeom};
use super::optim::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    MaxPool3 {
        input: usize,
        argmax: Vec<u32>,
    },
    AvgPool3(usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    Upsample2(usize),
    Add(usize, usize),
    Scale {
        input: usize,
        factor: usize,
    },
    ScaleConst(usize, f64),
    Concat(Vec<usize>),
    IndexSelect {
        input: usize,
        dim: usize,
        index: Vec<usize>,
    },
    ChannelScatter {
        base: usize,
        sub: usize,
        index: Vec<usize>,
    },
    Softmax(usize),
    Element {
        input: usize,
        index: usize,
    },
    /// Vector map with a caller-supplied dense Jacobian (row = output).
    VectorFn {
        input: usize,
        jacobian: Vec<f64>,
    },
    /// Scalar map with a caller-supplied gradient w.r.t. the input.
    ScalarFn {
        input: usize,
        grad: Vec<f64>,
    },
    Sum(usize),
    WeightedSum {
        input: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation (a tape). Build one per step, call
/// [`Graph::backward`] once, then drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, format!("expected rank-4 input, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            grad: None,
        }
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Constant, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Constant, false)
    }

    /// Records a parameter leaf; its gradient is accumulated into the store
    /// on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(t.shape.clone(), t.values.clone(), Op::Param(id), true)
    }

    /// Parameter leaf when `trainable`, otherwise a constant copy.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.constant(&store.get(id).tensor)
        }
    }

    /// Stride-1 same-padded convolution. `weight` is (cout, cin/groups, k, k).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        dilation: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = dims4("conv2d", self.shape(input))?;
        let [cout, cin_g, k, k2] = dims4("conv2d", self.shape(weight))?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin}, weight {:?}, groups {groups}", self.shape(weight)),
            ));
        }
        if k != k2 || k % 2 == 0 || dilation == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and odd, got {k}x{k2} dilation {dilation}"),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} for {cout} output channels", self.shape(bv)),
                ));
            }
        }
        let geom = ConvGeom {
            batch: b,
            cin,
            cout,
            h,
            w,
            k,
            groups,
            dilation,
        };
        let mut out = vec![0.0; b * cout * h * w];
        kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|bv| self.value(bv)),
            &mut out,
        );
        let mut deps = vec![input.0, weight.0];
        deps.extend(bias.map(|b| b.0));
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![b, cout, h, w],
            out,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x.0), rg)
    }

    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let dims = dims4("max_pool3", self.shape(x))?;
        let mut out = vec![0.0; self.value(x).len()];
        let argmax = kernels::pool3_forward(dims, self.value(x), &mut out, true);
        let rg = self.rg(&[x.0]);
        Ok(self.push(dims.to_vec(), out, Op::MaxPool3 { input: x.0, argmax }, rg))
    }

    pub fn avg_pool3(&mut self, x: Var) -> Result<Var> {
        let dims = dims4("avg_pool3", self.shape(x))?;
        let mut out = vec![0.0; self.value(x).len()];
        kernels::pool3_forward(dims, self.value(x), &mut out, false);
        let rg = self.rg(&[x.0]);
        Ok(self.push(dims.to_vec(), out, Op::AvgPool3(x.0), rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("max_pool2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd spatial extent {h}x{w}")));
        }
        let mut out = vec![0.0; b * c * h * w / 4];
        let argmax = kernels::maxpool2_forward([b, c, h, w], self.value(x), &mut out);
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![b, c, h / 2, w / 2],
            out,
            Op::MaxPool2 { input: x.0, argmax },
            rg,
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("upsample2", self.shape(x))?;
        let mut out = vec![0.0; b * c * h * w * 4];
        kernels::upsample2_forward([b, c, h, w], self.value(x), &mut out);
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2(x.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), rg))
    }

    /// `factor * x` where `factor` is a single-element node.
    pub fn scale(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.value(factor).len() != 1 {
            return Err(Error::shape(
                "scale",
                format!("factor must be scalar, got {:?}", self.shape(factor)),
            ));
        }
        let s = self.value(factor)[0];
        let out = self.value(x).iter().map(|v| s * v).collect();
        let rg = self.rg(&[x.0, factor.0]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Scale {
                input: x.0,
                factor: factor.0,
            },
            rg,
        ))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| c * v).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), out, Op::ScaleConst(x.0, c), rg)
    }

    /// Sum of equally-shaped tensors (left to right).
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::shape("sum_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Channel-axis concatenation of rank-4 tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let [b, _, h, w] = dims4("concat", self.shape(first))?;
        let mut c_total = 0;
        for &x in xs {
            let [xb, xc, xh, xw] = dims4("concat", self.shape(x))?;
            if (xb, xh, xw) != (b, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(x), self.shape(first)),
                ));
            }
            c_total += xc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for &x in xs {
                let xc = self.shape(x)[1];
                let v = self.value(x);
                out.extend_from_slice(&v[bi * xc * plane..(bi + 1) * xc * plane]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![b, c_total, h, w], out, Op::Concat(ids), rg))
    }

    /// Gathers `index` entries along axis `dim`.
    pub fn index_select(&mut self, x: Var, dim: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || index.is_empty() || index.iter().any(|&i| i >= shape[dim]) {
            return Err(Error::shape(
                "index_select",
                format!("index {index:?} on axis {dim} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let n = shape[dim];
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &k in index {
                let s = (o * n + k) * inner;
                out.extend_from_slice(&v[s..s + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[dim] = index.len();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            new_shape,
            out,
            Op::IndexSelect {
                input: x.0,
                dim,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` whose channels `index` are replaced by the channels of `sub`.
    pub fn channel_scatter(&mut self, base: Var, sub: Var, index: &[usize]) -> Result<Var> {
        let [b, c, h, w] = dims4("channel_scatter", self.shape(base))?;
        let [sb, sc, sh, sw] = dims4("channel_scatter", self.shape(sub))?;
        if (sb, sh, sw) != (b, h, w) || sc != index.len() || index.iter().any(|&i| i >= c) {
            return Err(Error::shape(
                "channel_scatter",
                format!(
                    "base {:?}, sub {:?}, index {index:?}",
                    self.shape(base),
                    self.shape(sub)
                ),
            ));
        }
        let plane = h * w;
        let mut out = self.value(base).to_vec();
        let sv = self.value(sub);
        for bi in 0..b {
            for (k, &ch) in index.iter().enumerate() {
                let dst = (bi * c + ch) * plane;
                let src = (bi * sc + k) * plane;
                out[dst..dst + plane].copy_from_slice(&sv[src..src + plane]);
            }
        }
        let rg = self.rg(&[base.0, sub.0]);
        Ok(self.push(
            vec![b, c, h, w],
            out,
            Op::ChannelScatter {
                base: base.0,
                sub: sub.0,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over a rank-1 node (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape(
                "softmax",
                format!("expected rank-1, got {:?}", self.shape(x)),
            ));
        }
        let out = softmax(self.value(x));
        let rg = self.rg(&[x.0]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x.0), rg))
    }

    /// Single entry of a rank-1 node as a one-element node.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self.value(x).get(index).ok_or_else(|| {
            Error::shape("element", format!("index {index} of {:?}", self.shape(x)))
        })?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![1], vec![v], Op::Element { input: x.0, index }, rg))
    }

    /// Records `y = f(x)` for a rank-1 `x`, where the caller has evaluated
    /// `f` and its Jacobian (`jacobian[i * n + k] = dy_i / dx_k`).
    pub fn vector_fn(&mut self, x: Var, value: Vec<f64>, jacobian: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if jacobian.len() != value.len() * n {
            return Err(Error::shape(
                "vector_fn",
                format!("jacobian {} for {}x{n}", jacobian.len(), value.len()),
            ));
        }
        let rg = self.rg(&[x.0]);
        let m = value.len();
        Ok(self.push(vec![m], value, Op::VectorFn { input: x.0, jacobian }, rg))
    }

    /// Records a scalar `f(x)` with caller-supplied `df/dx`.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape(
                "scalar_fn",
                format!("gradient {} for input {:?}", grad.len(), self.shape(x)),
            ));
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![1], vec![value], Op::ScalarFn { input: x.0, grad }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![1], vec![s], Op::Sum(x.0), rg)
    }

    /// `sum(weights * x)` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let s = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                input: x.0,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Every parameter leaf on the tape gets
    /// a gradient buffer in `store` (zero if unreachable); gradients accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let node = self.nodes.get(loss.0).ok_or(Error::NoForward)?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        for n in &self.nodes {
            if let Op::Param(id) = n.op {
                store.get_mut(id).tensor.grad_mut();
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[idx].requires_grad {
                return;
            }
            let n = self.nodes[idx].value.len();
            let buf = grads[idx].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let dst = store.get_mut(*id).tensor.grad_mut();
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.wants(*input) {
                    let wv = &self.nodes[*weight].value;
                    acc(*input, &mut |buf| {
                        kernels::conv2d_backward_input(geom, g, wv, buf)
                    });
                }
                if self.wants(*weight) {
                    let xv = &self.nodes[*input].value;
                    acc(*weight, &mut |buf| {
                        kernels::conv2d_backward_weight(geom, g, xv, buf)
                    });
                }
                if let Some(b) = bias {
                    acc(*b, &mut |buf| kernels::conv2d_backward_bias(geom, g, buf));
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                acc(*x, &mut |buf| {
                    for ((d, gv), v) in buf.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool3 { input, argmax } | Op::MaxPool2 { input, argmax } => {
                acc(*input, &mut |buf| {
                    for (gv, &a) in g.iter().zip(argmax) {
                        buf[a as usize] += gv;
                    }
                });
            }
            Op::AvgPool3(x) => {
                let dims = [
                    node.shape[0],
                    node.shape[1],
                    node.shape[2],
                    node.shape[3],
                ];
                acc(*x, &mut |buf| kernels::avgpool3_backward(dims, g, buf));
            }
            Op::Upsample2(x) => {
                let s = &self.nodes[*x].shape;
                let dims = [s[0], s[1], s[2], s[3]];
                acc(*x, &mut |buf| kernels::upsample2_backward(dims, g, buf));
            }
            Op::Add(a, b) => {
                for &t in [a, b] {
                    acc(t, &mut |buf| {
                        for (d, gv) in buf.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Scale { input, factor } => {
                let s = self.nodes[*factor].value[0];
                acc(*input, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
                let xv = &self.nodes[*input].value;
                acc(*factor, &mut |buf| {
                    buf[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::ScaleConst(x, c) => {
                acc(*x, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Concat(ids) => {
                let (b, h, w) = (node.shape[0], node.shape[2], node.shape[3]);
                let c_total = node.shape[1];
                let plane = h * w;
                let mut offset = 0;
                for &x in ids {
                    let xc = self.nodes[x].shape[1];
                    acc(x, &mut |buf| {
                        for bi in 0..b {
                            let src = (bi * c_total + offset) * plane;
                            let dst = bi * xc * plane;
                            for (d, gv) in buf[dst..dst + xc * plane]
                                .iter_mut()
                                .zip(&g[src..src + xc * plane])
                            {
                                *d += gv;
                            }
                        }
                    });
                    offset += xc;
                }
            }
            Op::IndexSelect { input, dim, index } => {
                let shape = &self.nodes[*input].shape;
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let n = shape[*dim];
                acc(*input, &mut |buf| {
                    let mut src = 0;
                    for o in 0..outer {
                        for &k in index {
                            let dst = (o * n + k) * inner;
                            for (d, gv) in buf[dst..dst + inner].iter_mut().zip(&g[src..src + inner])
                            {
                                *d += gv;
                            }
                            src += inner;
                        }
                    }
                });
            }
            Op::ChannelScatter { base, sub, index } => {
                let (b, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                let plane = h * w;
                let sc = index.len();
                acc(*base, &mut |buf| {
                    for bi in 0..b {
                        for ch in 0..c {
                            if index.contains(&ch) {
                                continue;
                            }
                            let s = (bi * c + ch) * plane;
                            for (d, gv) in buf[s..s + plane].iter_mut().zip(&g[s..s + plane]) {
                                *d += gv;
                            }
                        }
                    }
                });
                acc(*sub, &mut |buf| {
                    for bi in 0..b {
                        for (k, &ch) in index.iter().enumerate() {
                            let s = (bi * c + ch) * plane;
                            let d0 = (bi * sc + k) * plane;
                            for (d, gv) in buf[d0..d0 + plane].iter_mut().zip(&g[s..s + plane]) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, &mut |buf| {
                    for ((d, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        *d += yv * (gv - dot);
                    }
                });
            }
            Op::Element { input, index } => {
                acc(*input, &mut |buf| buf[*index] += g[0]);
            }
            Op::VectorFn { input, jacobian } => {
                let n = self.nodes[*input].value.len();
                acc(*input, &mut |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        for k in 0..n {
                            buf[k] += gv * jacobian[i * n + k];
                        }
                    }
                });
            }
            Op::ScalarFn { input, grad } => {
                acc(*input, &mut |buf| {
                    for (d, v) in buf.iter_mut().zip(grad) {
                        *d += g[0] * v;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::WeightedSum { input, weights } => {
                acc(*input, &mut |buf| {
                    for (d, w) in buf.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                });
            }
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_without_forward_errors() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(Var(0), &mut store), Err(Error::NoForward)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::zeros(vec![3]));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        assert!(matches!(
            g.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn sum_gives_unit_grad_and_scaled_sum_gives_c() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64 - 4.0));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.sum(x);
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(id).tensor.grad().unwrap().iter().all(|&v| v == 1.0));

        store.zero_grads();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.scale_const(x, 2.5);
        let loss = g.sum(y);
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(id).tensor.grad().unwrap().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn unreachable_param_grad_is_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(vec![2], 1.0));
        let b = store.add("b", Tensor::full(vec![2], 1.0));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let loss = g.sum(va);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).tensor.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(vec![1, 1, 2, 2], 1.0));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.max_pool3(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut store).unwrap();
        // every window covers the whole 2x2 plane, so all four go to index 0
        assert_eq!(store.get(id).tensor.grad().unwrap(), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_shape_errors_name_the_op() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![1, 3, 4, 4]));
        let w = g.constant(&Tensor::zeros(vec![2, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
    }
}
