//! The searchable skip-connection cell: DAG topology, partial-channel mixed
//! operations, capped edge weights and node/cell evaluation.

pub mod ops;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::genotype::DiscreteGenotype;
pub use ops::{apply, OpKind, SepConvVars, NUM_OPS};

/// Edge logits are clamped to this magnitude before `tan`.
pub const BETA_CLAMP: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub n_nodes: usize,
    pub n_outputs: usize,
    pub channels: usize,
    pub partial_k: usize,
}

impl Default for CellSpec {
    fn default() -> Self {
        CellSpec {
            n_nodes: 6,
            n_outputs: 4,
            channels: 8,
            partial_k: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 3 {
            return Err(Error::Config(format!(
                "cell needs two input nodes and at least one intermediate node, got {}",
                self.n_nodes
            )));
        }
        if self.n_outputs == 0 || self.n_outputs > self.n_nodes - 2 {
            return Err(Error::Config(format!(
                "n_outputs must be in 1..={}, got {}",
                self.n_nodes - 2,
                self.n_outputs
            )));
        }
        if self.partial_k == 0 || self.channels == 0 || self.channels % self.partial_k != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of K = {}",
                self.channels, self.partial_k
            )));
        }
        Ok(())
    }

    /// Candidate edges into every intermediate node, sorted by (dst, src).
    /// The two input nodes are not connected to each other.
    pub fn edges(&self) -> Vec<Edge> {
        (2..self.n_nodes)
            .flat_map(|dst| (0..dst).map(move |src| Edge { src, dst }))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        (2..self.n_nodes).sum()
    }

    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        if dst < 2 || dst >= self.n_nodes || src >= dst {
            return None;
        }
        Some((2..dst).sum::<usize>() + src)
    }

    /// Edge indices entering `dst`, ordered by source.
    pub fn incoming(&self, dst: usize) -> Vec<usize> {
        (0..dst).filter_map(|src| self.edge_index(src, dst)).collect()
    }

    pub fn genotype_len(&self) -> usize {
        self.n_edges() * NUM_OPS
    }

    pub fn partial_channels(&self) -> usize {
        self.channels / self.partial_k
    }
}

/// Continuous architecture parameters plus the active masks maintained by
/// pruning. `alpha` is edge-major, op-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub active: Vec<bool>,
    pub edge_active: Vec<bool>,
}

impl ArchParams {
    pub fn new(n_edges: usize) -> Self {
        ArchParams {
            alpha: vec![0.0; n_edges * NUM_OPS],
            beta: vec![0.0; n_edges],
            active: vec![true; n_edges * NUM_OPS],
            edge_active: vec![true; n_edges],
        }
    }

    pub fn n_edges(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_row(&self, edge: usize) -> &[f64] {
        &self.alpha[edge * NUM_OPS..(edge + 1) * NUM_OPS]
    }

    pub fn is_active(&self, edge: usize, op: usize) -> bool {
        self.active[edge * NUM_OPS + op]
    }

    pub fn active_ops(&self, edge: usize) -> Vec<usize> {
        (0..NUM_OPS).filter(|&o| self.is_active(edge, o)).collect()
    }

    pub fn n_active_ops(&self, edge: usize) -> usize {
        self.active[edge * NUM_OPS..(edge + 1) * NUM_OPS]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// Removes `op` from `edge`; refuses to empty the edge.
    pub fn deactivate_op(&mut self, edge: usize, op: usize) -> Result<()> {
        if self.is_active(edge, op) && self.n_active_ops(edge) <= 1 {
            return Err(Error::EmptySupport {
                what: format!("edge {edge} after removing op {op}"),
            });
        }
        self.active[edge * NUM_OPS + op] = false;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for e in 0..self.n_edges() {
            if self.edge_active[e] && self.n_active_ops(e) == 0 {
                return Err(Error::EmptySupport {
                    what: format!("active edge {e}"),
                });
            }
        }
        Ok(())
    }

    /// Active incoming edges of `dst`.
    pub fn active_incoming(&self, spec: &CellSpec, dst: usize) -> Vec<usize> {
        spec.incoming(dst)
            .into_iter()
            .filter(|&e| self.edge_active[e])
            .collect()
    }
}

/// Operation probabilities over the given (active) logits.
pub fn op_probabilities(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::EmptySupport {
            what: "operation set".into(),
        });
    }
    Ok(softmax(alpha))
}

/// Capped tan-softmax edge weights for the incoming edges of one node.
pub fn edge_weights(beta: &[f64]) -> Result<Vec<f64>> {
    Ok(edge_weights_with_jacobian(beta)?.0)
}

/// Edge weights and their Jacobian (`j[i * n + k] = dPsi_i / dbeta_k`).
pub fn edge_weights_with_jacobian(beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = beta.len();
    if n == 0 {
        return Err(Error::EmptySupport {
            what: "incoming edge set".into(),
        });
    }
    if n == 1 {
        return Ok((vec![1.0], vec![0.0]));
    }
    let clamped: Vec<f64> = beta.iter().map(|b| b.clamp(-BETA_CLAMP, BETA_CLAMP)).collect();
    let t: Vec<f64> = clamped.iter().map(|b| b.tan()).collect();
    let dt: Vec<f64> = beta
        .iter()
        .zip(&clamped)
        .map(|(b, c)| {
            if b.abs() < BETA_CLAMP {
                1.0 / (c.cos() * c.cos())
            } else {
                0.0
            }
        })
        .collect();
    let hat = softmax(&t);

    // argmax, ties to the lowest index
    let top = (0..n).fold(0, |best, i| if hat[i] > hat[best] { i } else { best });

    let mut jac_softmax = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let delta = if i == k { 1.0 } else { 0.0 };
            jac_softmax[i * n + k] = hat[i] * (delta - hat[k]) * dt[k];
        }
    }

    if hat[top] <= 0.5 {
        return Ok((hat, jac_softmax));
    }

    let rest: f64 = (0..n).filter(|&k| k != top).map(|k| hat[k]).sum();
    let psi: Vec<f64> = (0..n)
        .map(|i| if i == top { 0.5 } else { 0.5 * hat[i] / rest })
        .collect();
    // d psi / d hat, then chain through the softmax Jacobian
    let mut jac = vec![0.0; n * n];
    for i in (0..n).filter(|&i| i != top) {
        for m in 0..n {
            let mut d_cap = 0.0;
            if m != top {
                d_cap -= 0.5 * hat[i] / (rest * rest);
                if m == i {
                    d_cap += 0.5 / rest;
                }
            }
            if d_cap == 0.0 {
                continue;
            }
            for k in 0..n {
                jac[i * n + k] += d_cap * jac_softmax[m * n + k];
            }
        }
    }
    Ok((psi, jac))
}

/// Fixed per-edge partial-channel selection: exactly `channels / K` channels
/// pass through the mixed operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub channels: usize,
    pub index: Vec<usize>,
}

impl ChannelMask {
    pub fn sample(rng: &mut impl Rng, channels: usize, partial_k: usize) -> Self {
        let mut index = sample(rng, channels, channels / partial_k).into_vec();
        index.sort_unstable();
        ChannelMask { channels, index }
    }

    pub fn bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.channels];
        for &i in &self.index {
            bits[i] = true;
        }
        bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SepConvIds {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
}

/// Per-instance cell weights. Candidate conv weights are always full width;
/// partial-channel evaluation slices them.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWeights {
    pub skip_in: Conv1x1,
    pub up_in: Conv1x1,
    pub out: Conv1x1,
    /// `ops[edge][op]`, `None` for parameter-free candidates.
    pub ops: Vec<[Option<SepConvIds>; NUM_OPS]>,
    pub out_channels: usize,
}

fn he_tensor(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl CellWeights {
    pub fn init(
        spec: &CellSpec,
        skip_channels: usize,
        up_channels: usize,
        out_channels: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let mut conv1x1 = |store: &mut ParamStore, name: &str, cin: usize, cout: usize| Conv1x1 {
            weight: store.add(
                format!("{prefix}.{name}.weight"),
                he_tensor(rng, vec![cout, cin, 1, 1], cin),
            ),
            bias: store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![cout])),
        };
        let skip_in = conv1x1(store, "skip_in", skip_channels, c);
        let up_in = conv1x1(store, "up_in", up_channels, c);
        let out = conv1x1(store, "out", c * spec.n_outputs, out_channels);
        let mut ops = Vec::with_capacity(spec.n_edges());
        for edge in spec.edges() {
            let mut row = [None; NUM_OPS];
            for op in OpKind::ALL {
                if let Some((k, _)) = op.conv_geometry() {
                    let base = format!("{prefix}.edge{}_{}.{}", edge.src, edge.dst, op.name());
                    let depthwise = store.add(
                        format!("{base}.depthwise"),
                        he_tensor(rng, vec![c, 1, k, k], k * k),
                    );
                    let pointwise =
                        store.add(format!("{base}.pointwise"), he_tensor(rng, vec![c, c, 1, 1], c));
                    row[op.index()] = Some(SepConvIds {
                        depthwise,
                        pointwise,
                    });
                }
            }
            ops.push(row);
        }
        Ok(CellWeights {
            skip_in,
            up_in,
            out,
            ops,
            out_channels,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [self.skip_in, self.up_in, self.out] {
            ids.extend([c.weight, c.bias]);
        }
        for row in &self.ops {
            for s in row.iter().flatten() {
                ids.extend([s.depthwise, s.pointwise]);
            }
        }
        ids.sort();
        ids
    }

    /// Weights that a discrete genotype actually uses.
    pub fn surviving_ids(&self, spec: &CellSpec, genotype: &DiscreteGenotype) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [self.skip_in, self.up_in, self.out] {
            ids.extend([c.weight, c.bias]);
        }
        for ge in &genotype.edges {
            if let Some(e) = spec.edge_index(ge.src, ge.dst) {
                if let Some(s) = self.ops[e][ge.op.index()] {
                    ids.extend([s.depthwise, s.pointwise]);
                }
            }
        }
        ids.sort();
        ids
    }

    /// Fresh He-normal draw for every weight (biases reset to zero).
    pub fn reinitialize(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for id in self.all_ids() {
            let p = store.get_mut(id);
            let shape = p.tensor.shape().to_vec();
            p.adam = None;
            p.tensor = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1] * shape[2] * shape[3];
                he_tensor(rng, shape, fan_in)
            };
        }
    }
}

/// Architecture parameters as recorded on a graph (rank-1 nodes).
#[derive(Debug, Clone, Copy)]
pub struct ArchVars {
    pub alpha: Var,
    pub beta: Var,
}

impl ArchVars {
    pub fn constant(g: &mut Graph, arch: &ArchParams) -> Self {
        let alpha = g.constant_owned(Tensor::from_fn(vec![arch.alpha.len()], |i| arch.alpha[i]));
        let beta = g.constant_owned(Tensor::from_fn(vec![arch.beta.len()], |i| arch.beta[i]));
        ArchVars { alpha, beta }
    }
}

pub enum CellMode<'a> {
    /// Continuous relaxation with partial channels (search).
    Supernet {
        arch: &'a ArchParams,
        vars: ArchVars,
        masks: &'a [ChannelMask],
    },
    /// Discrete cell at full channel width (final training).
    Discrete { genotype: &'a DiscreteGenotype },
}

/// Shared context for evaluating one cell instance on a graph.
pub struct CellEval<'a> {
    pub spec: &'a CellSpec,
    pub weights: &'a CellWeights,
    pub store: &'a ParamStore,
    pub train_weights: bool,
}

impl CellEval<'_> {
    fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.bind(self.store, id, self.train_weights)
    }

    fn conv1x1(&self, g: &mut Graph, x: Var, c: Conv1x1) -> Result<Var> {
        let w = self.bind(g, c.weight);
        let b = self.bind(g, c.bias);
        g.conv2d(x, w, Some(b), 1, 1)
    }

    /// Binds the weights of (edge, op), sliced to `channels` when given.
    fn op_weights(
        &self,
        g: &mut Graph,
        edge: usize,
        op: OpKind,
        channels: Option<&[usize]>,
    ) -> Result<Option<SepConvVars>> {
        let Some(ids) = self.weights.ops[edge][op.index()] else {
            return Ok(None);
        };
        let mut depthwise = self.bind(g, ids.depthwise);
        let mut pointwise = self.bind(g, ids.pointwise);
        if let Some(idx) = channels {
            depthwise = g.index_select(depthwise, 0, idx)?;
            pointwise = g.index_select(pointwise, 0, idx)?;
            pointwise = g.index_select(pointwise, 1, idx)?;
        }
        Ok(Some(SepConvVars {
            depthwise,
            pointwise,
        }))
    }

    /// Partial-channel mixed operation on one edge: masked-in channels carry
    /// the probability-weighted sum of active candidates, the rest are copied.
    pub fn mixed_op_forward(
        &self,
        g: &mut Graph,
        x: Var,
        edge: usize,
        arch: &ArchParams,
        vars: ArchVars,
        mask: Option<&ChannelMask>,
    ) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.channels || g.shape(x).len() != 4 {
            return Err(Error::shape(
                "mixed_op",
                format!(
                    "input {:?} for a cell with {} channels",
                    g.shape(x),
                    self.spec.channels
                ),
            ));
        }
        if !arch.edge_active[edge] {
            return Err(Error::EmptySupport {
                what: format!("inactive edge {edge}"),
            });
        }
        let active = arch.active_ops(edge);
        if active.is_empty() {
            return Err(Error::EmptySupport {
                what: format!("edge {edge}"),
            });
        }
        let channels = mask.map(|m| m.index.as_slice());
        let sub = match channels {
            Some(idx) => g.index_select(x, 1, idx)?,
            None => x,
        };
        let flat: Vec<usize> = active.iter().map(|o| edge * NUM_OPS + o).collect();
        let logits = g.index_select(vars.alpha, 0, &flat)?;
        let phi = g.softmax(logits)?;
        let mut terms = Vec::with_capacity(active.len());
        for (k, &o) in active.iter().enumerate() {
            let op = OpKind::ALL[o];
            let w = self.op_weights(g, edge, op, channels)?;
            let y = apply(g, op, sub, w)?;
            let p = g.element(phi, k)?;
            terms.push(g.scale(y, p)?);
        }
        let mixed = g.sum_all(&terms)?;
        match channels {
            Some(idx) => g.channel_scatter(x, mixed, idx),
            None => Ok(mixed),
        }
    }

    /// Evaluates the cell on its two inputs (encoder skip and upsampled
    /// decoder features) and maps the concatenated output nodes to the
    /// decoder's channel count.
    pub fn forward(&self, g: &mut Graph, skip_in: Var, up_in: Var, mode: &CellMode) -> Result<Var> {
        let (ss, us) = (g.shape(skip_in).to_vec(), g.shape(up_in).to_vec());
        if ss.len() != 4 || us.len() != 4 || ss[0] != us[0] || ss[2..] != us[2..] {
            return Err(Error::shape(
                "cell",
                format!("skip input {ss:?} and upsampled input {us:?} disagree"),
            ));
        }
        let spec = self.spec;
        let edges = spec.edges();
        let mut nodes = Vec::with_capacity(spec.n_nodes);
        nodes.push(self.conv1x1(g, skip_in, self.weights.skip_in)?);
        nodes.push(self.conv1x1(g, up_in, self.weights.up_in)?);
        for dst in 2..spec.n_nodes {
            let node = match mode {
                CellMode::Supernet { arch, vars, masks } => {
                    let incoming = arch.active_incoming(spec, dst);
                    if incoming.is_empty() {
                        return Err(Error::EmptySupport {
                            what: format!("incoming edges of node {dst}"),
                        });
                    }
                    let betas = g.index_select(vars.beta, 0, &incoming)?;
                    let beta_vals: Vec<f64> = g.value(betas).to_vec();
                    let (psi, jac) = edge_weights_with_jacobian(&beta_vals)?;
                    let psi = g.vector_fn(betas, psi, jac)?;
                    let mut terms = Vec::with_capacity(incoming.len());
                    for (k, &e) in incoming.iter().enumerate() {
                        let src = nodes[edges[e].src];
                        let f = self.mixed_op_forward(g, src, e, arch, *vars, masks.get(e))?;
                        let w = g.element(psi, k)?;
                        terms.push(g.scale(f, w)?);
                    }
                    g.sum_all(&terms)?
                }
                CellMode::Discrete { genotype } => {
                    let incoming: Vec<_> = genotype.edges.iter().filter(|e| e.dst == dst).collect();
                    if incoming.is_empty() {
                        return Err(Error::Genotype(format!("node {dst} has no incoming edge")));
                    }
                    let weight = 1.0 / incoming.len() as f64;
                    let mut terms = Vec::with_capacity(incoming.len());
                    for ge in incoming {
                        let e = spec.edge_index(ge.src, ge.dst).ok_or_else(|| {
                            Error::Genotype(format!("edge {}->{} outside the cell", ge.src, ge.dst))
                        })?;
                        let w = self.op_weights(g, e, ge.op, None)?;
                        let y = apply(g, ge.op, nodes[ge.src], w)?;
                        terms.push(g.scale_const(y, weight));
                    }
                    g.sum_all(&terms)?
                }
            };
            nodes.push(node);
        }
        let outputs = &nodes[spec.n_nodes - spec.n_outputs..];
        let cat = g.concat(outputs)?;
        self.conv1x1(g, cat, self.weights.out)
    }
}
