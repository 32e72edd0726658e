//! Genotype representations (continuous importance vector, top-k masks,
//! discrete cell) and the similarity measures between them.
//!
//! Every vector is indexed edge-major in (dst, src) order and op-minor in
//! [`OpKind::ALL`] order.

use serde::{Deserialize, Serialize};

use crate::cell::{edge_weights, ArchParams, CellSpec, OpKind, NUM_OPS};
use crate::error::{Error, Result};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeEdge {
    pub src: usize,
    pub dst: usize,
    pub op: OpKind,
}

/// Final discrete cell: one operation per retained edge and at most two
/// incoming edges per intermediate node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteGenotype {
    pub n_nodes: usize,
    pub n_outputs: usize,
    pub edges: Vec<GenotypeEdge>,
}

impl DiscreteGenotype {
    pub fn new(spec: &CellSpec, mut edges: Vec<GenotypeEdge>) -> Result<Self> {
        edges.sort_by_key(|e| (e.dst, e.src));
        let g = DiscreteGenotype {
            n_nodes: spec.n_nodes,
            n_outputs: spec.n_outputs,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn spec_shape(&self) -> (usize, usize) {
        (self.n_nodes, self.n_outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 3 || self.n_outputs == 0 || self.n_outputs > self.n_nodes - 2 {
            return Err(Error::Genotype(format!(
                "bad cell shape: {} nodes, {} outputs",
                self.n_nodes, self.n_outputs
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edges {
            if e.src >= e.dst || e.dst < 2 || e.dst >= self.n_nodes {
                return Err(Error::Genotype(format!(
                    "edge {}->{} is not a forward edge into an intermediate node",
                    e.src, e.dst
                )));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::Genotype(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
        }
        for dst in 2..self.n_nodes {
            let n = self.incoming(dst).count();
            if n == 0 || n > 2 {
                return Err(Error::Genotype(format!(
                    "node {dst} has {n} incoming edges (expected 1 or 2)"
                )));
            }
        }
        Ok(())
    }

    pub fn incoming(&self, dst: usize) -> impl Iterator<Item = &GenotypeEdge> {
        self.edges.iter().filter(move |e| e.dst == dst)
    }

    /// Binary encoding in genotype index order.
    pub fn to_binary(&self, spec: &CellSpec) -> Vec<bool> {
        let mut v = vec![false; spec.genotype_len()];
        for e in &self.edges {
            if let Some(i) = spec.edge_index(e.src, e.dst) {
                v[i * NUM_OPS + e.op.index()] = true;
            }
        }
        v
    }
}

/// Importance vector `alpha * beta` at one epoch; inactive entries are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousGenotype {
    pub epoch: usize,
    pub values: Vec<f64>,
}

pub fn continuous_vector(arch: &ArchParams, epoch: usize) -> ContinuousGenotype {
    let values = (0..arch.n_edges())
        .flat_map(|e| {
            (0..NUM_OPS).map(move |o| {
                if arch.edge_active[e] && arch.is_active(e, o) {
                    arch.alpha[e * NUM_OPS + o] * arch.beta[e]
                } else {
                    0.0
                }
            })
        })
        .collect();
    ContinuousGenotype { epoch, values }
}

/// Per-edge top-k membership by importance, ties to the lower op index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKMask {
    pub k: usize,
    pub bits: Vec<bool>,
}

/// `active` marks which entries may be selected; `None` means all.
pub fn topk_mask(values: &[f64], active: Option<&[bool]>, k: usize) -> Result<TopKMask> {
    if k == 0 {
        return Err(Error::Config("top-k requires k >= 1".into()));
    }
    if values.len() % NUM_OPS != 0 {
        return Err(Error::SupportMismatch(values.len(), NUM_OPS));
    }
    let mut bits = vec![false; values.len()];
    for (e, row) in values.chunks(NUM_OPS).enumerate() {
        let mut ops: Vec<usize> = (0..NUM_OPS)
            .filter(|&o| active.map_or(true, |a| a[e * NUM_OPS + o]))
            .collect();
        ops.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &o in ops.iter().take(k) {
            bits[e * NUM_OPS + o] = true;
        }
    }
    Ok(TopKMask { k, bits })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SupportMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn hamming_similarity(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SupportMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(1.0 - diff as f64 / a.len() as f64)
}

/// Discretization: argmax of `alpha` over active ops on every active edge,
/// then the two incoming edges with the largest edge weight per node
/// (ties to the lower source). Used for the baseline result and the
/// "final" analytics view.
pub fn discretize(spec: &CellSpec, arch: &ArchParams) -> Result<(DiscreteGenotype, Vec<String>)> {
    let edges = spec.edges();
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for dst in 2..spec.n_nodes {
        let incoming = arch.active_incoming(spec, dst);
        if incoming.is_empty() {
            return Err(Error::Genotype(format!("node {dst} has no active incoming edge")));
        }
        if incoming.len() < 2 && dst > 2 {
            warnings.push(format!(
                "node {dst} has only {} active incoming edge(s)",
                incoming.len()
            ));
        }
        let betas: Vec<f64> = incoming.iter().map(|&e| arch.beta[e]).collect();
        let psi = edge_weights(&betas)?;
        let mut order: Vec<usize> = (0..incoming.len()).collect();
        order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
        for &k in order.iter().take(2) {
            let e = incoming[k];
            let active = arch.active_ops(e);
            let best = active
                .iter()
                .copied()
                .fold(None, |best: Option<usize>, o| match best {
                    Some(b) if arch.alpha[e * NUM_OPS + b] >= arch.alpha[e * NUM_OPS + o] => Some(b),
                    _ => Some(o),
                })
                .ok_or_else(|| Error::EmptySupport {
                    what: format!("edge {e}"),
                })?;
            kept.push(GenotypeEdge {
                src: edges[e].src,
                dst,
                op: OpKind::ALL[best],
            });
        }
    }
    Ok((DiscreteGenotype::new(spec, kept)?, warnings))
}
