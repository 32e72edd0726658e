//! Stability-driven operation pruning.
//!
//! After every post-warm-up epoch each multi-op edge turns its importances
//! `theta = alpha * beta` into a categorical distribution and compares it to
//! the previous one with the Jensen-Shannon divergence. A stable edge loses
//! its outlier ops (or its weakest op); an unstable one doubles its
//! threshold so the test gets easier next time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{edge_weights, ArchParams, CellSpec, OpKind, NUM_OPS};
use crate::error::{Error, Result};
use crate::genotype::{DiscreteGenotype, GenotypeEdge};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrunerConfig {
    pub theta0: f64,
    pub kappa: f64,
    pub eps: f64,
    pub mid_search_edge_pruning: bool,
    pub edge_patience: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            theta0: 1.0,
            kappa: 2.0,
            eps: 1e-6,
            mid_search_edge_pruning: false,
            edge_patience: 3,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta0 > 0.0 && self.kappa >= 1.0 && self.eps > 0.0) {
            return Err(Error::Config(format!(
                "pruner needs theta0 > 0, kappa >= 1, eps > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneKind {
    Outlier,
    Fallback,
    EdgeReduction,
    ThresholdInflation,
}

impl PruneKind {
    pub fn name(self) -> &'static str {
        match self {
            PruneKind::Outlier => "outlier",
            PruneKind::Fallback => "fallback",
            PruneKind::EdgeReduction => "edge-reduction",
            PruneKind::ThresholdInflation => "threshold-inflation",
        }
    }
}

impl fmt::Display for PruneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PruneKind::Outlier,
            PruneKind::Fallback,
            PruneKind::EdgeReduction,
            PruneKind::ThresholdInflation,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown prune event `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub edge: usize,
    pub kind: PruneKind,
    pub ops_removed: Vec<usize>,
    pub js_value: Option<f64>,
}

/// `alpha * beta` for the active ops of `edge`, in op order.
pub fn importance(arch: &ArchParams, edge: usize) -> Vec<f64> {
    arch.active_ops(edge)
        .into_iter()
        .map(|o| arch.alpha[edge * NUM_OPS + o] * arch.beta[edge])
        .collect()
}

/// Categorical distribution over the active ops from (clamped) importances.
pub fn edge_distribution(theta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if theta.is_empty() {
        return Err(Error::EmptySupport {
            what: "importance vector".into(),
        });
    }
    let pos: Vec<f64> = theta.iter().map(|t| t.max(0.0)).collect();
    let total: f64 = pos.iter().sum();
    if total == 0.0 {
        return Ok(uniform(theta.len()));
    }
    let p: Vec<f64> = pos.iter().map(|t| t / (total + eps)).collect();
    Ok(renormalize(p))
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn renormalize(p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return uniform(p.len());
    }
    p.into_iter().map(|v| v / s).collect()
}

/// Jensen-Shannon divergence (natural log) after epsilon smoothing.
pub fn js_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(Error::EmptySupport {
            what: "distribution".into(),
        });
    }
    let smooth = |d: &[f64]| renormalize(d.iter().map(|v| v + eps).collect());
    let (ps, qs) = (smooth(p), smooth(q));
    let mut total = 0.0;
    for (a, b) in ps.iter().zip(&qs) {
        let m = 0.5 * (a + b);
        total += 0.5 * (a * (a / m).ln() + b * (b / m).ln());
    }
    Ok(total.max(0.0))
}

/// Threshold rule: `(prune, next_threshold)`.
pub fn stability_step(js: f64, threshold: f64, kappa: f64) -> (bool, f64) {
    if js < threshold {
        (true, threshold)
    } else {
        (false, threshold * kappa)
    }
}

/// Two-stage removal on one edge. `ops` are the active op indices matching
/// `theta`. Returns the kind and the removed op indices.
pub fn prune_edge_ops(ops: &[usize], theta: &[f64]) -> Result<(PruneKind, Vec<usize>)> {
    if ops.len() != theta.len() {
        return Err(Error::SupportMismatch(ops.len(), theta.len()));
    }
    if ops.len() < 2 {
        return Err(Error::EmptySupport {
            what: "edge with a single active op".into(),
        });
    }
    let n = theta.len() as f64;
    let mu = theta.iter().sum::<f64>() / n;
    let sigma = (theta.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / n).sqrt();
    let cut = mu - 2.0 * sigma;
    let mut outliers: Vec<usize> = (0..ops.len()).filter(|&k| theta[k] < cut).collect();
    if !outliers.is_empty() {
        if outliers.len() == ops.len() {
            let keep = argmax_first(theta);
            outliers.retain(|&k| k != keep);
        }
        return Ok((PruneKind::Outlier, outliers.into_iter().map(|k| ops[k]).collect()));
    }
    let weakest = (0..ops.len()).fold(0, |best, k| if theta[k] < theta[best] { k } else { best });
    Ok((PruneKind::Fallback, vec![ops[weakest]]))
}

fn argmax_first(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best })
}

/// Every active edge carries exactly one op.
pub fn is_converged(arch: &ArchParams) -> bool {
    (0..arch.n_edges())
        .filter(|&e| arch.edge_active[e])
        .all(|e| arch.n_active_ops(e) == 1)
}

/// Keeps the two strongest incoming edges (by edge weight) of every node and
/// reads off the per-edge op. Requires a converged architecture.
pub fn finalize_edges(
    spec: &CellSpec,
    arch: &mut ArchParams,
    epoch: usize,
) -> Result<(DiscreteGenotype, Vec<PruneEvent>, Vec<String>)> {
    if !is_converged(arch) {
        return Err(Error::Genotype(
            "cannot finalize: some edge still has several active ops".into(),
        ));
    }
    let all_edges = spec.edges();
    let mut kept = Vec::new();
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    for dst in 2..spec.n_nodes {
        let incoming = arch.active_incoming(spec, dst);
        if incoming.is_empty() {
            return Err(Error::Genotype(format!("node {dst} has no active incoming edge")));
        }
        if incoming.len() < 2 && dst > 2 {
            warnings.push(format!(
                "node {dst} keeps only {} incoming edge(s)",
                incoming.len()
            ));
        }
        let betas: Vec<f64> = incoming.iter().map(|&e| arch.beta[e]).collect();
        let psi = edge_weights(&betas)?;
        let mut order: Vec<usize> = (0..incoming.len()).collect();
        order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
        for (rank, &k) in order.iter().enumerate() {
            let e = incoming[k];
            if rank < 2 {
                let op = arch.active_ops(e)[0];
                kept.push(GenotypeEdge {
                    src: all_edges[e].src,
                    dst,
                    op: OpKind::ALL[op],
                });
            } else {
                arch.edge_active[e] = false;
                events.push(PruneEvent {
                    epoch,
                    edge: e,
                    kind: PruneKind::EdgeReduction,
                    ops_removed: Vec::new(),
                    js_value: None,
                });
            }
        }
    }
    events.sort_by_key(|ev| ev.edge);
    Ok((DiscreteGenotype::new(spec, kept)?, events, warnings))
}

/// What the pruner saw on one edge at one check, before any removal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCheck {
    pub edge: usize,
    pub ops: Vec<usize>,
    pub theta: Vec<f64>,
    pub dist: Vec<f64>,
    pub js: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub epoch: usize,
    pub edges: Vec<EdgeCheck>,
    pub events: Vec<PruneEvent>,
}

/// Per-run pruner state: thresholds, previous distributions and the
/// zero-importance streaks used by optional mid-search edge pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    pub config: PrunerConfig,
    pub thresholds: Vec<f64>,
    /// Previous distribution over the currently active ops; `None` until
    /// the first check (treated as uniform).
    pub prev_dist: Vec<Option<Vec<f64>>>,
    pub zero_streak: Vec<usize>,
}

impl ImportanceState {
    pub fn new(n_edges: usize, config: PrunerConfig) -> Self {
        ImportanceState {
            config,
            thresholds: vec![config.theta0; n_edges],
            prev_dist: vec![None; n_edges],
            zero_streak: vec![0; n_edges],
        }
    }

    /// Observes every active edge without changing anything.
    pub fn observe(&self, arch: &ArchParams) -> Result<Vec<EdgeCheck>> {
        let mut out = Vec::new();
        for e in (0..arch.n_edges()).filter(|&e| arch.edge_active[e]) {
            let ops = arch.active_ops(e);
            let theta = importance(arch, e);
            let dist = edge_distribution(&theta, self.config.eps)?;
            let js = if ops.len() > 1 {
                let prev = self.prev_dist[e].clone().unwrap_or_else(|| uniform(ops.len()));
                Some(js_divergence(&dist, &prev, self.config.eps)?)
            } else {
                None
            };
            out.push(EdgeCheck {
                edge: e,
                ops,
                theta,
                dist,
                js,
                threshold: self.thresholds[e],
            });
        }
        Ok(out)
    }

    /// Runs the stability test on every active multi-op edge and applies
    /// the resulting pruning to `arch`.
    pub fn check_epoch(
        &mut self,
        spec: &CellSpec,
        arch: &mut ArchParams,
        epoch: usize,
    ) -> Result<CheckReport> {
        let checks = self.observe(arch)?;
        let mut events = Vec::new();
        for c in &checks {
            let e = c.edge;
            if let Some(js) = c.js {
                let (prune, next) = stability_step(js, self.thresholds[e], self.config.kappa);
                self.thresholds[e] = next;
                if prune {
                    let (kind, removed) = prune_edge_ops(&c.ops, &c.theta)?;
                    for &o in &removed {
                        arch.deactivate_op(e, o)?;
                    }
                    let keep: Vec<f64> = c
                        .ops
                        .iter()
                        .zip(&c.dist)
                        .filter(|(o, _)| !removed.contains(o))
                        .map(|(_, p)| *p)
                        .collect();
                    self.prev_dist[e] = Some(renormalize(keep));
                    events.push(PruneEvent {
                        epoch,
                        edge: e,
                        kind,
                        ops_removed: removed,
                        js_value: Some(js),
                    });
                } else {
                    self.prev_dist[e] = Some(c.dist.clone());
                    events.push(PruneEvent {
                        epoch,
                        edge: e,
                        kind: PruneKind::ThresholdInflation,
                        ops_removed: Vec::new(),
                        js_value: Some(js),
                    });
                }
            }
        }
        if self.config.mid_search_edge_pruning {
            events.extend(self.mid_search_edges(spec, arch, &checks, epoch));
        }
        Ok(CheckReport {
            epoch,
            edges: checks,
            events,
        })
    }

    fn mid_search_edges(
        &mut self,
        spec: &CellSpec,
        arch: &mut ArchParams,
        checks: &[EdgeCheck],
        epoch: usize,
    ) -> Vec<PruneEvent> {
        let mut events = Vec::new();
        for c in checks {
            let positive: f64 = c.theta.iter().map(|t| t.max(0.0)).sum();
            if positive == 0.0 {
                self.zero_streak[c.edge] += 1;
            } else {
                self.zero_streak[c.edge] = 0;
            }
        }
        let edges = spec.edges();
        for c in checks {
            let e = c.edge;
            if self.zero_streak[e] < self.config.edge_patience.max(1) {
                continue;
            }
            if arch.active_incoming(spec, edges[e].dst).len() <= 2 {
                continue;
            }
            arch.edge_active[e] = false;
            events.push(PruneEvent {
                epoch,
                edge: e,
                kind: PruneKind::EdgeReduction,
                ops_removed: Vec::new(),
                js_value: None,
            });
        }
        events
    }
}
