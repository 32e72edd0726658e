//! Genotype analytics over a logged search: similarity between checkpoints
//! and the epochs at which the final cell emerges.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::{edge_weights, ArchParams, CellSpec, NUM_OPS};
use crate::error::{Error, Result};
use crate::genotype::{cosine_similarity, discretize, hamming_similarity, topk_mask, DiscreteGenotype};
use crate::pruner::PruneKind;
use crate::trajectory::TrajectoryLog;

/// Checkpoints used when none are given.
pub const DEFAULT_CHECKPOINTS: [usize; 7] = [16, 20, 40, 80, 100, 150, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Continuous importance vector, compared by cosine.
    Full,
    /// Binary encoding of the discretized cell.
    Final,
    Top1,
    Top2,
    Top3,
}

impl Representation {
    pub const ALL: [Representation; 5] = [
        Representation::Full,
        Representation::Final,
        Representation::Top1,
        Representation::Top2,
        Representation::Top3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Full => "full",
            Representation::Final => "final",
            Representation::Top1 => "top1",
            Representation::Top2 => "top2",
            Representation::Top3 => "top3",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown representation `{s}` (expected full, final, top1, top2 or top3)")))
    }
}

/// Vector form of the logged state at `epoch` under a representation.
pub enum GenotypeView {
    Continuous(Vec<f64>),
    Binary(Vec<bool>),
}

pub fn genotype_view(spec: &CellSpec, traj: &TrajectoryLog, rep: Representation, epoch: usize) -> Result<GenotypeView> {
    let theta = traj.theta_vector(spec, epoch)?;
    let k = match rep {
        Representation::Full => return Ok(GenotypeView::Continuous(theta)),
        Representation::Final => {
            let (g, _) = discretize(spec, &traj.arch_at(spec, epoch)?)?;
            return Ok(GenotypeView::Binary(g.to_binary(spec)));
        }
        Representation::Top1 => 1,
        Representation::Top2 => 2,
        Representation::Top3 => 3,
    };
    let active = traj.active_vector(spec, epoch);
    Ok(GenotypeView::Binary(topk_mask(&theta, Some(&active), k)?.bits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub representation: Representation,
    pub checkpoints: Vec<usize>,
    /// Row-major, `checkpoints.len()` squared.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.checkpoints.len() + j]
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        write!(out, "epoch")?;
        for c in &self.checkpoints {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for (i, c) in self.checkpoints.iter().enumerate() {
            write!(out, "{c}")?;
            for j in 0..self.checkpoints.len() {
                write!(out, ",{}", self.get(i, j))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Pairwise similarity of the genotypes logged at `checkpoints`: cosine for
/// the continuous view, Hamming for binary ones.
pub fn similarity_matrix(
    spec: &CellSpec,
    traj: &TrajectoryLog,
    rep: Representation,
    checkpoints: &[usize],
) -> Result<SimilarityMatrix> {
    let logged = traj.epochs();
    let missing: Vec<usize> = checkpoints
        .iter()
        .copied()
        .filter(|c| logged.binary_search(c).is_err())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints(missing));
    }
    let views = checkpoints
        .iter()
        .map(|&c| genotype_view(spec, traj, rep, c))
        .collect::<Result<Vec<_>>>()?;
    let n = checkpoints.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = match (&views[i], &views[j]) {
                (GenotypeView::Continuous(a), GenotypeView::Continuous(b)) => cosine_similarity(a, b)?,
                (GenotypeView::Binary(a), GenotypeView::Binary(b)) => hamming_similarity(a, b)?,
                _ => unreachable!("views share one representation"),
            };
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        representation: rep,
        checkpoints: checkpoints.to_vec(),
        values,
    })
}

/// First epoch a quantity reached its target, or the cap when it never did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emergence {
    pub epoch: usize,
    pub reached: bool,
}

impl Emergence {
    fn first(epochs: &[usize], hit: impl Fn(usize) -> bool, cap: usize) -> Self {
        match epochs.iter().copied().find(|&e| hit(e)) {
            Some(epoch) => Emergence { epoch, reached: true },
            None => Emergence {
                epoch: cap,
                reached: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEmergence {
    pub src: usize,
    pub dst: usize,
    pub op: crate::cell::OpKind,
    pub top3: Emergence,
    pub top2: Emergence,
    pub top1: Emergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergenceReport {
    pub edges: Vec<EdgeEmergence>,
    /// First epoch at which every node's final incoming edges are its top-2 by edge weight.
    pub edges_first: Emergence,
    /// First epoch from which that holds at every later logged epoch.
    pub edges_persistent: Emergence,
    pub median_top3: f64,
    pub median_top2: f64,
    pub median_top1: f64,
}

fn median(mut v: Vec<usize>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Whether the final genotype's winning op on `edge` ranks in the top-k of
/// the active ops at `epoch` (ties to the lower op index).
fn winner_in_topk(spec: &CellSpec, traj: &TrajectoryLog, epoch: usize, edge: usize, op: usize, k: usize) -> bool {
    let Ok(theta) = traj.theta_vector(spec, epoch) else {
        return false;
    };
    let active = traj.active_vector(spec, epoch);
    if !active[edge * NUM_OPS + op] {
        return false;
    }
    let row = &theta[edge * NUM_OPS..(edge + 1) * NUM_OPS];
    let ahead = (0..NUM_OPS)
        .filter(|&o| active[edge * NUM_OPS + o] && o != op)
        .filter(|&o| row[o] > row[op] || (row[o] == row[op] && o < op))
        .count();
    ahead < k
}

fn edges_fixed(spec: &CellSpec, arch: &ArchParams, genotype: &DiscreteGenotype) -> bool {
    for dst in 2..spec.n_nodes {
        let incoming = arch.active_incoming(spec, dst);
        let mut want: Vec<usize> = genotype
            .incoming(dst)
            .filter_map(|e| spec.edge_index(e.src, dst))
            .collect();
        if incoming.len() < want.len() {
            return false;
        }
        let betas: Vec<f64> = incoming.iter().map(|&e| arch.beta[e]).collect();
        let Ok(psi) = edge_weights(&betas) else {
            return false;
        };
        let mut order: Vec<usize> = (0..incoming.len()).collect();
        order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order.iter().take(want.len()).map(|&k| incoming[k]).collect();
        top.sort_unstable();
        want.sort_unstable();
        if top != want {
            return false;
        }
    }
    true
}

/// Emergence of the final genotype over the logged epochs `>= from_epoch`
/// (first-entry semantics). `cap` is reported for targets never reached.
pub fn emergence_epochs(
    spec: &CellSpec,
    traj: &TrajectoryLog,
    genotype: &DiscreteGenotype,
    from_epoch: usize,
    cap: usize,
) -> Result<EmergenceReport> {
    let epochs: Vec<usize> = traj.epochs().into_iter().filter(|&e| e >= from_epoch).collect();
    if epochs.is_empty() {
        return Err(Error::MissingCheckpoints(vec![from_epoch]));
    }
    let mut edges = Vec::with_capacity(genotype.edges.len());
    for ge in &genotype.edges {
        let e = spec
            .edge_index(ge.src, ge.dst)
            .ok_or_else(|| Error::Genotype(format!("edge {}->{} is not in the cell", ge.src, ge.dst)))?;
        let op = ge.op.index();
        let at = |k: usize| Emergence::first(&epochs, |ep| winner_in_topk(spec, traj, ep, e, op, k), cap);
        edges.push(EdgeEmergence {
            src: ge.src,
            dst: ge.dst,
            op: ge.op,
            top3: at(3),
            top2: at(2),
            top1: at(1),
        });
    }
    let fixed: Vec<bool> = epochs
        .iter()
        .map(|&ep| Ok(edges_fixed(spec, &traj.arch_at(spec, ep)?, genotype)))
        .collect::<Result<_>>()?;
    let edges_first = Emergence::first(&epochs, |ep| fixed[epochs.binary_search(&ep).unwrap()], cap);
    let persistent_from = fixed.iter().rposition(|f| !f).map_or(0, |i| i + 1);
    let edges_persistent = match epochs.get(persistent_from) {
        Some(&epoch) => Emergence { epoch, reached: true },
        None => Emergence {
            epoch: cap,
            reached: false,
        },
    };
    let med = |f: fn(&EdgeEmergence) -> Emergence| median(edges.iter().map(|e| f(e).epoch).collect());
    Ok(EmergenceReport {
        median_top3: med(|e| e.top3),
        median_top2: med(|e| e.top2),
        median_top1: med(|e| e.top1),
        edges,
        edges_first,
        edges_persistent,
    })
}

impl EmergenceReport {
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(
            out,
            "edge_src,edge_dst,op,top3_epoch,top3_reached,top2_epoch,top2_reached,top1_epoch,top1_reached"
        )?;
        for e in &self.edges {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.src, e.dst, e.op, e.top3.epoch, e.top3.reached, e.top2.epoch, e.top2.reached, e.top1.epoch, e.top1.reached
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "level,epoch,reached")?;
        writeln!(out, "top3_median,{},true", self.median_top3)?;
        writeln!(out, "top2_median,{},true", self.median_top2)?;
        writeln!(out, "top1_median,{},true", self.median_top1)?;
        writeln!(out, "edges_first,{},{}", self.edges_first.epoch, self.edges_first.reached)?;
        writeln!(out, "edges_persistent,{},{}", self.edges_persistent.epoch, self.edges_persistent.reached)?;
        Ok(())
    }
}

/// Genotype implied by the log alone: the last logged state with that
/// epoch's removals applied, then discretized.
pub fn genotype_from_log(spec: &CellSpec, traj: &TrajectoryLog) -> Result<DiscreteGenotype> {
    let last = traj.last_epoch().ok_or_else(|| Error::MissingCheckpoints(Vec::new()))?;
    let mut arch = traj.arch_at(spec, last)?;
    for ev in traj.events(spec)?.into_iter().filter(|ev| ev.epoch == last) {
        match ev.kind {
            PruneKind::Outlier | PruneKind::Fallback => {
                for o in ev.ops_removed {
                    arch.deactivate_op(ev.edge, o)?;
                }
            }
            PruneKind::EdgeReduction => arch.edge_active[ev.edge] = false,
            PruneKind::ThresholdInflation => {}
        }
    }
    Ok(discretize(spec, &arch)?.0)
}

/// Writes the continuous genotype at each logged epoch as JSON arrays.
pub fn write_genotype_vectors(spec: &CellSpec, traj: &TrajectoryLog, epochs: &[usize], path: &Path) -> Result<()> {
    let mut map = serde_json::Map::new();
    for &e in epochs {
        map.insert(e.to_string(), serde_json::to_value(traj.theta_vector(spec, e)?)?);
    }
    let text = serde_json::to_string_pretty(&map)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::OpKind;
    use crate::trajectory::TrajectoryRow;

    fn push(traj: &mut TrajectoryLog, spec: &CellSpec, epoch: usize, edge: usize, op: usize, alpha: f64, beta: f64) {
        let e = spec.edges()[edge];
        traj.rows.push(TrajectoryRow {
            epoch,
            edge_src: e.src,
            edge_dst: e.dst,
            op: OpKind::ALL[op],
            alpha,
            beta,
            theta: alpha * beta,
            p: 0.0,
            js_of_edge: None,
            theta_threshold: 1.0,
            event: String::new(),
        });
    }

    #[test]
    fn representation_parse() {
        for r in Representation::ALL {
            assert_eq!(r.name().parse::<Representation>().unwrap(), r);
        }
        assert!("top4".parse::<Representation>().is_err());
    }

    #[test]
    fn missing_checkpoints_are_listed() {
        let spec = CellSpec::default();
        let mut traj = TrajectoryLog::new();
        push(&mut traj, &spec, 1, 0, 0, 1.0, 1.0);
        match similarity_matrix(&spec, &traj, Representation::Full, &[1, 2, 3]) {
            Err(Error::MissingCheckpoints(m)) => assert_eq!(m, vec![2, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3, 1, 2]), 2.0);
        assert_eq!(median(vec![4, 1, 2, 3]), 2.5);
    }
}
