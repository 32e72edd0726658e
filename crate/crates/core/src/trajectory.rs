//! Per-epoch search log: one row per active (edge, op), recorded before that
//! epoch's pruning. Prune events ride along in the `event` column of the
//! rows they concern.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::{ArchParams, CellSpec, OpKind, NUM_OPS};
use crate::error::{Error, Result};
use crate::pruner::{PruneEvent, PruneKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub edge_src: usize,
    pub edge_dst: usize,
    pub op: OpKind,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub p: f64,
    pub js_of_edge: Option<f64>,
    pub theta_threshold: f64,
    pub event: String,
}

impl TrajectoryRow {
    pub fn events(&self) -> impl Iterator<Item = &str> {
        self.event.split(';').filter(|s| !s.is_empty())
    }

    fn push_event(&mut self, kind: PruneKind) {
        if !self.event.is_empty() {
            self.event.push(';');
        }
        self.event.push_str(kind.name());
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 11] = [
    "epoch",
    "edge_src",
    "edge_dst",
    "op",
    "alpha",
    "beta",
    "theta",
    "p",
    "js_of_edge",
    "theta_threshold",
    "event",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Distinct logged epochs in ascending order.
    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.rows.iter().map(|r| r.epoch).collect();
        e.dedup();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.epoch).max()
    }

    pub fn rows_at(&self, epoch: usize) -> impl Iterator<Item = &TrajectoryRow> {
        self.rows.iter().filter(move |r| r.epoch == epoch)
    }

    /// Attaches `event` to the rows of the given epoch that it concerns:
    /// removed ops for op-level events, every row of the edge otherwise.
    pub fn annotate(&mut self, spec: &CellSpec, event: &PruneEvent) {
        let edges = spec.edges();
        let edge = edges[event.edge];
        for row in self.rows.iter_mut().rev() {
            if row.epoch < event.epoch {
                break;
            }
            if row.epoch != event.epoch || row.edge_src != edge.src || row.edge_dst != edge.dst {
                continue;
            }
            let hit = match event.kind {
                PruneKind::Outlier | PruneKind::Fallback => event.ops_removed.contains(&row.op.index()),
                _ => true,
            };
            if hit {
                row.push_event(event.kind);
            }
        }
    }

    /// Rebuilds the architecture state logged at `epoch` (inactive edges
    /// and ops are those without rows).
    pub fn arch_at(&self, spec: &CellSpec, epoch: usize) -> Result<ArchParams> {
        let mut arch = ArchParams::new(spec.n_edges());
        arch.active.iter_mut().for_each(|a| *a = false);
        arch.edge_active.iter_mut().for_each(|a| *a = false);
        let mut any = false;
        for r in self.rows_at(epoch) {
            let e = spec
                .edge_index(r.edge_src, r.edge_dst)
                .ok_or_else(|| Error::Schema {
                    file: "trajectory.csv".into(),
                    message: format!("edge {}->{} is not in the cell", r.edge_src, r.edge_dst),
                })?;
            arch.alpha[e * NUM_OPS + r.op.index()] = r.alpha;
            arch.beta[e] = r.beta;
            arch.active[e * NUM_OPS + r.op.index()] = true;
            arch.edge_active[e] = true;
            any = true;
        }
        if !any {
            return Err(Error::MissingCheckpoints(vec![epoch]));
        }
        Ok(arch)
    }

    /// Importance vector at `epoch` in genotype order, zero where inactive.
    pub fn theta_vector(&self, spec: &CellSpec, epoch: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; spec.genotype_len()];
        let mut any = false;
        for r in self.rows_at(epoch) {
            if let Some(e) = spec.edge_index(r.edge_src, r.edge_dst) {
                v[e * NUM_OPS + r.op.index()] = r.theta;
                any = true;
            }
        }
        if !any {
            return Err(Error::MissingCheckpoints(vec![epoch]));
        }
        Ok(v)
    }

    /// Active-entry mask at `epoch` in genotype order.
    pub fn active_vector(&self, spec: &CellSpec, epoch: usize) -> Vec<bool> {
        let mut v = vec![false; spec.genotype_len()];
        for r in self.rows_at(epoch) {
            if let Some(e) = spec.edge_index(r.edge_src, r.edge_dst) {
                v[e * NUM_OPS + r.op.index()] = true;
            }
        }
        v
    }

    /// Prune events recovered from the `event` column, ordered by
    /// (epoch, edge, kind).
    pub fn events(&self, spec: &CellSpec) -> Result<Vec<PruneEvent>> {
        let mut grouped: BTreeMap<(usize, usize, u8), PruneEvent> = BTreeMap::new();
        for r in &self.rows {
            for name in r.events() {
                let kind: PruneKind = name.parse()?;
                let edge = spec.edge_index(r.edge_src, r.edge_dst).ok_or_else(|| Error::Schema {
                    file: "trajectory.csv".into(),
                    message: format!("edge {}->{} is not in the cell", r.edge_src, r.edge_dst),
                })?;
                let ev = grouped
                    .entry((r.epoch, edge, kind_rank(kind)))
                    .or_insert_with(|| PruneEvent {
                        epoch: r.epoch,
                        edge,
                        kind,
                        ops_removed: Vec::new(),
                        js_value: match kind {
                            PruneKind::EdgeReduction => None,
                            _ => r.js_of_edge,
                        },
                    });
                if matches!(kind, PruneKind::Outlier | PruneKind::Fallback) {
                    ev.ops_removed.push(r.op.index());
                }
            }
        }
        Ok(grouped.into_values().collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        if self.rows.is_empty() {
            w.write_record(TRAJECTORY_COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let headers = r.headers()?.clone();
        if headers.iter().ne(TRAJECTORY_COLUMNS) {
            return Err(Error::Schema {
                file: path.display().to_string(),
                message: format!(
                    "expected columns {:?}, found {:?}",
                    TRAJECTORY_COLUMNS,
                    headers.iter().collect::<Vec<_>>()
                ),
            });
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TrajectoryRow>, _>>()
            .map_err(|e| Error::Schema {
                file: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(TrajectoryLog { rows })
    }
}

/// Canonical event order: stability outcomes, then edge reductions.
pub fn kind_rank(kind: PruneKind) -> u8 {
    match kind {
        PruneKind::Outlier => 0,
        PruneKind::Fallback => 1,
        PruneKind::ThresholdInflation => 2,
        PruneKind::EdgeReduction => 3,
    }
}

/// Sorts events into the canonical (epoch, edge, kind) order.
pub fn canonical_events(mut events: Vec<PruneEvent>) -> Vec<PruneEvent> {
    for e in &mut events {
        e.ops_removed.sort_unstable();
    }
    events.sort_by_key(|e| (e.epoch, e.edge, kind_rank(e.kind)));
    events
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema {
                file: path.display().to_string(),
                message: format!("{other:?}"),
            },
        }
    } else {
        Error::Csv(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, src: usize, dst: usize, op: OpKind, theta: f64) -> TrajectoryRow {
        TrajectoryRow {
            epoch,
            edge_src: src,
            edge_dst: dst,
            op,
            alpha: theta,
            beta: 1.0,
            theta,
            p: 0.5,
            js_of_edge: Some(0.01),
            theta_threshold: 1.0,
            event: String::new(),
        }
    }

    #[test]
    fn annotate_and_recover_events() {
        let spec = CellSpec::default();
        let mut log = TrajectoryLog::new();
        log.rows.push(row(3, 0, 2, OpKind::Identity, 0.2));
        log.rows.push(row(3, 0, 2, OpKind::AvgPool3x3, 0.1));
        log.rows.push(row(3, 1, 2, OpKind::Identity, 0.3));
        let ev = PruneEvent {
            epoch: 3,
            edge: 0,
            kind: PruneKind::Fallback,
            ops_removed: vec![OpKind::AvgPool3x3.index()],
            js_value: Some(0.01),
        };
        log.annotate(&spec, &ev);
        let red = PruneEvent {
            epoch: 3,
            edge: 1,
            kind: PruneKind::EdgeReduction,
            ops_removed: vec![],
            js_value: None,
        };
        log.annotate(&spec, &red);
        assert_eq!(log.rows[1].event, "fallback");
        assert_eq!(log.events(&spec).unwrap(), vec![ev, red]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        let mut log = TrajectoryLog::new();
        let mut r = row(1, 0, 2, OpKind::SepConv5x5, 0.1 + 0.2);
        r.js_of_edge = None;
        log.rows.push(r);
        log.rows.push(row(2, 3, 4, OpKind::DilConv3x3, -1.0 / 3.0));
        log.rows[1].event = "outlier;edge-reduction".into();
        log.write_csv(&path).unwrap();
        let back = TrajectoryLog::read_csv(&path).unwrap();
        assert_eq!(back, log);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(&TRAJECTORY_COLUMNS.join(",")));
    }

    #[test]
    fn arch_reconstruction() {
        let spec = CellSpec::default();
        let mut log = TrajectoryLog::new();
        log.rows.push(row(5, 2, 4, OpKind::MaxPool3x3, 0.7));
        let arch = log.arch_at(&spec, 5).unwrap();
        let e = spec.edge_index(2, 4).unwrap();
        assert!(arch.edge_active[e] && arch.n_active_ops(e) == 1);
        assert_eq!(arch.alpha[e * NUM_OPS + 1], 0.7);
        assert!(matches!(log.arch_at(&spec, 6), Err(Error::MissingCheckpoints(_))));
    }
}
