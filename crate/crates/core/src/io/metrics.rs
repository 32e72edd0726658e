//! Per-stage metrics files and the exported run summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_versioned, write_json, RunDir, SCHEMA_VERSION};
use crate::backbone::PretrainReport;
use crate::error::{Error, Result};
use crate::search::{BatchCounts, FinalReport, InitPolicy, SearchMode, SearchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMetrics {
    pub schema_version: u32,
    pub seed: u64,
    pub pretrain: PretrainReport,
    /// Test Dice of the plain U-Net (identity skips), the reference model.
    pub reference_test_dice: f64,
    pub reference_test_per_class: Vec<f64>,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchMetrics {
    pub schema_version: u32,
    pub mode: SearchMode,
    pub seed: u64,
    pub epochs_used: usize,
    pub wall_time_secs: f64,
    pub converged: bool,
    pub n_events: usize,
    pub warnings: Vec<String>,
    pub batches: BatchCounts,
    pub backbone_fingerprint: u64,
}

impl SearchMetrics {
    pub fn from_result(r: &SearchResult, seed: u64) -> Self {
        SearchMetrics {
            schema_version: SCHEMA_VERSION,
            mode: r.mode,
            seed,
            epochs_used: r.epochs_used,
            wall_time_secs: r.wall_time_secs,
            converged: r.converged,
            n_events: r.events.len(),
            warnings: r.warnings.clone(),
            batches: r.batches.clone(),
            backbone_fingerprint: r.backbone_fingerprint,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned(path, SCHEMA_VERSION)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalSummary {
    pub policy: InitPolicy,
    pub test_dice: f64,
    pub test_per_class: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSummary {
    pub epochs_used: usize,
    pub wall_time_secs: f64,
    pub converged: bool,
    pub finals: Vec<FinalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedMetrics {
    pub schema_version: u32,
    pub reference_test_dice: Option<f64>,
    pub reference_test_per_class: Option<Vec<f64>>,
    pub lth: Option<SearchSummary>,
    pub baseline: Option<SearchSummary>,
    /// Baseline search wall time over LTH search wall time; present only
    /// when both runs are available.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speed_up: Option<f64>,
}

fn summarize(run: &RunDir, mode: SearchMode, metrics_path: &Path) -> Result<SearchSummary> {
    let m = SearchMetrics::load(metrics_path)?;
    if m.mode != mode {
        return Err(Error::Schema {
            file: metrics_path.display().to_string(),
            message: format!("expected a {} search, found {}", mode.name(), m.mode.name()),
        });
    }
    let search_dir = metrics_path.parent().unwrap_or(Path::new("."));
    let mut finals = Vec::new();
    for policy in [InitPolicy::LthReset, InitPolicy::Reinit] {
        let name = run.final_report(mode, policy);
        let path = search_dir.join(name.file_name().expect("final report has a file name"));
        if path.exists() {
            let r: FinalReport = serde_json::from_str(&super::read_text(&path)?)?;
            finals.push(FinalSummary {
                policy: r.policy,
                test_dice: r.test_dice,
                test_per_class: r.test_per_class,
                best_epoch: r.best_epoch,
                best_val_dice: r.best_val_dice,
            });
        }
    }
    Ok(SearchSummary {
        epochs_used: m.epochs_used,
        wall_time_secs: m.wall_time_secs,
        converged: m.converged,
        finals,
    })
}

/// Collects the run's metrics into `run/metrics.json`. `baseline` points at a
/// baseline search directory elsewhere; by default the run's own is used.
pub fn export_metrics(run: &RunDir, baseline: Option<&Path>) -> Result<ExportedMetrics> {
    let lth_path = run.search_metrics(SearchMode::Lth);
    let lth = if lth_path.exists() {
        Some(summarize(run, SearchMode::Lth, &lth_path)?)
    } else {
        None
    };
    let base_path = match baseline {
        Some(p) if p.is_dir() => Some(p.join("metrics.json")),
        Some(p) => Some(p.to_path_buf()),
        None => Some(run.search_metrics(SearchMode::Baseline)).filter(|p| p.exists()),
    };
    let baseline = base_path
        .map(|p| summarize(run, SearchMode::Baseline, &p))
        .transpose()?;
    if lth.is_none() && baseline.is_none() {
        return Err(Error::MissingArtifact {
            path: lth_path,
            reason: "no search metrics to export".into(),
        });
    }
    let reference: Option<BackboneMetrics> = if run.backbone_metrics().exists() {
        Some(read_versioned(&run.backbone_metrics(), SCHEMA_VERSION)?)
    } else {
        None
    };
    let speed_up = match (&lth, &baseline) {
        (Some(l), Some(b)) if l.wall_time_secs > 0.0 => Some(b.wall_time_secs / l.wall_time_secs),
        _ => None,
    };
    let out = ExportedMetrics {
        schema_version: SCHEMA_VERSION,
        reference_test_dice: reference.as_ref().map(|r| r.reference_test_dice),
        reference_test_per_class: reference.map(|r| r.reference_test_per_class),
        lth,
        baseline,
        speed_up,
    };
    write_json(&run.metrics(), &out)?;
    Ok(out)
}
