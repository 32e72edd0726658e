//! Run configuration and on-disk artifacts.
//!
//! A run directory looks like
//!
//! ```text
//! run/
//!   config.json
//!   data/index.json, data/patient_<id>.f32
//!   backbone/checkpoint.json, backbone/metrics.json
//!   search-<mode>/genotype.json, trajectory.csv, metrics.json,
//!                 omega_init.json, arch.json, final-<policy>.json
//!   metrics.json
//! ```
//!
//! JSON files carry a `schema_version` and reject unknown fields.

mod dataset;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, save_dataset, DatasetIndex, PatientEntry};
pub use metrics::{export_metrics, BackboneMetrics, ExportedMetrics, SearchMetrics};

use crate::autodiff::NamedTensor;
use crate::backbone::{DataConfig, PretrainConfig, UNetBackbone, UNetChannels};
use crate::cell::{ArchParams, CellSpec};
use crate::error::{Error, Result};
use crate::genotype::{DiscreteGenotype, GenotypeEdge, GENOTYPE_SCHEMA_VERSION};
use crate::rng::{stream_rng, Stream};
use crate::search::{FinalConfig, InitPolicy, SearchConfig, SearchMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to reproduce a run. `seed` overrides `search.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub search: SearchConfig,
    pub final_training: FinalConfig,
    pub init_policy: InitPolicy,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            search: SearchConfig::default(),
            final_training: FinalConfig::default(),
            init_policy: InitPolicy::LthReset,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn search_config(&self, mode: SearchMode) -> SearchConfig {
        SearchConfig {
            mode,
            seed: self.seed,
            ..self.search
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_versioned(path, SCHEMA_VERSION)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone")
    }

    pub fn backbone_checkpoint(&self) -> PathBuf {
        self.backbone().join("checkpoint.json")
    }

    pub fn backbone_metrics(&self) -> PathBuf {
        self.backbone().join("metrics.json")
    }

    pub fn search(&self, mode: SearchMode) -> PathBuf {
        self.root.join(format!("search-{}", mode.name()))
    }

    pub fn genotype(&self, mode: SearchMode) -> PathBuf {
        self.search(mode).join("genotype.json")
    }

    pub fn trajectory(&self, mode: SearchMode) -> PathBuf {
        self.search(mode).join("trajectory.csv")
    }

    pub fn search_metrics(&self, mode: SearchMode) -> PathBuf {
        self.search(mode).join("metrics.json")
    }

    pub fn omega_init(&self, mode: SearchMode) -> PathBuf {
        self.search(mode).join("omega_init.json")
    }

    pub fn arch(&self, mode: SearchMode) -> PathBuf {
        self.search(mode).join("arch.json")
    }

    pub fn final_report(&self, mode: SearchMode, policy: InitPolicy) -> PathBuf {
        let p = match policy {
            InitPolicy::Reinit => "reinit",
            InitPolicy::LthReset => "lth_reset",
        };
        self.search(mode).join(format!("final-{p}.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        },
        _ => Error::io(path, e),
    })
}

/// Reads a JSON file whose `schema_version` must equal `version` and whose
/// fields must match the current schema exactly.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, version: u32) -> Result<T> {
    let file = path.display().to_string();
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Schema {
        file: file.clone(),
        message: e.to_string(),
    })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == version as u64 => {}
        Some(v) => {
            return Err(Error::Schema {
                file,
                message: format!("schema_version {v} is not supported (expected {version})"),
            })
        }
        None => {
            return Err(Error::Schema {
                file,
                message: format!("missing field `schema_version` (expected {version})"),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Schema {
        file,
        message: format!("does not match schema_version {version}: {e}"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    schema_version: u32,
    n_nodes: usize,
    n_outputs: usize,
    edges: Vec<GenotypeEdge>,
}

pub fn save_genotype(path: &Path, genotype: &DiscreteGenotype) -> Result<()> {
    genotype.validate()?;
    write_json(
        path,
        &GenotypeFile {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            n_nodes: genotype.n_nodes,
            n_outputs: genotype.n_outputs,
            edges: genotype.edges.clone(),
        },
    )
}

pub fn load_genotype(path: &Path) -> Result<DiscreteGenotype> {
    let f: GenotypeFile = read_versioned(path, GENOTYPE_SCHEMA_VERSION)?;
    let mut edges = f.edges;
    edges.sort_by_key(|e| (e.dst, e.src));
    let g = DiscreteGenotype {
        n_nodes: f.n_nodes,
        n_outputs: f.n_outputs,
        edges,
    };
    g.validate().map_err(|e| Error::Schema {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_json(
        path,
        &CheckpointFile {
            schema_version: SCHEMA_VERSION,
            tensors: tensors.to_vec(),
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    Ok(read_versioned::<CheckpointFile>(path, SCHEMA_VERSION)?.tensors)
}

/// Rebuilds the frozen pretrained backbone from its checkpoint.
pub fn load_backbone(path: &Path, seed: u64) -> Result<UNetBackbone> {
    let tensors = load_checkpoint(path)?;
    let mut net = UNetBackbone::new(UNetChannels::default(), &mut stream_rng(seed, Stream::Backbone, 0));
    net.store.load_named(&tensors)?;
    net.freeze();
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    schema_version: u32,
    cell: CellSpec,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    active: Vec<bool>,
    edge_active: Vec<bool>,
}

pub fn save_arch(path: &Path, spec: &CellSpec, arch: &ArchParams) -> Result<()> {
    write_json(
        path,
        &ArchFile {
            schema_version: SCHEMA_VERSION,
            cell: *spec,
            alpha: arch.alpha.clone(),
            beta: arch.beta.clone(),
            active: arch.active.clone(),
            edge_active: arch.edge_active.clone(),
        },
    )
}

pub fn load_arch(path: &Path) -> Result<(CellSpec, ArchParams)> {
    let f: ArchFile = read_versioned(path, SCHEMA_VERSION)?;
    let arch = ArchParams {
        alpha: f.alpha,
        beta: f.beta,
        active: f.active,
        edge_active: f.edge_active,
    };
    if arch.beta.len() != f.cell.n_edges() {
        return Err(Error::Schema {
            file: path.display().to_string(),
            message: format!("{} edge weights for a cell with {} edges", arch.beta.len(), f.cell.n_edges()),
        });
    }
    arch.validate().map_err(|e| Error::Schema {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((f.cell, arch))
}
