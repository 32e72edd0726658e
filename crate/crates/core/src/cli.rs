//! Command-line front end. Each subcommand reads and writes the artifacts
//! of one stage inside a run directory (see [`crate::io`]).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    emergence_epochs, genotype_view, similarity_matrix, GenotypeView, Representation, DEFAULT_CHECKPOINTS,
};
use crate::backbone::{evaluate_backbone, generate_dataset, pretrain_backbone, Dataset};
use crate::error::{Error, Result};
use crate::io::{
    export_metrics, load_arch, load_backbone, load_checkpoint, load_dataset, load_genotype, save_arch,
    save_checkpoint, save_dataset, save_genotype, write_json, BackboneMetrics, RunConfig, RunDir, SearchMetrics,
    SCHEMA_VERSION,
};
use crate::search::{run_search, train_final, InitPolicy, SearchMode};
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Parser)]
#[command(name = "cellsearch", version, about = "Skip-connection cell search on a toy U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON). Defaults to <out>/config.json when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and cache it in <out>/data.
    GenData(Common),
    /// Train the plain U-Net and freeze it.
    Pretrain(Common),
    /// Search the skip-connection cell.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: SearchMode,
    },
    /// Train the searched discrete cell from its initialization policy.
    TrainFinal {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: SearchMode,
        /// reinit or lth_reset; defaults to the configured policy.
        #[arg(long, value_parser = parse_policy)]
        init: Option<InitPolicy>,
    },
    /// Similarity matrices and emergence tables from a search trajectory.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode, default_value = "lth")]
        mode: SearchMode,
        /// Comma-separated epochs; defaults to the standard checkpoints that were logged.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
        /// Representation compared in the similarity matrix.
        #[arg(long, value_parser = parse_rep, default_value = "full")]
        similarity: Representation,
        /// Representation of the exported per-checkpoint genotype vectors.
        #[arg(long, value_parser = parse_rep, default_value = "full")]
        representation: Representation,
    },
    /// Collect metrics into <out>/metrics.json.
    Export {
        #[command(flatten)]
        common: Common,
        /// Baseline search directory (or its metrics.json) used for the speed-up.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<SearchMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<InitPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rep(s: &str) -> std::result::Result<Representation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Context {
    cfg: RunConfig,
    run: RunDir,
}

impl Common {
    fn resolve(&self) -> Result<Context> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => {
                let out = self.out.clone().unwrap_or_else(|| PathBuf::from("run"));
                let p = RunDir::new(out).config();
                if p.exists() {
                    RunConfig::load(&p)?
                } else {
                    RunConfig::default()
                }
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let root = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("run"));
        Ok(Context {
            cfg,
            run: RunDir::new(root),
        })
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: format!("run `{stage}` first"),
        })
    }
}

fn load_data(run: &RunDir) -> Result<Dataset> {
    require(&run.data().join("index.json"), "gen-data")?;
    Ok(load_dataset(&run.data())?.0)
}

/// Runs one subcommand and returns its JSON summary.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenData(common) => {
            let Context { cfg, run } = common.resolve()?;
            let data = generate_dataset(cfg.seed, &cfg.data)?;
            save_dataset(&run.data(), &data, cfg.seed, &cfg.data)?;
            cfg.save(&run.config())?;
            Ok(json!({
                "command": "gen-data",
                "data": run.data(),
                "patients": {"train": data.train.len(), "val": data.val.len(), "test": data.test.len()},
            }))
        }
        Command::Pretrain(common) => {
            let Context { cfg, run } = common.resolve()?;
            let data = load_data(&run)?;
            let (net, report) = pretrain_backbone(&data, &cfg.pretrain, cfg.seed)?;
            let reference = evaluate_backbone(&net, &data.test, data.size)?;
            save_checkpoint(&run.backbone_checkpoint(), &net.store.to_named())?;
            let metrics = BackboneMetrics {
                schema_version: SCHEMA_VERSION,
                seed: cfg.seed,
                pretrain: report,
                reference_test_dice: reference.mean_foreground,
                reference_test_per_class: reference.per_class,
                fingerprint: net.fingerprint(),
            };
            write_json(&run.backbone_metrics(), &metrics)?;
            Ok(json!({
                "command": "pretrain",
                "best_epoch": metrics.pretrain.best_epoch,
                "best_val_dice": metrics.pretrain.best_val_dice,
                "reference_test_dice": metrics.reference_test_dice,
            }))
        }
        Command::Search { common, mode } => {
            let Context { cfg, run } = common.resolve()?;
            let data = load_data(&run)?;
            require(&run.backbone_checkpoint(), "pretrain")?;
            let backbone = load_backbone(&run.backbone_checkpoint(), cfg.seed)?;
            let scfg = cfg.search_config(mode);
            let result = run_search(scfg, &backbone, &data)?;
            save_genotype(&run.genotype(mode), &result.genotype)?;
            result.trajectory.write_csv(&run.trajectory(mode))?;
            save_checkpoint(&run.omega_init(mode), &result.init_snapshot)?;
            save_arch(&run.arch(mode), &scfg.cell, &result.arch)?;
            let metrics = SearchMetrics::from_result(&result, cfg.seed);
            write_json(&run.search_metrics(mode), &metrics)?;
            Ok(json!({
                "command": "search",
                "mode": mode,
                "epochs_used": result.epochs_used,
                "converged": result.converged,
                "wall_time_secs": result.wall_time_secs,
                "warnings": result.warnings,
            }))
        }
        Command::TrainFinal { common, mode, init } => {
            let Context { cfg, run } = common.resolve()?;
            let policy = init.unwrap_or(cfg.init_policy);
            let data = load_data(&run)?;
            require(&run.backbone_checkpoint(), "pretrain")?;
            require(&run.genotype(mode), "search")?;
            let backbone = load_backbone(&run.backbone_checkpoint(), cfg.seed)?;
            let genotype = load_genotype(&run.genotype(mode))?;
            let snapshot = load_checkpoint(&run.omega_init(mode))?;
            let (spec, arch) = load_arch(&run.arch(mode))?;
            let report = train_final(
                &backbone,
                &data,
                &spec,
                &genotype,
                &snapshot,
                policy,
                Some(&arch),
                &cfg.final_training,
                cfg.seed,
            )?;
            write_json(&run.final_report(mode, policy), &report)?;
            Ok(json!({
                "command": "train-final",
                "mode": mode,
                "init": policy,
                "best_epoch": report.best_epoch,
                "test_dice": report.test_dice,
            }))
        }
        Command::Analyze {
            common,
            mode,
            checkpoints,
            similarity,
            representation,
        } => {
            let Context { cfg, run } = common.resolve()?;
            require(&run.trajectory(mode), "search")?;
            let spec = cfg.search.cell;
            let traj = TrajectoryLog::read_csv(&run.trajectory(mode))?;
            let genotype = load_genotype(&run.genotype(mode))?;
            let checkpoints = match checkpoints {
                Some(c) => c,
                None => {
                    let logged = traj.epochs();
                    DEFAULT_CHECKPOINTS
                        .into_iter()
                        .filter(|c| logged.binary_search(c).is_ok())
                        .collect()
                }
            };
            let dir = run.search(mode);
            let matrix = similarity_matrix(&spec, &traj, similarity, &checkpoints)?;
            let sim_path = dir.join(format!("similarity-{similarity}.csv"));
            write_with(&sim_path, |w| matrix.write_csv(w))?;

            let report = emergence_epochs(&spec, &traj, &genotype, cfg.search.warmup_epochs + 1, cfg.search.max_epochs)?;
            let em_path = dir.join("emergence.csv");
            write_with(&em_path, |w| report.write_csv(w))?;
            let summary_path = dir.join("emergence_summary.csv");
            write_with(&summary_path, |w| report.write_summary_csv(w))?;

            let mut vectors = serde_json::Map::new();
            for &c in &checkpoints {
                let v = match genotype_view(&spec, &traj, representation, c)? {
                    GenotypeView::Continuous(v) => json!(v),
                    GenotypeView::Binary(b) => json!(b.iter().map(|&x| x as u8).collect::<Vec<_>>()),
                };
                vectors.insert(c.to_string(), v);
            }
            let vec_path = dir.join(format!("genotype_vectors-{representation}.json"));
            write_json(&vec_path, &vectors)?;
            Ok(json!({
                "command": "analyze",
                "checkpoints": checkpoints,
                "similarity": sim_path,
                "emergence": em_path,
                "emergence_summary": summary_path,
                "vectors": vec_path,
                "median_top3": report.median_top3,
                "median_top1": report.median_top1,
            }))
        }
        Command::Export { common, baseline } => {
            let Context { run, .. } = common.resolve()?;
            let m = export_metrics(&run, baseline.as_deref())?;
            Ok(json!({
                "command": "export",
                "metrics": run.metrics(),
                "speed_up": m.speed_up,
            }))
        }
    }
}

fn write_with(path: &Path, f: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>) -> Result<()> {
    crate::io::create_parent(path)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f(&mut file).map_err(|e| Error::io(path, e))
}

/// Machine-readable failure record.
pub fn error_record(kind: &str, message: &str) -> serde_json::Value {
    json!({"error": {"kind": kind, "message": message}})
}
