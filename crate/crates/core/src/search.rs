//! Stage II (cell search) in both regimes and Stage III (final training of
//! the discrete cell).
//!
//! The backbone is frozen throughout; its encoder outputs are cached once
//! per sample and only the decoder, the two cells and the loss are rebuilt
//! on every batch.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, sgd_step, AdamConfig, Graph, NamedTensor, ParamId, ParamStore, Tensor, Var};
use crate::backbone::data::{slice_index, Dataset, SynthVolume};
use crate::backbone::loss::loss;
use crate::backbone::pretrain::{evaluate_split, EvalReport};
use crate::backbone::unet::{EncodedSample, EncoderVars, Level, UNetBackbone, UNetChannels};
use crate::cell::{ArchParams, ArchVars, CellEval, CellMode, CellSpec, CellWeights, ChannelMask, NUM_OPS};
use crate::error::{Error, Result};
use crate::genotype::{discretize, DiscreteGenotype};
use crate::pruner::{edge_distribution, finalize_edges, importance, is_converged, EdgeCheck, ImportanceState, PruneEvent, PrunerConfig};
use crate::rng::{stream_rng, Stream};
use crate::trajectory::{TrajectoryLog, TrajectoryRow};

/// Shuffle-stream salts, kept apart per phase.
const SALT_SEARCH: u64 = 0;
const SALT_VAL_SEARCH: u64 = 1 << 20;
const SALT_FINAL: u64 = 2 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    Baseline,
    Lth,
}

impl SearchMode {
    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Baseline => "baseline",
            SearchMode::Lth => "lth",
        }
    }
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(SearchMode::Baseline),
            "lth" => Ok(SearchMode::Lth),
            _ => Err(Error::Config(format!("unknown search mode `{s}` (expected baseline or lth)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub lr_weights: f64,
    pub lr_arch: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub pruner: PrunerConfig,
    pub cell: CellSpec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: SearchMode::Lth,
            warmup_epochs: 15,
            max_epochs: 200,
            lr_weights: 0.01,
            lr_arch: 0.001,
            batch_size: 8,
            seed: 0,
            pruner: PrunerConfig::default(),
            cell: CellSpec::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warm-up ({}) must be shorter than max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.lr_weights > 0.0 && self.lr_arch > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "learning rates and batch size must be positive, got {} / {} / {}",
                self.lr_weights, self.lr_arch, self.batch_size
            )));
        }
        self.pruner.validate()?;
        self.cell.validate()
    }
}

/// Encoder outputs and labels of a fixed set of slices.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub samples: Vec<EncodedSample>,
    pub labels: Vec<Vec<u8>>,
}

impl EncodedSet {
    pub fn build(backbone: &UNetBackbone, volumes: &[SynthVolume], size: usize) -> Result<Self> {
        let refs = slice_index(volumes);
        let mut samples = Vec::with_capacity(refs.len());
        for chunk in refs.chunks(32) {
            let images = crate::backbone::data::batch_images(volumes, chunk, size);
            samples.extend(backbone.encode(&images)?);
        }
        let labels = refs
            .iter()
            .map(|&(p, s)| volumes[p].slices[s].labels.clone())
            .collect();
        Ok(EncodedSet { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(EncodedSample, Vec<u8>)> {
        let parts: Vec<&EncodedSample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let labels = idx.iter().flat_map(|&i| self.labels[i].iter().copied()).collect();
        Ok((EncodedSample::stack(&parts)?, labels))
    }

    fn shuffled(&self, seed: u64, salt: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, salt));
        order
    }
}

/// The per-level cell weight sets of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPair {
    pub coarse: CellWeights,
    pub fine: CellWeights,
}

impl CellPair {
    pub fn init(
        spec: &CellSpec,
        channels: &UNetChannels,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (s, u) = channels.skip_inputs(Level::Coarse);
        let coarse = CellWeights::init(spec, s, u, s, "cell_coarse", store, rng)?;
        let (s, u) = channels.skip_inputs(Level::Fine);
        let fine = CellWeights::init(spec, s, u, s, "cell_fine", store, rng)?;
        Ok(CellPair { coarse, fine })
    }

    pub fn level(&self, level: Level) -> &CellWeights {
        match level {
            Level::Coarse => &self.coarse,
            Level::Fine => &self.fine,
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.coarse.all_ids();
        ids.extend(self.fine.all_ids());
        ids
    }

    pub fn surviving_ids(&self, spec: &CellSpec, genotype: &DiscreteGenotype) -> Vec<ParamId> {
        let mut ids = self.coarse.surviving_ids(spec, genotype);
        ids.extend(self.fine.surviving_ids(spec, genotype));
        ids
    }
}

/// Decoder forward with both skips routed through cells.
fn cell_logits(
    g: &mut Graph,
    backbone: &UNetBackbone,
    enc: EncoderVars,
    spec: &CellSpec,
    cells: &CellPair,
    store: &ParamStore,
    train_weights: bool,
    mode: &CellMode,
) -> Result<Var> {
    backbone.decode_graph(g, enc, false, &mut |g, level, skip, up| {
        let eval = CellEval {
            spec,
            weights: cells.level(level),
            store,
            train_weights,
        };
        eval.forward(g, skip, up, mode)
    })
}

/// Cell weights plus architecture parameters of a search run.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub spec: CellSpec,
    pub channels: UNetChannels,
    pub weights: ParamStore,
    pub cells: CellPair,
    pub arch_store: ParamStore,
    pub alpha_id: ParamId,
    pub beta_id: ParamId,
    pub arch: ArchParams,
    pub masks: Vec<ChannelMask>,
}

impl Supernet {
    pub fn new(spec: CellSpec, channels: UNetChannels, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut weights = ParamStore::new();
        let cells = CellPair::init(&spec, &channels, &mut weights, &mut stream_rng(seed, Stream::CellWeights, 0))?;
        let arch = ArchParams::new(spec.n_edges());
        let mut arch_store = ParamStore::new();
        let alpha_id = arch_store.add("arch.alpha", Tensor::new(vec![arch.alpha.len()], arch.alpha.clone())?);
        let beta_id = arch_store.add("arch.beta", Tensor::new(vec![arch.beta.len()], arch.beta.clone())?);
        let mut rng = stream_rng(seed, Stream::Masks, 0);
        let masks = (0..spec.n_edges())
            .map(|_| ChannelMask::sample(&mut rng, spec.channels, spec.partial_k))
            .collect();
        Ok(Supernet {
            spec,
            channels,
            weights,
            cells,
            arch_store,
            alpha_id,
            beta_id,
            arch,
            masks,
        })
    }

    fn logits(
        &self,
        g: &mut Graph,
        backbone: &UNetBackbone,
        enc: EncoderVars,
        train_weights: bool,
        train_arch: bool,
    ) -> Result<Var> {
        let vars = ArchVars {
            alpha: g.bind(&self.arch_store, self.alpha_id, train_arch),
            beta: g.bind(&self.arch_store, self.beta_id, train_arch),
        };
        let mode = CellMode::Supernet {
            arch: &self.arch,
            vars,
            masks: &self.masks,
        };
        cell_logits(g, backbone, enc, &self.spec, &self.cells, &self.weights, train_weights, &mode)
    }

    fn sync_arch(&mut self) {
        self.arch.alpha.copy_from_slice(self.arch_store.get(self.alpha_id).tensor.values());
        self.arch.beta.copy_from_slice(self.arch_store.get(self.beta_id).tensor.values());
    }

    pub fn arch_fingerprint(&self) -> u64 {
        self.arch_store.fingerprint()
    }
}

/// Where a training batch came from, for regime-separation accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSource {
    Train,
    TrainSearch,
    ValSearch,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchCounts {
    pub weight_steps: BTreeMap<BatchSource, usize>,
    pub arch_steps: BTreeMap<BatchSource, usize>,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub net: Supernet,
    pub epoch: usize,
    /// Cell weights before any update.
    pub init_snapshot: Vec<NamedTensor>,
    pub pruner: ImportanceState,
    pub trajectory: TrajectoryLog,
    pub events: Vec<PruneEvent>,
    pub batches: BatchCounts,
}

/// One search run over cached encoder features.
pub struct SearchRun<'a> {
    pub config: SearchConfig,
    pub backbone: &'a UNetBackbone,
    /// Full training set (lth) or train_search half (baseline).
    pub train: EncodedSet,
    /// val_search half (baseline only).
    pub val: Option<EncodedSet>,
    pub state: SearchState,
}

/// Splits training patients once into train_search / val_search halves.
pub fn split_search_halves(volumes: &[SynthVolume], seed: u64) -> (Vec<SynthVolume>, Vec<SynthVolume>) {
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 1));
    let half = volumes.len().div_ceil(2);
    let mut a: Vec<usize> = order[..half].to_vec();
    let mut b: Vec<usize> = order[half..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (
        a.into_iter().map(|i| volumes[i].clone()).collect(),
        b.into_iter().map(|i| volumes[i].clone()).collect(),
    )
}

impl<'a> SearchRun<'a> {
    pub fn new(config: SearchConfig, backbone: &'a UNetBackbone, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if !backbone.frozen {
            return Err(Error::Config("search requires a frozen, pretrained backbone".into()));
        }
        let (train, val) = match config.mode {
            SearchMode::Lth => (EncodedSet::build(backbone, &data.train, data.size)?, None),
            SearchMode::Baseline => {
                let (a, b) = split_search_halves(&data.train, config.seed);
                if a.is_empty() || b.is_empty() {
                    return Err(Error::Config("baseline search needs at least two training patients".into()));
                }
                (
                    EncodedSet::build(backbone, &a, data.size)?,
                    Some(EncodedSet::build(backbone, &b, data.size)?),
                )
            }
        };
        let net = Supernet::new(config.cell, backbone.channels, config.seed)?;
        let init_snapshot = net.weights.to_named();
        let pruner = ImportanceState::new(config.cell.n_edges(), config.pruner);
        Ok(SearchRun {
            config,
            backbone,
            train,
            val,
            state: SearchState {
                net,
                epoch: 0,
                init_snapshot,
                pruner,
                trajectory: TrajectoryLog::new(),
                events: Vec::new(),
                batches: BatchCounts::default(),
            },
        })
    }

    fn train_source(&self) -> BatchSource {
        match self.config.mode {
            SearchMode::Lth => BatchSource::Train,
            SearchMode::Baseline => BatchSource::TrainSearch,
        }
    }

    fn batch_loss(&self, g: &mut Graph, set: &EncodedSet, idx: &[usize], train_weights: bool, train_arch: bool) -> Result<Var> {
        let (enc, labels) = set.batch(idx)?;
        let enc = enc.bind(g);
        let y = self.state.net.logits(g, self.backbone, enc, train_weights, train_arch)?;
        Ok(loss(g, y, &labels)?.0)
    }

    fn with_context<T>(&self, r: Result<T>, batch: usize) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} at epoch {}, batch {batch}", self.state.epoch),
            },
            other => other,
        })
    }

    fn weight_step(&mut self, source: BatchSource, idx: &[usize], batch: usize) -> Result<()> {
        let set = if source == BatchSource::ValSearch {
            self.val.as_ref().expect("val_search set")
        } else {
            &self.train
        };
        let mut g = Graph::new();
        let l = self.batch_loss(&mut g, set, idx, true, false);
        let l = self.with_context(l, batch)?;
        let ids = self.state.net.cells.all_ids();
        g.backward(l, &mut self.state.net.weights)?;
        sgd_step(&mut self.state.net.weights, &ids, self.config.lr_weights);
        *self.state.batches.weight_steps.entry(source).or_default() += 1;
        Ok(())
    }

    fn arch_step(&mut self, source: BatchSource, idx: &[usize], batch: usize) -> Result<()> {
        let set = if source == BatchSource::ValSearch {
            self.val.as_ref().expect("val_search set")
        } else {
            &self.train
        };
        let mut g = Graph::new();
        let l = self.batch_loss(&mut g, set, idx, false, true);
        let l = self.with_context(l, batch)?;
        let net = &mut self.state.net;
        let ids = [net.alpha_id, net.beta_id];
        g.backward(l, &mut net.arch_store)?;
        adam_step(&mut net.arch_store, &ids, AdamConfig::with_lr(self.config.lr_arch));
        net.sync_arch();
        *self.state.batches.arch_steps.entry(source).or_default() += 1;
        Ok(())
    }

    /// One warm-up epoch: cell weights only, architecture held constant.
    pub fn warmup_epoch(&mut self) -> Result<()> {
        self.state.epoch += 1;
        let order = self.train.shuffled(self.config.seed, SALT_SEARCH + self.state.epoch as u64);
        let source = self.train_source();
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            self.weight_step(source, idx, b)?;
        }
        Ok(())
    }

    /// Single-level epoch: per batch, a weight step then an architecture
    /// step on the same batch of the full training set.
    pub fn epoch_lth(&mut self) -> Result<()> {
        self.state.epoch += 1;
        let order = self.train.shuffled(self.config.seed, SALT_SEARCH + self.state.epoch as u64);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            self.weight_step(BatchSource::Train, idx, b)?;
            self.arch_step(BatchSource::Train, idx, b)?;
        }
        Ok(())
    }

    /// First-order bilevel epoch: weight steps on train_search batches
    /// alternate with architecture steps on val_search batches.
    pub fn epoch_bilevel(&mut self) -> Result<()> {
        let Some(val) = self.val.as_ref() else {
            return Err(Error::Config("bilevel epoch requires a val_search split".into()));
        };
        self.state.epoch += 1;
        let e = self.state.epoch as u64;
        let t_order = self.train.shuffled(self.config.seed, SALT_SEARCH + e);
        let v_order = val.shuffled(self.config.seed, SALT_VAL_SEARCH + e);
        let bs = self.config.batch_size;
        let t_batches: Vec<&[usize]> = t_order.chunks(bs).collect();
        let v_batches: Vec<&[usize]> = v_order.chunks(bs).collect();
        for b in 0..t_batches.len().max(v_batches.len()) {
            if let Some(idx) = t_batches.get(b) {
                self.weight_step(BatchSource::TrainSearch, idx, b)?;
            }
            if let Some(idx) = v_batches.get(b) {
                self.arch_step(BatchSource::ValSearch, idx, b)?;
            }
        }
        Ok(())
    }

    fn log_rows(&mut self, checks: &[EdgeCheck], with_js: bool) {
        let edges = self.config.cell.edges();
        let arch = &self.state.net.arch;
        for c in checks {
            for (k, &o) in c.ops.iter().enumerate() {
                self.state.trajectory.rows.push(TrajectoryRow {
                    epoch: self.state.epoch,
                    edge_src: edges[c.edge].src,
                    edge_dst: edges[c.edge].dst,
                    op: crate::cell::OpKind::ALL[o],
                    alpha: arch.alpha[c.edge * NUM_OPS + o],
                    beta: arch.beta[c.edge],
                    theta: c.theta[k],
                    p: c.dist[k],
                    js_of_edge: if with_js { c.js } else { None },
                    theta_threshold: c.threshold,
                    event: String::new(),
                });
            }
        }
    }

    fn record_events(&mut self, events: Vec<PruneEvent>) {
        for ev in &events {
            self.state.trajectory.annotate(&self.config.cell, ev);
        }
        self.state.events.extend(events);
    }

    /// Logs the current epoch without a stability check.
    fn log_plain(&mut self) -> Result<()> {
        let checks = self.plain_checks()?;
        self.log_rows(&checks, false);
        Ok(())
    }

    fn plain_checks(&self) -> Result<Vec<EdgeCheck>> {
        let arch = &self.state.net.arch;
        let mut out = Vec::new();
        for e in (0..arch.n_edges()).filter(|&e| arch.edge_active[e]) {
            let theta = importance(arch, e);
            let dist = edge_distribution(&theta, self.config.pruner.eps)?;
            out.push(EdgeCheck {
                edge: e,
                ops: arch.active_ops(e),
                theta,
                dist,
                js: None,
                threshold: self.state.pruner.thresholds[e],
            });
        }
        Ok(out)
    }

    /// Runs the configured regime to completion.
    pub fn run(mut self) -> Result<SearchResult> {
        let start = Instant::now();
        let backbone_before = self.backbone.fingerprint();
        let spec = self.config.cell;
        let mut warnings = Vec::new();
        let mut converged = false;
        let mut genotype = None;

        while self.state.epoch < self.config.max_epochs {
            let warm = self.state.epoch < self.config.warmup_epochs;
            match (warm, self.config.mode) {
                (true, _) => self.warmup_epoch()?,
                (false, SearchMode::Lth) => self.epoch_lth()?,
                (false, SearchMode::Baseline) => self.epoch_bilevel()?,
            }
            if warm || self.config.mode == SearchMode::Baseline {
                self.log_plain()?;
                continue;
            }
            let epoch = self.state.epoch;
            let report = self.state.pruner.check_epoch(&spec, &mut self.state.net.arch, epoch)?;
            self.log_rows(&report.edges, true);
            self.record_events(report.events);
            if is_converged(&self.state.net.arch) {
                let (g, events, w) = finalize_edges(&spec, &mut self.state.net.arch, epoch)?;
                self.record_events(events);
                warnings.extend(w);
                genotype = Some(g);
                converged = true;
                break;
            }
        }
        let genotype = match genotype {
            Some(g) => g,
            None => {
                if self.config.mode == SearchMode::Lth {
                    warnings.push(format!(
                        "search did not converge within {} epochs; using argmax discretization",
                        self.config.max_epochs
                    ));
                }
                let (g, w) = discretize(&spec, &self.state.net.arch)?;
                warnings.extend(w);
                g
            }
        };
        let backbone_after = self.backbone.fingerprint();
        if backbone_before != backbone_after {
            return Err(Error::Config("backbone weights changed during search".into()));
        }
        Ok(SearchResult {
            mode: self.config.mode,
            genotype,
            epochs_used: self.state.epoch,
            wall_time_secs: start.elapsed().as_secs_f64(),
            converged,
            warnings,
            arch: self.state.net.arch.clone(),
            trajectory: self.state.trajectory,
            events: self.state.events,
            init_snapshot: self.state.init_snapshot,
            batches: self.state.batches,
            backbone_fingerprint: backbone_after,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub mode: SearchMode,
    pub genotype: DiscreteGenotype,
    pub epochs_used: usize,
    pub wall_time_secs: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub arch: ArchParams,
    pub trajectory: TrajectoryLog,
    pub events: Vec<PruneEvent>,
    pub init_snapshot: Vec<NamedTensor>,
    pub batches: BatchCounts,
    pub backbone_fingerprint: u64,
}

pub fn run_search(config: SearchConfig, backbone: &UNetBackbone, data: &Dataset) -> Result<SearchResult> {
    SearchRun::new(config, backbone, data)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Reinit,
    LthReset,
}

impl std::str::FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinit" => Ok(InitPolicy::Reinit),
            "lth_reset" | "lth-reset" => Ok(InitPolicy::LthReset),
            _ => Err(Error::Config(format!("unknown init policy `{s}` (expected reinit or lth_reset)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinalConfig {
    fn default() -> Self {
        FinalConfig {
            epochs: 200,
            lr: 0.001,
            batch_size: 8,
        }
    }
}

/// Discrete cells at full channel width, ready for Stage III.
#[derive(Debug, Clone)]
pub struct FinalModel {
    pub spec: CellSpec,
    pub genotype: DiscreteGenotype,
    pub store: ParamStore,
    pub cells: CellPair,
    pub policy: InitPolicy,
}

/// Builds the Stage III model. `lth_reset` restores every cell weight from
/// `snapshot` bit-exactly; `reinit` draws fresh weights. When `searched` is
/// given, the genotype may only use ops that survived the search.
pub fn prepare_final(
    spec: &CellSpec,
    channels: UNetChannels,
    genotype: &DiscreteGenotype,
    snapshot: &[NamedTensor],
    policy: InitPolicy,
    searched: Option<&ArchParams>,
    seed: u64,
) -> Result<FinalModel> {
    genotype.validate()?;
    if genotype.spec_shape() != (spec.n_nodes, spec.n_outputs) {
        return Err(Error::Genotype(format!(
            "genotype is for {:?} nodes/outputs, cell has {:?}",
            genotype.spec_shape(),
            (spec.n_nodes, spec.n_outputs)
        )));
    }
    if let Some(arch) = searched {
        for e in &genotype.edges {
            let idx = spec.edge_index(e.src, e.dst).ok_or_else(|| {
                Error::Genotype(format!("edge {}->{} outside the cell", e.src, e.dst))
            })?;
            if !arch.is_active(idx, e.op.index()) {
                return Err(Error::Genotype(format!(
                    "edge {}->{} uses pruned op {}",
                    e.src, e.dst, e.op
                )));
            }
        }
    }
    let mut store = ParamStore::new();
    let cells = CellPair::init(spec, &channels, &mut store, &mut stream_rng(seed, Stream::CellWeights, 0))?;
    match policy {
        InitPolicy::LthReset => store.load_named(snapshot)?,
        InitPolicy::Reinit => {
            let mut rng = stream_rng(seed, Stream::Reinit, 0);
            cells.coarse.reinitialize(&mut store, &mut rng);
            cells.fine.reinitialize(&mut store, &mut rng);
        }
    }
    Ok(FinalModel {
        spec: *spec,
        genotype: genotype.clone(),
        store,
        cells,
        policy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub policy: InitPolicy,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub test_dice: f64,
    pub test_per_class: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
    pub backbone_fingerprint: u64,
}

impl FinalModel {
    pub fn surviving_ids(&self) -> Vec<ParamId> {
        self.cells.surviving_ids(&self.spec, &self.genotype)
    }

    fn logits(&self, g: &mut Graph, backbone: &UNetBackbone, enc: EncoderVars, train: bool) -> Result<Var> {
        let mode = CellMode::Discrete {
            genotype: &self.genotype,
        };
        cell_logits(g, backbone, enc, &self.spec, &self.cells, &self.store, train, &mode)
    }

    pub fn evaluate(&self, backbone: &UNetBackbone, volumes: &[SynthVolume], set: &EncodedSet) -> Result<EvalReport> {
        let refs = slice_index(volumes);
        let mut cursor = 0;
        evaluate_split(volumes, 16, &mut |chunk| {
            let idx: Vec<usize> = (cursor..cursor + chunk.len()).collect();
            debug_assert_eq!(&refs[cursor..cursor + chunk.len()], chunk);
            cursor += chunk.len();
            let (enc, _) = set.batch(&idx)?;
            let mut g = Graph::new();
            let enc = enc.bind(&mut g);
            let y = self.logits(&mut g, backbone, enc, false)?;
            Ok(g.tensor(y))
        })
    }

    /// Trains the surviving cell weights with Adam, keeping the best
    /// validation checkpoint, and reports its test Dice.
    pub fn train(&mut self, backbone: &UNetBackbone, data: &Dataset, config: &FinalConfig, seed: u64) -> Result<FinalReport> {
        if !backbone.frozen {
            return Err(Error::Config("final training requires a frozen backbone".into()));
        }
        if config.batch_size == 0 || !(config.lr > 0.0) {
            return Err(Error::Config(format!("bad final-training config {config:?}")));
        }
        let before = backbone.fingerprint();
        let train = EncodedSet::build(backbone, &data.train, data.size)?;
        let val = EncodedSet::build(backbone, &data.val, data.size)?;
        let test = EncodedSet::build(backbone, &data.test, data.size)?;
        let ids = self.surviving_ids();
        let adam = AdamConfig::with_lr(config.lr);
        let mut best = (0usize, self.evaluate(backbone, &data.val, &val)?.mean_foreground, self.store.to_named());
        let mut train_loss = Vec::with_capacity(config.epochs);
        let mut val_dice = Vec::with_capacity(config.epochs);
        for epoch in 1..=config.epochs {
            let order = train.shuffled(seed, SALT_FINAL + epoch as u64);
            let mut total = 0.0;
            for (b, idx) in order.chunks(config.batch_size).enumerate() {
                let (enc, labels) = train.batch(idx)?;
                let mut g = Graph::new();
                let enc = enc.bind(&mut g);
                let y = self.logits(&mut g, backbone, enc, true)?;
                let (l, parts) = loss(&mut g, y, &labels).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite {
                        context: format!("final training epoch {epoch}, batch {b}"),
                    },
                    other => other,
                })?;
                g.backward(l, &mut self.store)?;
                adam_step(&mut self.store, &ids, adam);
                total += parts.total * idx.len() as f64;
            }
            train_loss.push(total / train.len() as f64);
            let d = self.evaluate(backbone, &data.val, &val)?.mean_foreground;
            val_dice.push(d);
            if d > best.1 {
                best = (epoch, d, self.store.to_named());
            }
        }
        self.store.load_named(&best.2)?;
        let test_eval = self.evaluate(backbone, &data.test, &test)?;
        if backbone.fingerprint() != before {
            return Err(Error::Config("backbone weights changed during final training".into()));
        }
        Ok(FinalReport {
            policy: self.policy,
            epochs: config.epochs,
            best_epoch: best.0,
            best_val_dice: best.1,
            test_dice: test_eval.mean_foreground,
            test_per_class: test_eval.per_class,
            train_loss,
            val_dice,
            backbone_fingerprint: before,
        })
    }
}

/// Stage III end to end: prepare with `policy`, train, report test Dice.
#[allow(clippy::too_many_arguments)]
pub fn train_final(
    backbone: &UNetBackbone,
    data: &Dataset,
    spec: &CellSpec,
    genotype: &DiscreteGenotype,
    snapshot: &[NamedTensor],
    policy: InitPolicy,
    searched: Option<&ArchParams>,
    config: &FinalConfig,
    seed: u64,
) -> Result<FinalReport> {
    let mut model = prepare_final(spec, backbone.channels, genotype, snapshot, policy, searched, seed)?;
    model.train(backbone, data, config, seed)
}
