//! Stage I: train the plain U-Net with Adam and keep the checkpoint with the
//! best validation Dice.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{batch_images, batch_labels, slice_index, Dataset, SynthVolume, CLASSES};
use super::loss::{argmax_labels, loss, patient_dice};
use super::unet::{UNetBackbone, UNetChannels};
use crate::autodiff::{adam_step, AdamConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Shuffle-stream salt offset for pretraining epochs.
const PRETRAIN_SALT: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            lr: 0.001,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_patient: Vec<f64>,
    /// Per-class Dice averaged over patients, background at index 0.
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
}

/// Mean over patients of the patient-level mean foreground Dice. `logits`
/// maps a batch of slice references to (b, classes, h, w) logits.
pub fn evaluate_split(
    volumes: &[SynthVolume],
    batch_size: usize,
    logits: &mut dyn FnMut(&[(usize, usize)]) -> Result<Tensor>,
) -> Result<EvalReport> {
    if volumes.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let refs = slice_index(volumes);
    let mut preds: Vec<Vec<Vec<u8>>> = volumes.iter().map(|v| Vec::with_capacity(v.slices.len())).collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let out = logits(chunk)?;
        let labels = argmax_labels(out.values(), out.shape());
        let hw = out.shape()[2] * out.shape()[3];
        for (k, &(p, _)) in chunk.iter().enumerate() {
            preds[p].push(labels[k * hw..(k + 1) * hw].to_vec());
        }
    }
    let mut per_patient = Vec::with_capacity(volumes.len());
    let mut per_class = vec![0.0; CLASSES];
    for (v, pred) in volumes.iter().zip(&preds) {
        let truth: Vec<Vec<u8>> = v.slices.iter().map(|s| s.labels.clone()).collect();
        let d = patient_dice(pred, &truth, CLASSES)?;
        per_class.iter_mut().zip(&d.per_class).for_each(|(a, b)| *a += b);
        per_patient.push(d.mean_foreground);
    }
    let n = per_patient.len() as f64;
    per_class.iter_mut().for_each(|a| *a /= n);
    let mean_foreground = per_patient.iter().sum::<f64>() / n;
    Ok(EvalReport {
        per_patient,
        per_class,
        mean_foreground,
    })
}

pub fn evaluate_backbone(net: &UNetBackbone, volumes: &[SynthVolume], size: usize) -> Result<EvalReport> {
    evaluate_split(volumes, 16, &mut |refs| {
        let mut g = Graph::new();
        let x = g.constant_owned(batch_images(volumes, refs, size));
        let y = net.forward(&mut g, x, false)?;
        Ok(g.tensor(y))
    })
}

/// Trains a fresh backbone for `seed` and returns it frozen at its best
/// validation checkpoint.
pub fn pretrain_backbone(
    data: &Dataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(UNetBackbone, PretrainReport)> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("pretraining needs non-empty train and val splits".into()));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config(format!("bad pretraining config {config:?}")));
    }
    let mut net = UNetBackbone::new(UNetChannels::default(), &mut stream_rng(seed, Stream::Backbone, 0));
    let ids = net.param_ids();
    let adam = AdamConfig::with_lr(config.lr);
    let mut refs = slice_index(&data.train);
    let mut best = (0usize, f64::NEG_INFINITY, net.store.to_named());
    let mut report = PretrainReport {
        epochs: config.epochs,
        best_epoch: 0,
        best_val_dice: 0.0,
        train_loss: Vec::new(),
        val_dice: Vec::new(),
    };

    for epoch in 1..=config.epochs {
        refs.shuffle(&mut stream_rng(seed, Stream::Shuffle, PRETRAIN_SALT + epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in refs.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let x = g.constant_owned(batch_images(&data.train, chunk, data.size));
            let y = net.forward(&mut g, x, true)?;
            let labels = batch_labels(&data.train, chunk);
            let (l, parts) = loss(&mut g, y, &labels).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    context: format!("pretraining epoch {epoch}, batch {b}"),
                },
                other => other,
            })?;
            g.backward(l, &mut net.store)?;
            adam_step(&mut net.store, &ids, adam);
            total += parts.total * chunk.len() as f64;
        }
        report.train_loss.push(total / refs.len() as f64);
        let dice = evaluate_backbone(&net, &data.val, data.size)?.mean_foreground;
        report.val_dice.push(dice);
        if dice > best.1 {
            best = (epoch, dice, net.store.to_named());
        }
    }
    if config.epochs > 0 {
        net.store.load_named(&best.2)?;
        report.best_epoch = best.0;
        report.best_val_dice = best.1;
    } else {
        report.best_val_dice = evaluate_backbone(&net, &data.val, data.size)?.mean_foreground;
    }
    for id in ids {
        net.store.get_mut(id).adam = None;
        net.store.get_mut(id).tensor.grad = None;
    }
    net.freeze();
    Ok((net, report))
}
