//! Synthetic 2-D segmentation task: per-patient stacks of 16x16 slices with
//! rectangles (class 1) and ellipses (class 2) on a noisy background.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// Row-major H*W intensities (f32-representable).
    pub image: Vec<f64>,
    /// Row-major H*W class labels.
    pub labels: Vec<u8>,
}

impl Slice {
    /// One-hot mask, classes x H x W.
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let n = self.labels.len();
        let mut out = vec![0.0; classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * n + i] = 1.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVolume {
    pub patient_id: usize,
    pub slices: Vec<Slice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_patients: 30,
            slices_per_patient: 6,
            size: 16,
            noise: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub train: Vec<SynthVolume>,
    pub val: Vec<SynthVolume>,
    pub test: Vec<SynthVolume>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SynthVolume] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn patient_ids(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|v| v.patient_id).collect()
    }
}

/// Deterministic dataset for `seed` with a patient-disjoint 60/20/20 split.
pub fn generate_dataset(seed: u64, config: &DataConfig) -> Result<Dataset> {
    if config.n_patients < 5 {
        return Err(Error::Config(format!(
            "need at least 5 patients for a 60/20/20 split, got {}",
            config.n_patients
        )));
    }
    if config.slices_per_patient == 0 || config.size < 8 {
        return Err(Error::Config(format!(
            "need >= 1 slice per patient and size >= 8, got {} and {}",
            config.slices_per_patient, config.size
        )));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", config.noise)));
    }
    let volumes: Vec<SynthVolume> = (0..config.n_patients)
        .into_par_iter()
        .map(|pid| generate_patient(seed, pid, config))
        .collect();

    let mut order: Vec<usize> = (0..config.n_patients).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let n = config.n_patients;
    let n_train = (n * 3 + 2) / 5;
    let n_val = ((n + 2) / 5).max(1);
    let take = |ids: &[usize]| -> Vec<SynthVolume> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| volumes[i].clone()).collect()
    };
    Ok(Dataset {
        size: config.size,
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

fn generate_patient(seed: u64, patient_id: usize, config: &DataConfig) -> SynthVolume {
    let mut rng = stream_rng(seed, Stream::Data, patient_id as u64);
    let gain = rng.gen_range(0.8..1.2);
    let slices = (0..config.slices_per_patient)
        .map(|_| generate_slice(&mut rng, config, gain))
        .collect();
    SynthVolume {
        patient_id,
        slices,
    }
}

fn generate_slice(rng: &mut impl Rng, config: &DataConfig, gain: f64) -> Slice {
    let s = config.size;
    let mut labels = vec![0u8; s * s];
    let scale = s as f64 / 16.0;

    for _ in 0..rng.gen_range(1..=3) {
        let h = ((rng.gen_range(3..=6) as f64) * scale).round() as usize;
        let w = ((rng.gen_range(3..=6) as f64) * scale).round() as usize;
        let r0 = rng.gen_range(0..=s - h);
        let c0 = rng.gen_range(0..=s - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                labels[r * s + c] = 1;
            }
        }
    }
    for _ in 0..rng.gen_range(1..=3) {
        let ry = rng.gen_range(1.5..3.5) * scale;
        let rx = rng.gen_range(1.5..3.5) * scale;
        let cy = rng.gen_range(ry..s as f64 - ry);
        let cx = rng.gen_range(rx..s as f64 - rx);
        for r in 0..s {
            for c in 0..s {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 && labels[r * s + c] == 0 {
                    labels[r * s + c] = 2;
                }
            }
        }
    }

    let noise = Normal::new(0.0, config.noise.max(1e-12)).expect("finite std");
    let image = labels
        .iter()
        .map(|&l| {
            let base = match l {
                1 => 1.0,
                2 => 0.5,
                _ => 0.0,
            };
            let n = if config.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            (gain * base + n) as f32 as f64
        })
        .collect();
    Slice { image, labels }
}

/// Flattened (patient index within the split, slice index) pairs.
pub fn slice_index(volumes: &[SynthVolume]) -> Vec<(usize, usize)> {
    volumes
        .iter()
        .enumerate()
        .flat_map(|(p, v)| (0..v.slices.len()).map(move |s| (p, s)))
        .collect()
}

/// Images of the given slices as a (b, 1, size, size) tensor.
pub fn batch_images(volumes: &[SynthVolume], refs: &[(usize, usize)], size: usize) -> Tensor {
    let n = size * size;
    let mut values = Vec::with_capacity(refs.len() * n);
    for &(p, s) in refs {
        values.extend_from_slice(&volumes[p].slices[s].image);
    }
    Tensor::new(vec![refs.len(), 1, size, size], values).expect("consistent slice sizes")
}

pub fn batch_labels(volumes: &[SynthVolume], refs: &[(usize, usize)]) -> Vec<u8> {
    refs.iter()
        .flat_map(|&(p, s)| volumes[p].slices[s].labels.iter().copied())
        .collect()
}
