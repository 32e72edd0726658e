//! Dataset cache: one little-endian f32 blob per patient plus a JSON index.
//! Each slice is stored as `size * size` image values followed by
//! `size * size` label values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_versioned, write_json, SCHEMA_VERSION};
use crate::backbone::{DataConfig, Dataset, Slice, SynthVolume, CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub patient_id: usize,
    pub slices: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub size: usize,
    pub train: Vec<PatientEntry>,
    pub val: Vec<PatientEntry>,
    pub test: Vec<PatientEntry>,
}

fn blob_name(patient_id: usize) -> String {
    format!("patient_{patient_id:04}.f32")
}

fn encode(volume: &SynthVolume) -> Vec<u8> {
    let mut bytes = Vec::new();
    for s in &volume.slices {
        for &v in &s.image {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &s.labels {
            bytes.extend_from_slice(&(l as f32).to_le_bytes());
        }
    }
    bytes
}

fn decode(bytes: &[u8], entry: &PatientEntry, size: usize, file: &Path) -> Result<SynthVolume> {
    let plane = size * size;
    let expected = entry.slices * plane * 2 * 4;
    let schema = |message: String| Error::Schema {
        file: file.display().to_string(),
        message,
    };
    if bytes.len() != expected {
        return Err(schema(format!("{} bytes, expected {expected}", bytes.len())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut slices = Vec::with_capacity(entry.slices);
    for chunk in values.chunks_exact(2 * plane) {
        let image = chunk[..plane].iter().map(|&v| v as f64).collect();
        let labels = chunk[plane..]
            .iter()
            .map(|&v| {
                if v >= 0.0 && v < CLASSES as f32 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(schema(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        slices.push(Slice { image, labels });
    }
    Ok(SynthVolume {
        patient_id: entry.patient_id,
        slices,
    })
}

pub fn save_dataset(dir: &Path, data: &Dataset, seed: u64, config: &DataConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = |vols: &[SynthVolume]| -> Result<Vec<PatientEntry>> {
        vols.iter()
            .map(|v| {
                let file = blob_name(v.patient_id);
                let path = dir.join(&file);
                fs::write(&path, encode(v)).map_err(|e| Error::io(&path, e))?;
                Ok(PatientEntry {
                    patient_id: v.patient_id,
                    slices: v.slices.len(),
                    file,
                })
            })
            .collect()
    };
    let index = DatasetIndex {
        schema_version: SCHEMA_VERSION,
        seed,
        config: *config,
        size: data.size,
        train: entries(&data.train)?,
        val: entries(&data.val)?,
        test: entries(&data.test)?,
    };
    write_json(&dir.join("index.json"), &index)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetIndex)> {
    let index: DatasetIndex = read_versioned(&dir.join("index.json"), SCHEMA_VERSION)?;
    let load = |entries: &[PatientEntry]| -> Result<Vec<SynthVolume>> {
        entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| match err.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingArtifact {
                        path: path.clone(),
                        reason: "dataset blob listed in index.json is missing".into(),
                    },
                    _ => Error::io(&path, err),
                })?;
                decode(&bytes, e, index.size, &path)
            })
            .collect()
    };
    let data = Dataset {
        size: index.size,
        train: load(&index.train)?,
        val: load(&index.val)?,
        test: load(&index.test)?,
    };
    Ok((data, index))
}
