//! Manifests, recording-level splits and in-memory feature sets.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{self, LogMel};
use crate::sft;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// WAV recording or SFT1 feature file.
    pub path: PathBuf,
    pub label: usize,
    pub recording_id: String,
}

/// Rows of `path,label,recording_id`. Relative paths are resolved against
/// the manifest's directory when read from disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.recording_id.trim().is_empty() {
                return Err(Error::Manifest(format!("row {}: empty recording_id", i + 1)));
            }
            if !seen.insert(&r.path) {
                return Err(Error::Manifest(format!(
                    "row {}: duplicate path {}",
                    i + 1,
                    r.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        match self.rows.iter().find(|r| r.label >= n_classes) {
            Some(r) => Err(Error::Manifest(format!(
                "{}: label {} out of range for {n_classes} classes",
                r.path.display(),
                r.label
            ))),
            None => Ok(()),
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "recording_id"] {
            return Err(Error::Manifest(format!(
                "{}: header must be `path,label,recording_id`, got `{}`",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize() {
            let mut row: ManifestRow = rec.map_err(|e| {
                Error::Manifest(format!("{}: {e}", path.display()))
            })?;
            if row.path.is_relative() {
                row.path = base.join(&row.path);
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Sorted distinct recording ids.
    pub fn recordings(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.recording_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn subset(&self, ids: &HashSet<&String>) -> Manifest {
        Manifest {
            rows: self
                .rows
                .iter()
                .filter(|r| ids.contains(&r.recording_id))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Assigns whole recordings to train/val/test at 7:1:2. Counts are
/// `round(0.7 n)` and `round(0.1 n)`, the rest go to test.
pub fn split_recordings(manifest: &Manifest, seed: u64) -> Result<Split> {
    if manifest.is_empty() {
        return Err(Error::Manifest("cannot split an empty manifest".into()));
    }
    let mut ids = manifest.recordings();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = ((0.7 * n as f64).round() as usize).min(n);
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let part = |s: &[String]| manifest.subset(&s.iter().collect());
    Ok(Split {
        train: part(&ids[..n_train]),
        val: part(&ids[n_train..n_train + n_val]),
        test: part(&ids[n_train + n_val..]),
    })
}

/// One labelled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub label: usize,
    pub recording_id: String,
}

/// Features held in memory, one entry per clip.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Loads every manifest row. SFT1 files hold one clip (`1×F×T`) or a
    /// stack of clips (`N×1×F×T`); WAV files are segmented and featurized
    /// on the fly.
    pub fn load(manifest: &Manifest, extractor: &LogMel) -> Result<Self> {
        let mut samples = Vec::new();
        for row in &manifest.rows {
            let ext = row
                .path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            let clips = match ext.as_deref() {
                Some("wav") => frontend::wav_features(&row.path, extractor)?,
                Some("sft") | Some("sft1") => unstack(sft::read(&row.path)?)?,
                _ => {
                    return Err(Error::Manifest(format!(
                        "{}: expected a .wav or .sft file",
                        row.path.display()
                    )))
                }
            };
            samples.extend(clips.into_iter().map(|features| Sample {
                features,
                label: row.label,
                recording_id: row.recording_id.clone(),
            }));
        }
        Ok(Self { samples })
    }

    /// `[N, C, H, W]` batch of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].features).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&items)?, labels))
    }
}

fn unstack(t: Tensor) -> Result<Vec<Tensor>> {
    match t.rank() {
        3 => Ok(vec![t]),
        4 => (0..t.shape()[0]).map(|i| t.batch_item(i)).collect(),
        _ => Err(Error::Format(format!(
            "feature tensor must be C×F×T or N×C×F×T, got {:?}",
            t.shape()
        ))),
    }
}
