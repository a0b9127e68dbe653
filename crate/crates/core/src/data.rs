//! Datasets: synthetic Gaussian class clusters and CSV load/save.
//!
//! Features live in `[0,1]` (required by rate encoding and enforced on
//! load), labels in `[0, C)`. CSV rows are `feature,...,feature,label`
//! with no header; floats are written with 17 significant digits so a
//! write/read round trip is value-identical.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_file, write_atomic};
use crate::rng::{substream_rng, Stream};
use crate::tensor::Tensor;

/// Which side of the train/test divide a dataset belongs to. Training
/// entry points refuse test-tagged data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A labeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    /// Validates shapes, label range, feature range, and finiteness.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::invalid(format!(
                "features must be rank 2, got shape {:?}",
                features.shape()
            )));
        }
        let n = features.shape()[0];
        let d = features.shape()[1];
        if n == 0 || d == 0 {
            return Err(Error::invalid("dataset must have at least one sample and one feature"));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("dataset needs at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        for &v in features.data() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("feature value {v} outside [0, 1]")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

fn default_samples_per_class() -> usize {
    40
}
fn default_spread() -> f64 {
    0.35
}

/// Synthetic cluster generator settings. `samples_per_class` applies to
/// each split independently: the train and test splits each receive that
/// many samples per class, from disjoint random draws.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dimension: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic data needs classes >= 2"));
        }
        if self.dimension == 0 {
            return Err(Error::invalid("synthetic data needs dimension >= 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic data needs samples_per_class >= 1"));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::invalid(format!(
                "spread {} must be finite and > 0",
                self.spread
            )));
        }
        Ok(())
    }
}

/// Draws class centroids in `[0.1, 0.9]^D`, then per-split Gaussian
/// samples around them clipped to `[0,1]`. Deterministic in `seed`; the
/// two splits use disjoint substreams, and centroids a third, so each is
/// stable in isolation.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut centroid_rng = substream_rng(seed, Stream::Data, 0);
    let mut centroids = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let c: Vec<f64> = (0..spec.dimension)
            .map(|_| centroid_rng.random_range(0.1..0.9))
            .collect();
        centroids.push(c);
    }
    let train = sample_split(spec, &centroids, substream_rng(seed, Stream::Data, 1), Split::Train)?;
    let test = sample_split(spec, &centroids, substream_rng(seed, Stream::Data, 2), Split::Test)?;
    Ok((train, test))
}

fn sample_split(
    spec: &SyntheticSpec,
    centroids: &[Vec<f64>],
    mut rng: impl Rng,
    split: Split,
) -> Result<Dataset> {
    let normal = Normal::new(0.0, spec.spread).map_err(|e| Error::invalid(e.to_string()))?;
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dimension);
    let mut labels = Vec::with_capacity(n);
    for (k, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &c in centroid {
                let v: f64 = c + normal.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, spec.dimension], data)?,
        labels,
        spec.classes,
        split,
    )
}

/// Parses a headerless CSV of `feature,...,feature,label` rows. Class
/// count is the maximum label plus one. Errors carry 1-based row numbers.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let text = read_file(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(Error::Csv {
                row,
                message: "need at least one feature column and a label column".into(),
            });
        }
        if width == 0 {
            width = cells.len();
        } else if cells.len() != width {
            return Err(Error::Csv {
                row,
                message: format!("ragged row: {} cells, expected {width}", cells.len()),
            });
        }
        let mut features = Vec::with_capacity(width - 1);
        for (col, cell) in cells[..width - 1].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                row,
                message: format!("non-numeric feature {cell:?} in column {col}"),
            })?;
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Csv {
                    row,
                    message: format!("feature value {v} outside [0, 1] in column {col}"),
                });
            }
            features.push(v);
        }
        let label: usize = cells[width - 1].parse().map_err(|_| Error::Csv {
            row,
            message: format!("label {:?} is not a nonnegative integer", cells[width - 1]),
        })?;
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            row: 0,
            message: format!("{} contains no data rows", path.display()),
        });
    }
    let classes = labels.iter().copied().max().unwrap() + 1;
    let n = rows.len();
    let d = width - 1;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes.max(2), split)
}

/// Renders a dataset in the `load_csv` format with 17-significant-digit
/// floats.
pub fn render_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..dataset.len() {
        for v in dataset.feature_row(i) {
            out.push_str(&fmt_f64(*v));
            out.push(',');
        }
        out.push_str(&dataset.label(i).to_string());
        out.push('\n');
    }
    out
}

/// Writes [`render_csv`] output atomically.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &render_csv(dataset))
}
