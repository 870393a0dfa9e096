//! Label distribution datasets: types, CSV ingestion, synthetic generation,
//! cross-validation splits and masked-mixup augmentation.

mod augment;
mod csv_io;
mod split;
mod synth;

pub use augment::{mixup_mask, sample_augmentation, sample_mask, AugmentConfig};
pub use csv_io::{load_csv, load_with_sidecar, write_csv, DatasetSidecar};
pub use split::{holdout_split, kfold_split, Split};
pub use synth::{synthesize, GroundTruth, SyntheticDataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability vector over the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Maximum deviation of the sum from 1 accepted at validation.
    pub const TOLERANCE: f64 = 1e-6;

    /// Validates non-negativity and the unit sum, then renormalizes when the
    /// sum is off by more than 1e-12.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty label distribution".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("label value {v} is not a non-negative real")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidArgument(format!("label values sum to {sum}, not 1")));
        }
        Ok(Self::from_normalized(values))
    }

    pub(crate) fn from_normalized(mut values: Vec<f64>) -> Self {
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            for v in values.iter_mut() {
                *v /= sum;
            }
        }
        LabelDistribution(values)
    }

    pub fn uniform(labels: usize) -> Self {
        LabelDistribution(vec![1.0 / labels as f64; labels])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdlSample {
    pub features: Vec<f64>,
    pub target: LabelDistribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdlDataset {
    name: String,
    samples: Vec<LdlSample>,
    n_features: usize,
    n_labels: usize,
}

impl LdlDataset {
    pub fn new(name: impl Into<String>, samples: Vec<LdlSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no samples".into()))?;
        let (d, l) = (first.features.len(), first.target.len());
        if l < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 labels, got {l}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d || s.target.len() != l {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} features and {} labels, expected {d} and {l}",
                    s.features.len(),
                    s.target.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i} has non-finite features")));
            }
        }
        Ok(LdlDataset {
            name: name.into(),
            samples,
            n_features: d,
            n_labels: l,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn samples(&self) -> &[LdlSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Vec<LdlSample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Stacks sample features into an `(N, d)` tensor.
pub fn features_tensor(samples: &[LdlSample]) -> Tensor {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    Tensor::from_rows(&rows).expect("samples share a feature count")
}

/// Stacks sample targets into an `(N, L)` tensor.
pub fn targets_tensor(samples: &[LdlSample]) -> Tensor {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.target.values()).collect();
    Tensor::from_rows(&rows).expect("samples share a label count")
}
