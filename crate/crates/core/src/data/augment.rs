//! Masked mixup of sample pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{LabelDistribution, LdlSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Concentration of the symmetric Beta distribution for the mixing weight.
    pub alpha: f64,
    /// Probability that a feature survives the mask.
    pub keep_prob: f64,
    pub enabled: bool,
    /// Use this mixing weight instead of sampling one.
    pub fixed_lambda: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha: 0.2,
            keep_prob: 0.8,
            enabled: false,
            fixed_lambda: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("alpha {} must be positive", self.alpha)));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidArgument(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Bernoulli(keep_prob) mask of length `d`.
pub fn sample_mask<R: Rng + ?Sized>(d: usize, keep_prob: f64, rng: &mut R) -> Vec<bool> {
    (0..d).map(|_| rng.random::<f64>() < keep_prob).collect()
}

/// `x = (lambda * x_a + (1 - lambda) * x_b) * mask` and
/// `y = normalizer(lambda * y_a + (1 - lambda) * y_b)`; the same mask hits
/// both parents.
pub fn mixup_mask<N>(a: &LdlSample, b: &LdlSample, lambda: f64, mask: &[bool], normalizer: N) -> Result<LdlSample>
where
    N: Fn(&[f64]) -> Result<LabelDistribution>,
{
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing weight {lambda} outside [0, 1]")));
    }
    if mask.len() != a.features.len() || b.features.len() != a.features.len() {
        return Err(Error::shape("mixup_mask", &[a.features.len(), b.features.len()], &[mask.len()]));
    }
    if a.target.len() != b.target.len() {
        return Err(Error::shape("mixup_mask", &[a.target.len()], &[b.target.len()]));
    }
    let features = a
        .features
        .iter()
        .zip(&b.features)
        .zip(mask)
        .map(|((xa, xb), &m)| {
            if m {
                lambda * xa + (1.0 - lambda) * xb
            } else {
                0.0
            }
        })
        .collect();
    let mixed: Vec<f64> = a
        .target
        .values()
        .iter()
        .zip(b.target.values())
        .map(|(ya, yb)| lambda * ya + (1.0 - lambda) * yb)
        .collect();
    Ok(LdlSample {
        features,
        target: normalizer(&mixed)?,
    })
}

/// Mixes every sample with a partner from a random permutation of the batch.
pub fn sample_augmentation<R, N>(batch: &[LdlSample], cfg: &AugmentConfig, rng: &mut R, normalizer: N) -> Result<Vec<LdlSample>>
where
    R: Rng + ?Sized,
    N: Fn(&[f64]) -> Result<LabelDistribution>,
{
    if !cfg.enabled {
        return Ok(batch.to_vec());
    }
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("mixup needs a batch of at least 2 samples".into()));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    partners.shuffle(rng);
    let d = batch[0].features.len();
    batch
        .iter()
        .zip(&partners)
        .map(|(a, &j)| {
            let lambda = cfg.fixed_lambda.unwrap_or_else(|| beta.sample(rng));
            let mask = sample_mask(d, cfg.keep_prob, rng);
            mixup_mask(a, &batch[j], lambda, &mask, &normalizer)
        })
        .collect()
}
