use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LdlDataset, LdlSample};
use crate::error::{Error, Result};
use crate::model::heads::softmax;
use crate::rng::{substream, DATA};

/// Hidden linear map behind a synthetic dataset: `target = softmax(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `L x d`, row-major.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl GroundTruth {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: LdlDataset,
    pub ground_truth: GroundTruth,
}

/// Standard-normal features with softmax-linear targets. `W` and `b` are
/// standard normal as well, all drawn from the seed's data stream.
pub fn synthesize(n: usize, d: usize, labels: usize, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 || d == 0 || labels < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthesize needs n >= 1, d >= 1, L >= 2 (got {n}, {d}, {labels})"
        )));
    }
    let mut rng = substream(seed, DATA, 0);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let weight: Vec<Vec<f64>> = (0..labels).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let bias: Vec<f64> = (0..labels).map(|_| normal()).collect();
    let truth = GroundTruth { weight, bias };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let features: Vec<f64> = (0..d).map(|_| normal()).collect();
        let target = softmax(&truth.logits(&features))?;
        samples.push(LdlSample { features, target });
    }
    Ok(SyntheticDataset {
        dataset: LdlDataset::new(format!("synth-{n}x{d}x{labels}-s{seed}"), samples)?,
        ground_truth: truth,
    })
}
