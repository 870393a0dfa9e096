use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{train, EpochRecord, TrainConfig};
use crate::baseline::{bfgsll_fit, FitConfig};
use crate::data::{kfold_split, LabelDistribution, LdlDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_all, MetricTuple, MetricsReport};
use crate::model::{IdrModel, ModelConfig};
use crate::objectives::LossWeights;
use crate::rng::{substream, AUGMENT, INIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Idr,
    Bfgsll,
    Uniform,
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "idr" => Ok(Algo::Idr),
            "bfgsll" => Ok(Algo::Bfgsll),
            "uniform" => Ok(Algo::Uniform),
            other => Err(format!("unknown algo `{other}` (expected idr, bfgsll or uniform)")),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::Idr => "idr",
            Algo::Bfgsll => "bfgsll",
            Algo::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 5,
            repeats: 10,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub split: Split,
    pub metrics: Vec<MetricTuple>,
    pub history: Vec<EpochRecord>,
    pub soup_val_kl: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub splits: Vec<SplitResult>,
}

/// Per-split seed for model init and the training streams.
fn split_seed(seed: u64, name: &str, index: usize) -> u64 {
    substream(seed, name, index as u64).random()
}

#[allow(clippy::too_many_arguments)]
fn run_split(
    ds: &LdlDataset,
    split: &Split,
    index: usize,
    algo: Algo,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<SplitResult> {
    let test = ds.select(&split.test);
    let targets: Vec<LabelDistribution> = test.iter().map(|s| s.target.clone()).collect();
    let mut history = Vec::new();
    let mut soup_val_kl = None;
    let preds = match algo {
        Algo::Uniform => vec![LabelDistribution::uniform(ds.n_labels()); test.len()],
        Algo::Bfgsll => {
            let mut idx = split.train.clone();
            idx.extend(&split.validation);
            idx.sort_unstable();
            let (model, _) = bfgsll_fit(&ds.select(&idx), fit_cfg)?;
            model.predict_all(&test)?
        }
        Algo::Idr => {
            let model = IdrModel::init(model_cfg.clone(), split_seed(seed, INIT, index))?;
            let cfg = TrainConfig {
                seed: split_seed(seed, AUGMENT, index),
                ..train_cfg.clone()
            };
            let out = train(model, &ds.select(&split.train), &ds.select(&split.validation), &cfg, weights)?;
            history = out.history;
            soup_val_kl = out.soup.as_ref().map(|s| (s.val_kl, s.best_single));
            out.model.predict(&test)?
        }
    };
    Ok(SplitResult {
        split: split.clone(),
        metrics: evaluate_all(&targets, &preds)?,
        history,
        soup_val_kl,
    })
}

/// Repeated k-fold evaluation of one algorithm. Splits run on a pool of
/// `cv.jobs` threads; results are gathered in split order, so the report
/// does not depend on the thread count.
pub fn cross_validate(
    ds: &LdlDataset,
    algo: Algo,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    fit_cfg: &FitConfig,
    cv: &CvConfig,
) -> Result<CvOutcome> {
    if algo == Algo::Idr && (model_cfg.d_in != ds.n_features() || model_cfg.labels != ds.n_labels()) {
        return Err(Error::Schema(format!(
            "model expects d={} L={}, dataset has d={} L={}",
            model_cfg.d_in,
            model_cfg.labels,
            ds.n_features(),
            ds.n_labels()
        )));
    }
    let splits = kfold_split(ds.len(), cv.k, cv.repeats, cv.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cv.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<SplitResult>> = pool.install(|| {
        use rayon::prelude::*;
        splits
            .par_iter()
            .enumerate()
            .map(|(i, s)| run_split(ds, s, i, algo, model_cfg, train_cfg, weights, fit_cfg, cv.seed))
            .collect()
    });
    let splits = results.into_iter().collect::<Result<Vec<_>>>()?;
    let folds: Vec<Vec<MetricTuple>> = splits.iter().map(|s| s.metrics.clone()).collect();
    let report = aggregate(&folds, &algo.to_string(), ds.name())?;
    Ok(CvOutcome { report, splits })
}
