//! The six label distribution measures and their cross-validation summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::model::checkpoint::{write_json, SCHEMA_VERSION};
use crate::objectives::{kl_loss, KL_EPS};

pub const METRIC_NAMES: [&str; 6] = ["chebyshev", "clark", "canberra", "kl", "cosine", "intersection"];

/// Distances (lower is better) followed by similarities (higher is better).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTuple {
    pub chebyshev: f64,
    pub clark: f64,
    pub canberra: f64,
    pub kl: f64,
    pub cosine: f64,
    pub intersection: f64,
}

impl MetricTuple {
    pub const IDEAL: MetricTuple = MetricTuple {
        chebyshev: 0.0,
        clark: 0.0,
        canberra: 0.0,
        kl: 0.0,
        cosine: 1.0,
        intersection: 1.0,
    };

    pub fn to_array(self) -> [f64; 6] {
        [self.chebyshev, self.clark, self.canberra, self.kl, self.cosine, self.intersection]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        MetricTuple {
            chebyshev: a[0],
            clark: a[1],
            canberra: a[2],
            kl: a[3],
            cosine: a[4],
            intersection: a[5],
        }
    }

    /// True iff `self` is strictly better than `other` on each measure.
    pub fn strictly_better_than(&self, other: &MetricTuple) -> [bool; 6] {
        let a = self.to_array();
        let b = other.to_array();
        std::array::from_fn(|i| if i < 4 { a[i] < b[i] } else { a[i] > b[i] })
    }

    pub fn mean(tuples: &[MetricTuple]) -> Result<MetricTuple> {
        if tuples.is_empty() {
            return Err(Error::InvalidArgument("mean of zero metric tuples".into()));
        }
        let mut acc = [0.0; 6];
        for t in tuples {
            for (a, v) in acc.iter_mut().zip(t.to_array()) {
                *a += v;
            }
        }
        Ok(MetricTuple::from_array(acc.map(|a| a / tuples.len() as f64)))
    }
}

fn is_simplex(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= LabelDistribution::TOLERANCE
}

/// All six measures for one pair. Clark and Canberra terms with
/// `d_j + p_j = 0` contribute 0.
pub fn evaluate(d: &[f64], p: &[f64]) -> Result<MetricTuple> {
    if d.len() != p.len() {
        return Err(Error::shape("evaluate", &[d.len()], &[p.len()]));
    }
    if !is_simplex(d) || !is_simplex(p) {
        return Err(Error::InvalidArgument("metrics need two simplex vectors".into()));
    }
    let mut chebyshev: f64 = 0.0;
    let mut clark2 = 0.0;
    let mut canberra = 0.0;
    let (mut dot, mut nd, mut np) = (0.0, 0.0, 0.0);
    let mut intersection = 0.0;
    for (&a, &b) in d.iter().zip(p) {
        let diff = (a - b).abs();
        chebyshev = chebyshev.max(diff);
        let s = a + b;
        if s > 0.0 {
            clark2 += (diff / s).powi(2);
            canberra += diff / s;
        }
        dot += a * b;
        nd += a * a;
        np += b * b;
        intersection += a.min(b);
    }
    Ok(MetricTuple {
        chebyshev,
        clark: clark2.sqrt(),
        canberra,
        kl: kl_loss(d, p, KL_EPS)?,
        cosine: dot / (nd.sqrt() * np.sqrt()),
        intersection,
    })
}

pub fn evaluate_all(targets: &[LabelDistribution], preds: &[LabelDistribution]) -> Result<Vec<MetricTuple>> {
    if targets.len() != preds.len() {
        return Err(Error::shape("evaluate_all", &[targets.len()], &[preds.len()]));
    }
    targets.iter().zip(preds).map(|(d, p)| evaluate(d.values(), p.values())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("mean/std of nothing".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(MeanStd { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub kind: String,
    pub algo: String,
    pub dataset: String,
    pub chebyshev: MeanStd,
    pub clark: MeanStd,
    pub canberra: MeanStd,
    pub kl: MeanStd,
    pub cosine: MeanStd,
    pub intersection: MeanStd,
    pub folds: usize,
    pub samples: usize,
    pub fold_means: Vec<MetricTuple>,
}

impl MetricsReport {
    pub const KIND: &'static str = "metrics-report";

    pub fn means(&self) -> MetricTuple {
        MetricTuple::from_array(self.columns().map(|c| c.mean))
    }

    pub fn columns(&self) -> [MeanStd; 6] {
        [self.chebyshev, self.clark, self.canberra, self.kl, self.cosine, self.intersection]
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["algo".to_string(), "dataset".into(), "folds".into(), "samples".into()];
        for m in METRIC_NAMES {
            cols.push(format!("{m}_mean"));
            cols.push(format!("{m}_std"));
        }
        cols.join(",")
    }

    /// Flat row matching [`MetricsReport::csv_header`].
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.algo.clone(), self.dataset.clone(), self.folds.to_string(), self.samples.to_string()];
        for c in self.columns() {
            cols.push(c.mean.to_string());
            cols.push(c.std.to_string());
        }
        cols.join(",")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n{}\n", Self::csv_header(), self.csv_row()))?;
        Ok(())
    }
}

/// Means per fold, then mean and sample standard deviation across folds.
pub fn aggregate(folds: &[Vec<MetricTuple>], algo: &str, dataset: &str) -> Result<MetricsReport> {
    if folds.is_empty() || folds.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("aggregate needs non-empty folds".into()));
    }
    let fold_means = folds.iter().map(|f| MetricTuple::mean(f)).collect::<Result<Vec<_>>>()?;
    let col = |i: usize| MeanStd::of(&fold_means.iter().map(|t| t.to_array()[i]).collect::<Vec<_>>());
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        kind: MetricsReport::KIND.into(),
        algo: algo.into(),
        dataset: dataset.into(),
        chebyshev: col(0)?,
        clark: col(1)?,
        canberra: col(2)?,
        kl: col(3)?,
        cosine: col(4)?,
        intersection: col(5)?,
        folds: folds.len(),
        samples: folds.iter().map(Vec::len).sum(),
        fold_means,
    })
}
