//! Maximum-entropy label distribution model `softmax(Theta x + b)` fit by
//! limited-memory BFGS on the mean KL divergence.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{LabelDistribution, LdlSample};
use crate::error::{Error, Result};
use crate::model::checkpoint::SCHEMA_VERSION;
use crate::model::heads::softmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxEntModel {
    pub n_features: usize,
    pub n_labels: usize,
    /// `L x d`, row-major.
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
}

impl MaxEntModel {
    pub fn zeros(n_features: usize, n_labels: usize) -> Self {
        MaxEntModel {
            n_features,
            n_labels,
            theta: vec![0.0; n_labels * n_features],
            bias: vec![0.0; n_labels],
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.bias).copied().collect()
    }

    fn with_flat(&self, flat: &[f64]) -> Self {
        let split = self.theta.len();
        MaxEntModel {
            n_features: self.n_features,
            n_labels: self.n_labels,
            theta: flat[..split].to_vec(),
            bias: flat[split..].to_vec(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::shape("bfgsll_predict", &[x.len()], &[self.n_features]));
        }
        Ok(self
            .theta
            .chunks(self.n_features)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<LabelDistribution> {
        softmax(&self.logits(x)?)
    }

    pub fn predict_all(&self, samples: &[LdlSample]) -> Result<Vec<LabelDistribution>> {
        samples.iter().map(|s| self.predict(&s.features)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Weight of `||Theta||^2`; the bias is not penalized.
    pub l2_reg: f64,
    /// Stop once the gradient's Euclidean norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l2_reg: 1e-6,
            tol: 1e-6,
            max_iter: 500,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// Mean KL plus the ridge term, and its gradient with respect to the flat
/// `(Theta, b)` vector.
pub fn objective_and_gradient(samples: &[LdlSample], model: &MaxEntModel, l2_reg: f64) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bfgsll_fit on an empty dataset".into()));
    }
    let (d, l) = (model.n_features, model.n_labels);
    let n = samples.len() as f64;
    let mut grad = vec![0.0; l * d + l];
    let mut obj = 0.0;
    for s in samples {
        let z = model.logits(&s.features)?;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, (&t, &zj)) in s.target.values().iter().zip(&z).enumerate() {
            let logp = zj - lse;
            if t > 0.0 {
                obj += t * (t.ln() - logp);
            }
            let r = (logp.exp() - t) / n;
            for (g, x) in grad[j * d..(j + 1) * d].iter_mut().zip(&s.features) {
                *g += r * x;
            }
            grad[l * d + j] += r;
        }
    }
    obj /= n;
    for (g, w) in grad.iter_mut().zip(&model.theta) {
        obj += l2_reg * w * w;
        *g += 2.0 * l2_reg * w;
    }
    Ok((obj, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn bfgsll_fit(samples: &[LdlSample], cfg: &FitConfig) -> Result<(MaxEntModel, FitReport)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("bfgsll_fit on an empty dataset".into()))?;
    bfgsll_fit_from(samples, MaxEntModel::zeros(first.features.len(), first.target.len()), cfg)
}

/// L-BFGS from `init`: two-loop recursion over the last `memory` pairs and
/// a backtracking Armijo line search.
pub fn bfgsll_fit_from(samples: &[LdlSample], init: MaxEntModel, cfg: &FitConfig) -> Result<(MaxEntModel, FitReport)> {
    const C1: f64 = 1e-4;
    const MAX_HALVINGS: usize = 60;
    let eval = |x: &[f64]| objective_and_gradient(samples, &init.with_flat(x), cfg.l2_reg);

    let mut x = init.flat();
    let (mut f, mut g) = eval(&x)?;
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) < cfg.tol;

    while !converged && iterations < cfg.max_iter {
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = pairs.back().map_or(1.0 / norm(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = eval(&trial)?;
            if ft.is_finite() && ft <= f + C1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return Err(Error::LineSearch {
                iteration: iterations,
                objective: f,
                grad_norm: norm(&g),
                step,
            });
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            pairs.push_back((s, y, 1.0 / sy));
            if pairs.len() > cfg.memory {
                pairs.pop_front();
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
        converged = norm(&g) < cfg.tol;
    }
    let report = FitReport {
        iterations,
        converged,
        objective: f,
        grad_norm: norm(&g),
        history,
    };
    Ok((init.with_flat(&x), report))
}

/// Serialized baseline, sharing the checkpoint envelope of the main model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub model: MaxEntModel,
}

impl BaselineCheckpoint {
    pub const KIND: &'static str = "bfgsll-model";

    pub fn new(model: MaxEntModel) -> Self {
        BaselineCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            model,
        }
    }
}
