//! Training losses: L1, KL, the Gaussian prior on the distribution matrix
//! and the perceptual loss used when the label count is large.
//!
//! Scalar versions take one sample; graph versions take `(N, L)` batches and
//! return the batch mean of the per-sample quantity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::extractor::kaiming;
use crate::rng::{substream, INIT};
use crate::tensor::Tensor;

/// Clamp applied to predictions before every logarithm.
pub const KL_EPS: f64 = 1e-12;

/// How the distribution matrix is tied to the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixPrior {
    /// Match each row's mean to the label value and its population variance
    /// to `sigma2`.
    #[default]
    Moments,
    /// L2 distance to a matrix sampled from `N(d_i, sigma2)` per row.
    Sampled,
}

impl std::str::FromStr for MatrixPrior {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "moments" => Ok(MatrixPrior::Moments),
            "sampled" => Ok(MatrixPrior::Sampled),
            other => Err(format!("unknown matrix prior `{other}` (expected moments or sampled)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight for small label sets.
    pub lambda: f64,
    /// Matrix prior weight for small label sets.
    pub beta: f64,
    /// KL weight for large label sets.
    pub lambda1: f64,
    /// Perceptual weight for large label sets.
    pub lambda2: f64,
    /// Matrix prior weight for large label sets.
    pub beta_large: f64,
    /// Label counts above this use the perceptual variant.
    pub label_threshold: usize,
    pub sigma2: f64,
    pub prior: MatrixPrior,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.01,
            beta: 0.1,
            lambda1: 0.01,
            lambda2: 0.01,
            beta_large: 0.08,
            label_threshold: 20,
            sigma2: 0.5,
            prior: MatrixPrior::Moments,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.beta, self.lambda1, self.lambda2, self.beta_large, self.sigma2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn uses_perceptual(&self, labels: usize) -> bool {
        labels > self.label_threshold
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `sum_j |pred_j - target_j|`.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("l1_loss", pred, target)?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum())
}

/// `sum_j d_j ln(d_j / max(pred_j, eps))` with `0 ln 0 = 0`.
pub fn kl_loss(target: &[f64], pred: &[f64], eps: f64) -> Result<f64> {
    check_len("kl_loss", target, pred)?;
    Ok(target
        .iter()
        .zip(pred)
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, p)| d * (d / p.max(eps)).ln())
        .sum())
}

/// `sum_i (mean(M_i) - d_i)^2 + (var(M_i) - sigma2)^2` over the rows of an
/// `(L, P)` matrix, with population variance.
pub fn gaussian_matrix_reg(m: &Tensor, target: &[f64], sigma2: f64) -> Result<f64> {
    if m.rank() != 2 || m.shape()[0] != target.len() {
        return Err(Error::shape("gaussian_matrix_reg", m.shape(), &[target.len()]));
    }
    let p = m.shape()[1] as f64;
    Ok((0..target.len())
        .map(|i| {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / p;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
            (mean - target[i]).powi(2) + (var - sigma2).powi(2)
        })
        .sum())
}

/// Frozen three-layer MLP of width `L` on distribution vectors, ReLU between
/// layers, Kaiming weights and zero biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualNet {
    pub weights: Vec<Tensor>,
}

impl PerceptualNet {
    pub fn new(labels: usize, seed: u64) -> Self {
        let mut rng = substream(seed, INIT, 100);
        PerceptualNet {
            weights: (0..3).map(|_| kaiming(labels, labels, &mut rng)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.weights[0].shape()[0]
    }

    /// Outputs of the three layers for one vector.
    pub fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (k, w) in self.weights.iter().enumerate() {
            let input = outs.last().map_or(x, |v| v.as_slice());
            let n = w.shape()[1];
            let mut z = vec![0.0; n];
            for (i, xi) in input.iter().enumerate() {
                for (zj, wij) in z.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
                    *zj += xi * wij;
                }
            }
            if k + 1 < self.weights.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            outs.push(z);
        }
        outs
    }

    fn activations_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(3);
        let mut h = x;
        for (k, w) in self.weights.iter().enumerate() {
            let wv = g.constant(w.clone());
            let z = g.matmul(h, wv)?;
            h = if k + 1 < self.weights.len() { g.relu(z) } else { z };
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Sum over the three layers of the mean squared activation difference.
pub fn perceptual_loss(pred: &[f64], target: &[f64], net: &PerceptualNet) -> Result<f64> {
    check_len("perceptual_loss", pred, target)?;
    if pred.len() != net.width() {
        return Err(Error::shape("perceptual_loss", &[pred.len()], &[net.width()]));
    }
    let a = net.activations(pred);
    let b = net.activations(target);
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / x.len() as f64)
        .sum())
}

fn batch_mean(g: &mut Graph, per_element: Var) -> Var {
    let n = g.shape(per_element)[0] as f64;
    let s = g.sum_all(per_element);
    g.scale(s, 1.0 / n)
}

pub fn l1_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let a = g.abs(diff);
    Ok(batch_mean(g, a))
}

/// Batch-mean KL; `target` is a constant and its entropy part is folded in
/// as a number.
pub fn kl_graph(g: &mut Graph, target: &Tensor, pred: Var) -> Result<Var> {
    let neg_entropy: f64 = target.data().iter().filter(|d| **d > 0.0).map(|d| d * d.ln()).sum();
    let clamped = g.clamp_min(pred, KL_EPS);
    let logp = g.log(clamped)?;
    let t = g.constant(target.clone());
    let cross = g.mul(t, logp)?;
    let cross = g.sum_all(cross);
    let n = target.shape()[0] as f64;
    let neg_cross = g.neg(cross);
    let kl = g.add_scalar(neg_cross, neg_entropy);
    Ok(g.scale(kl, 1.0 / n))
}

/// Batch-mean moment-matching prior on `(N, L, P)` matrices.
pub fn gaussian_reg_graph(g: &mut Graph, m: Var, target: Var, sigma2: f64) -> Result<Var> {
    let mean = g.mean_axis(m, 2, false)?;
    let dm = g.sub(mean, target)?;
    let mean_term = g.square(dm);
    let mean_k = g.mean_axis(m, 2, true)?;
    let centered = g.sub(m, mean_k)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 2, false)?;
    let dv = g.add_scalar(var, -sigma2);
    let var_term = g.square(dv);
    let total = g.add(mean_term, var_term)?;
    Ok(batch_mean(g, total))
}

/// Batch-mean L2 distance to a matrix whose row `i` is drawn from
/// `N(d_i, sigma2)`, divided by the row length.
pub fn sampled_reg_graph(g: &mut Graph, m: Var, target: &Tensor, sigma2: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    let (n, l, p) = (shape[0], shape[1], shape[2]);
    if target.shape() != [n, l] {
        return Err(Error::shape("sampled_reg", &shape, target.shape()));
    }
    let noise = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(n * l * p);
    for &d in target.data() {
        data.extend((0..p).map(|_| d + noise.sample(rng)));
    }
    let prior = g.constant(Tensor::new(shape, data)?);
    let diff = g.sub(m, prior)?;
    let sq = g.square(diff);
    let per = g.mean_axis(sq, 2, false)?;
    Ok(batch_mean(g, per))
}

pub fn perceptual_graph(g: &mut Graph, net: &PerceptualNet, pred: Var, target: Var) -> Result<Var> {
    let labels = g.shape(pred)[1];
    if labels != net.width() {
        return Err(Error::shape("perceptual_loss", g.shape(pred), &[net.width()]));
    }
    let a = net.activations_graph(g, pred)?;
    let b = net.activations_graph(g, target)?;
    let mut total: Option<Var> = None;
    for (x, y) in a.into_iter().zip(b) {
        let d = g.sub(x, y)?;
        let sq = g.square(d);
        let mse = g.mean_all(sq);
        total = Some(match total {
            Some(t) => g.add(t, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("three layers"))
}

/// Individual terms of one composite evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub kl: Var,
    pub matrix: Var,
    pub perceptual: Option<Var>,
}

/// `l1 + lambda kl + beta reg` for `L <= threshold`, otherwise
/// `l1 + lambda1 kl + lambda2 perceptual + beta_large reg`. Every term is a
/// batch mean. The sampled prior needs `rng`.
pub fn composite_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    matrix: Var,
    weights: &LossWeights,
    perceptual: Option<&PerceptualNet>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape("composite_loss", g.shape(pred), target.shape()));
    }
    let labels = target.shape()[1];
    let t = g.constant(target.clone());
    let l1 = l1_graph(g, pred, t)?;
    let kl = kl_graph(g, target, pred)?;
    let matrix_term = match weights.prior {
        MatrixPrior::Moments => gaussian_reg_graph(g, matrix, t, weights.sigma2)?,
        MatrixPrior::Sampled => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument("sampled matrix prior needs an RNG".into()))?;
            sampled_reg_graph(g, matrix, target, weights.sigma2, rng)?
        }
    };
    let (kl_w, beta, perc) = if weights.uses_perceptual(labels) {
        let net = perceptual.ok_or_else(|| {
            Error::InvalidArgument(format!("{labels} labels exceed the threshold but no perceptual net was given"))
        })?;
        let p = perceptual_graph(g, net, pred, t)?;
        (weights.lambda1, weights.beta_large, Some((weights.lambda2, p)))
    } else {
        (weights.lambda, weights.beta, None)
    };
    let wkl = g.scale(kl, kl_w);
    let wreg = g.scale(matrix_term, beta);
    let mut total = g.add(l1, wkl)?;
    total = g.add(total, wreg)?;
    if let Some((w, p)) = perc {
        let wp = g.scale(p, w);
        total = g.add(total, wp)?;
    }
    Ok(LossTerms {
        total,
        l1,
        kl,
        matrix: matrix_term,
        perceptual: perc.map(|(_, p)| p),
    })
}

/// Draws a random simplex vector by normalizing exponentials.
pub fn random_simplex<R: Rng + ?Sized>(labels: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..labels).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check_input, GradCheckConfig};
    use crate::rng::AUGMENT;

    /// Rows of length 4 with mean 1 / variance 0.75 and mean 0 / variance 0.5.
    fn hand_matrix() -> Tensor {
        let a = 0.75f64.sqrt();
        let b = 0.5f64.sqrt();
        Tensor::new(vec![2, 4], vec![1.0 + a, 1.0 + a, 1.0 - a, 1.0 - a, b, b, -b, -b]).unwrap()
    }

    #[test]
    fn l1_hand_values() {
        assert_eq!(l1_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(l1_loss(&[0.3, 0.7], &[0.6, 0.4]).unwrap(), l1_loss(&[0.6, 0.4], &[0.3, 0.7]).unwrap());
        assert!(l1_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_loss(&[0.3, 0.7], &[0.3, 0.7], KL_EPS).unwrap(), 0.0);
        let v = kl_loss(&[0.5, 0.5], &[0.25, 0.75], KL_EPS).unwrap();
        assert!((v - 0.14384).abs() < 1e-5, "{v}");
        let v = kl_loss(&[1.0, 0.0], &[0.5, 0.5], KL_EPS).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matrix_reg_hand_values() {
        let m = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!((gaussian_matrix_reg(&m, &[0.5], 0.5).unwrap() - 0.0625).abs() < 1e-15);
        let r = 0.5f64.sqrt();
        let matched = Tensor::from_rows(&[[0.3 + r, 0.3 - r], [0.7 - r, 0.7 + r]]).unwrap();
        assert!(gaussian_matrix_reg(&matched, &[0.3, 0.7], 0.5).unwrap() < 1e-30);
        assert!((gaussian_matrix_reg(&hand_matrix(), &[1.0, 0.0], 0.5).unwrap() - 0.0625).abs() < 1e-14);
    }

    #[test]
    fn composite_hand_value() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let m = g.constant(hand_matrix().reshape(&[1, 2, 4]).unwrap());
        let target = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let terms = composite_loss(&mut g, pred, &target, m, &LossWeights::default(), None, None).unwrap();
        assert!((g.item(terms.total) - 1.0131815).abs() < 1e-7, "{}", g.item(terms.total));
        assert!(terms.perceptual.is_none());
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let r = 0.5f64.sqrt();
        let mut g = Graph::new();
        let target = Tensor::from_rows(&[[0.25, 0.75]]).unwrap();
        let pred = g.constant(target.clone());
        let m = g.constant(Tensor::new(vec![1, 2, 2], vec![0.25 + r, 0.25 - r, 0.75 - r, 0.75 + r]).unwrap());
        let terms = composite_loss(&mut g, pred, &target, m, &LossWeights::default(), None, None).unwrap();
        assert!(g.item(terms.total).abs() < 1e-15);
    }

    #[test]
    fn perceptual_matches_reference_pass() {
        let net = PerceptualNet::new(4, 3);
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(perceptual_loss(&a, &a, &net).unwrap(), 0.0);
        // Reference: explicit triple loop over the three layers.
        let mut expect = 0.0;
        let (mut ha, mut hb) = (a.to_vec(), b.to_vec());
        for (k, w) in net.weights.iter().enumerate() {
            let step = |h: &[f64]| -> Vec<f64> {
                (0..4)
                    .map(|j| {
                        let z: f64 = (0..4).map(|i| h[i] * w.data()[i * 4 + j]).sum();
                        if k < 2 { z.max(0.0) } else { z }
                    })
                    .collect()
            };
            ha = step(&ha);
            hb = step(&hb);
            expect += ha.iter().zip(&hb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0;
        }
        assert!((perceptual_loss(&a, &b, &net).unwrap() - expect).abs() < 1e-14);
        let mut g = Graph::new();
        let pa = g.constant(Tensor::from_rows(&[a]).unwrap());
        let pb = g.constant(Tensor::from_rows(&[b]).unwrap());
        let v = perceptual_graph(&mut g, &net, pa, pb).unwrap();
        assert!((g.item(v) - expect).abs() < 1e-14);
    }

    #[test]
    fn small_label_sets_skip_perceptual() {
        let mut g = Graph::new();
        let target = Tensor::from_rows(&[[0.2, 0.3, 0.1, 0.1, 0.3]]).unwrap();
        let pred = g.constant(Tensor::from_rows(&[[0.2, 0.2, 0.2, 0.2, 0.2]]).unwrap());
        let m = g.constant(Tensor::zeros(&[1, 5, 10]));
        let terms = composite_loss(&mut g, pred, &target, m, &LossWeights::default(), None, None).unwrap();
        assert!(terms.perceptual.is_none());
    }

    #[test]
    fn variants_coincide_under_matching_weights() {
        let labels = 3;
        let target = Tensor::from_rows(&[[0.2, 0.5, 0.3]]).unwrap();
        let pv = Tensor::from_rows(&[[0.1, 0.6, 0.3]]).unwrap();
        let mv = Tensor::new(vec![1, 3, 6], (0..18).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let eval = |w: &LossWeights, net: Option<&PerceptualNet>| {
            let mut g = Graph::new();
            let p = g.constant(pv.clone());
            let m = g.constant(mv.clone());
            let t = composite_loss(&mut g, p, &target, m, w, net, None).unwrap();
            g.item(t.total)
        };
        let small = LossWeights::default();
        let large = LossWeights {
            label_threshold: 0,
            lambda1: small.lambda,
            lambda2: 0.0,
            beta_large: small.beta,
            ..LossWeights::default()
        };
        let net = PerceptualNet::new(labels, 0);
        assert!((eval(&small, None) - eval(&large, Some(&net))).abs() < 1e-15);
    }

    #[test]
    fn term_gradients_pass_fd() {
        let cfg = GradCheckConfig {
            tol: 1e-4,
            ..GradCheckConfig::default()
        };
        let target = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]).unwrap();
        let pred = Tensor::from_rows(&[[0.1, 0.6, 0.3], [0.3, 0.3, 0.4]]).unwrap();
        let r = gradient_check_input(&pred, |g, p| kl_graph(g, &target, p), &cfg).unwrap();
        assert!(r.passed, "{r:?}");
        let r = gradient_check_input(
            &pred,
            |g, p| {
                let t = g.constant(target.clone());
                l1_graph(g, p, t)
            },
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let m = Tensor::new(vec![2, 3, 6], (0..36).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let r = gradient_check_input(
            &m,
            |g, m| {
                let t = g.constant(target.clone());
                gaussian_reg_graph(g, m, t, 0.5)
            },
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let net = PerceptualNet::new(3, 1);
        let r = gradient_check_input(
            &pred,
            |g, p| {
                let t = g.constant(target.clone());
                perceptual_graph(g, &net, p, t)
            },
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = gradient_check_input(
            &m,
            |g, m| sampled_reg_graph(g, m, &target, 0.5, &mut substream(0, AUGMENT, 0)),
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn graph_and_scalar_agree() {
        let target = Tensor::from_rows(&[[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]]).unwrap();
        let pred = Tensor::from_rows(&[[0.1, 0.6, 0.3], [0.0, 0.5, 0.5]]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let kl = kl_graph(&mut g, &target, p).unwrap();
        let expect = (kl_loss(target.row(0), pred.row(0), KL_EPS).unwrap()
            + kl_loss(target.row(1), pred.row(1), KL_EPS).unwrap())
            / 2.0;
        assert!((g.item(kl) - expect).abs() < 1e-12);
    }
}
