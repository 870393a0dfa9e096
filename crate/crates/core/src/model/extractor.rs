//! Residual ReLU feature extractor and time-stacked pseudo-features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn weight_key(layer: usize) -> String {
    format!("extractor.l{layer}.w")
}

pub fn bias_key(layer: usize) -> String {
    format!("extractor.l{layer}.b")
}

pub const OUT_WEIGHT: &str = "extractor.out.w";
pub const OUT_BIAS: &str = "extractor.out.b";

/// Layer whose activation is added before the ReLU of `layer`. Shortcuts
/// span two linear units: layer 2 receives the output of layer 0, layer 4
/// that of layer 2, and so on.
pub fn shortcut_source(layer: usize) -> Option<usize> {
    (layer >= 2 && layer.is_multiple_of(2)).then(|| layer - 2)
}

/// Kaiming-normal `(fan_in, fan_out)` weight.
pub fn kaiming<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized to shape")
}

/// Bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_bias<R: Rng + ?Sized>(fan_in: usize, n: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

pub(crate) fn init<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let mut fan_in = cfg.d_in;
    for i in 0..cfg.n_linear {
        store.insert(weight_key(i), kaiming(fan_in, cfg.hidden, rng));
        store.insert(bias_key(i), uniform_bias(fan_in, cfg.hidden, rng));
        fan_in = cfg.hidden;
    }
    let out = cfg.labels * cfg.height * cfg.width;
    store.insert(OUT_WEIGHT, kaiming(cfg.hidden, out, rng));
    store.insert(OUT_BIAS, uniform_bias(cfg.hidden, out, rng));
}

/// Slot 0 holds `x`; slots `1..t` hold copies masked by independent
/// Bernoulli(keep_prob) draws. Without an RNG every slot is the native copy.
pub fn stack_time<R: Rng + ?Sized>(x: &[f64], t: usize, keep_prob: f64, mut rng: Option<&mut R>) -> Vec<Vec<f64>> {
    let mut slots = Vec::with_capacity(t);
    slots.push(x.to_vec());
    for _ in 1..t {
        let slot = match rng.as_deref_mut() {
            Some(r) => x.iter().map(|&v| if r.random::<f64>() < keep_prob { v } else { 0.0 }).collect(),
            None => x.to_vec(),
        };
        slots.push(slot);
    }
    slots
}

/// Stacks every row of `x` (`(N, d)`) into `(N * t, d)`, sample-major.
pub fn stack_batch<R: Rng + ?Sized>(x: &Tensor, t: usize, keep_prob: f64, mut rng: Option<&mut R>) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(n * t * d);
    for i in 0..n {
        for slot in stack_time(x.row(i), t, keep_prob, rng.as_deref_mut()) {
            data.extend(slot);
        }
    }
    Tensor::new(vec![n * t, d], data).expect("sized to shape")
}

/// Hidden activations of the last linear unit for a `(rows, d_in)` input.
pub fn hidden_graph(g: &mut Graph, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let mut acts: Vec<Var> = Vec::with_capacity(cfg.n_linear);
    let mut h = x;
    for i in 0..cfg.n_linear {
        let z = g.matmul(h, p[&weight_key(i)])?;
        let mut z = g.broadcast_add(z, p[&bias_key(i)])?;
        if let Some(src) = shortcut_source(i) {
            z = g.add(z, acts[src])?;
        }
        h = g.relu(z);
        acts.push(h);
    }
    Ok(h)
}

/// Final transformation from the squeezed `(N, hidden)` code to `(N, L, H, W)`.
pub fn feature_map_graph(g: &mut Graph, p: &Bound, cfg: &ModelConfig, hidden: Var) -> Result<Var> {
    let n = g.shape(hidden)[0];
    let z = g.matmul(hidden, p[OUT_WEIGHT])?;
    let z = g.broadcast_add(z, p[OUT_BIAS])?;
    g.reshape(z, &[n, cfg.labels, cfg.height, cfg.width])
}

/// Runs each time slot through the ReLU stack, averages over slots and maps
/// the result to the latent feature map. `stacked` is `(N * T, d_in)`.
pub fn extract_features(g: &mut Graph, p: &Bound, cfg: &ModelConfig, stacked: Var) -> Result<Var> {
    let rows = g.shape(stacked)[0];
    if !rows.is_multiple_of(cfg.time_steps) || g.shape(stacked)[1] != cfg.d_in {
        return Err(Error::shape("extract_features", g.shape(stacked), &[cfg.time_steps, cfg.d_in]));
    }
    let n = rows / cfg.time_steps;
    let h = hidden_graph(g, p, cfg, stacked)?;
    let h = g.reshape(h, &[n, cfg.time_steps, cfg.hidden])?;
    let squeezed = g.mean_axis(h, 1, false)?;
    feature_map_graph(g, p, cfg, squeezed)
}

/// One dense unit of a plain ReLU network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(n_in, n_out)`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub shortcut_from: Option<usize>,
}

impl DenseLayer {
    pub fn n_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Graph-free ReLU stack, used as the conversion source for spiking
/// simulation and as an independent forward oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluNet {
    pub layers: Vec<DenseLayer>,
}

impl ReluNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.n_out() {
                return Err(Error::shape("ReluNet", l.weight.shape(), &[l.bias.len()]));
            }
            if i > 0 && layers[i - 1].n_out() != l.n_in() {
                return Err(Error::shape("ReluNet", layers[i - 1].weight.shape(), l.weight.shape()));
            }
            if let Some(src) = l.shortcut_from {
                if src >= i || layers[src].n_out() != l.n_out() {
                    return Err(Error::InvalidArgument(format!("layer {i} has an invalid shortcut from {src}")));
                }
            }
        }
        Ok(ReluNet { layers })
    }

    /// The extractor's ReLU stack (without the final transformation).
    pub fn from_extractor(params: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.n_linear)
            .map(|i| {
                let w = params
                    .get(&weight_key(i))
                    .ok_or_else(|| Error::Schema(format!("missing {}", weight_key(i))))?;
                let b = params
                    .get(&bias_key(i))
                    .ok_or_else(|| Error::Schema(format!("missing {}", bias_key(i))))?;
                Ok(DenseLayer {
                    weight: w.clone(),
                    bias: b.data().to_vec(),
                    shortcut_from: shortcut_source(i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ReluNet::new(layers)
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::n_in)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::n_out)
    }

    /// Post-ReLU activations of every layer for one input.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = acts.last().map_or(x, |a| a.as_slice());
            let (n_in, n_out) = (layer.n_in(), layer.n_out());
            let w = layer.weight.data();
            let mut z = layer.bias.clone();
            for (i, &v) in input.iter().enumerate().take(n_in) {
                if v != 0.0 {
                    for (zj, wij) in z.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                        *zj += v * wij;
                    }
                }
            }
            if let Some(src) = layer.shortcut_from {
                for (zj, s) in z.iter_mut().zip(&acts[src]) {
                    *zj += s;
                }
            }
            acts.push(z.into_iter().map(|v| v.max(0.0)).collect());
        }
        acts
    }

    /// Multiply-accumulates of one dense pass over one input row.
    pub fn macs_per_row(&self) -> u64 {
        self.layers.iter().map(|l| (l.n_in() * l.n_out()) as u64).sum()
    }
}
