//! Graph convolution over the label coordinate matrix.

use rand::Rng;
use rand_distr::StandardNormal;

use super::extractor::kaiming;
use super::ModelConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable node features `C_r`, `(L, coord_dim)`.
pub const COORDS: &str = "gcn.coords";

pub fn weight_key(layer: usize) -> String {
    format!("gcn.l{layer}.w")
}

/// Layer widths from the node features to the `4L` coordinate output.
pub fn widths(cfg: &ModelConfig) -> Vec<usize> {
    let mut w = vec![cfg.coord_dim];
    w.extend(&cfg.gcn_hidden);
    w.push(4 * cfg.labels);
    w
}

pub(crate) fn init<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let coords = (0..cfg.labels * cfg.coord_dim).map(|_| rng.sample(StandardNormal)).collect();
    store.insert(COORDS, Tensor::new(vec![cfg.labels, cfg.coord_dim], coords).expect("sized to shape"));
    for (i, pair) in widths(cfg).windows(2).enumerate() {
        store.insert(weight_key(i), kaiming(pair[0], pair[1], rng));
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for a symmetric 0/1 adjacency `A` without
/// self-loops.
pub fn normalized_adjacency(adjacency: &[Vec<f64>]) -> Result<Tensor> {
    let n = adjacency.len();
    for (i, row) in adjacency.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape("normalized_adjacency", &[n, n], &[i, row.len()]));
        }
        for (j, &v) in row.iter().enumerate() {
            if v != adjacency[j][i] {
                return Err(Error::InvalidArgument(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let with_loops = |i: usize, j: usize| adjacency[i][j] + if i == j { 1.0 } else { 0.0 };
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| with_loops(i, j)).sum()).collect();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(with_loops(i, j) / (deg[i] * deg[j]).sqrt());
        }
    }
    Tensor::new(vec![n, n], data)
}

/// Complete graph on `n` nodes: every pair is connected.
pub fn complete_graph(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect()
}

/// ReLU graph convolutions followed by a tanh output layer; the `(L, 4L)`
/// output is reshaped to the `(L, 2L, 2)` sampling grid.
pub fn gcn_forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let a_hat = g.constant(normalized_adjacency(&complete_graph(cfg.labels))?);
    let n_layers = widths(cfg).len() - 1;
    let mut x = p[COORDS];
    for i in 0..n_layers {
        let ax = g.matmul(a_hat, x)?;
        let z = g.matmul(ax, p[&weight_key(i)])?;
        x = if i + 1 == n_layers { g.tanh(z) } else { g.relu(z) };
    }
    g.reshape(x, &[cfg.labels, 2 * cfg.labels, 2])
}
