//! Single-head scaled dot-product attention over the rows of `M`.

use rand::Rng;

use super::extractor::{kaiming, uniform_bias};
use super::ModelConfig;
use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const QUERY: &str = "attention.wq";
pub const KEY: &str = "attention.wk";
pub const VALUE: &str = "attention.wv";
pub const OUT_WEIGHT: &str = "attention.wo";
pub const OUT_BIAS: &str = "attention.bo";

pub(crate) fn init<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let width = 2 * cfg.labels;
    for key in [QUERY, KEY, VALUE] {
        store.insert(key, kaiming(width, width, rng));
    }
    store.insert(OUT_WEIGHT, kaiming(width, 1, rng));
    store.insert(OUT_BIAS, uniform_bias(width, 1, rng));
}

/// `(N, L, 2L)` matrices to `(N, L)` logits:
/// `softmax(Q K^T / sqrt(2L)) V w_o + b_o` with `Q = M W_q` and so on.
pub fn attention_squeeze(g: &mut Graph, p: &Bound, m: Var) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    let wq = g.shape(p[QUERY]).to_vec();
    if shape.len() != 3 || shape[2] != wq[0] {
        return Err(Error::shape("attention_squeeze", &shape, &wq));
    }
    let (n, l, width) = (shape[0], shape[1], shape[2]);
    let q = g.matmul(m, p[QUERY])?;
    let k = g.matmul(m, p[KEY])?;
    let v = g.matmul(m, p[VALUE])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
    let attn = g.softmax_last(scores);
    let o = g.matmul(attn, v)?;
    let z = g.matmul(o, p[OUT_WEIGHT])?;
    let z = g.broadcast_add(z, p[OUT_BIAS])?;
    g.reshape(z, &[n, l])
}
