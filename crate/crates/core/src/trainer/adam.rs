use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates per parameter key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
/// Keys absent from `grads` (frozen parameters) are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (key, g) in grads {
        let p = params
            .get(key)
            .ok_or_else(|| Error::Schema(format!("gradient for unknown parameter `{key}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of `{key}` at flat index {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (key, g) in grads {
        let p = params.get_mut(key).expect("checked above");
        let m = state.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + EPS);
            *pi -= lr * (update + weight_decay * *pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(key: &str, v: f64) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert(key, Tensor::vector(vec![v]));
        (p, BTreeMap::new())
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut p, mut g) = one("w", 0.7);
        g.insert("w".into(), Tensor::vector(vec![0.0]));
        let mut s = AdamState::default();
        adam_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(s.m["w"].data(), &[0.0]);
        assert_eq!(s.v["w"].data(), &[0.0]);
    }

    #[test]
    fn first_step_is_lr() {
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::vector(vec![1.0]));
        let mut s = AdamState::default();
        adam_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn decoupled_decay_factor() {
        let (mut p, mut g) = one("w", 2.0);
        g.insert("w".into(), Tensor::vector(vec![0.0]));
        let mut s = AdamState::default();
        for k in 1..=3 {
            adam_step(&mut p, &g, &mut s, 0.5, 1e-4).unwrap();
            let expect = 2.0 * (1.0 - 0.5 * 1e-4f64).powi(k);
            assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_key() {
        let (mut p, mut g) = one("gcn.coords", 0.0);
        g.insert("gcn.coords".into(), Tensor::vector(vec![f64::NAN]));
        let err = adam_step(&mut p, &g, &mut AdamState::default(), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("gcn.coords"));
    }
}
