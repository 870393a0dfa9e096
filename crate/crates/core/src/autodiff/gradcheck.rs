//! Central finite-difference verification of graph gradients.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//! Coordinates whose `+step` or `-step` probe lands on a different smooth
//! piece (the graph's kink signature changes, e.g. a ReLU input crosses 0)
//! are skipped and counted instead of compared.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Probe at most this many seeded coordinates per key; `None` probes all.
    pub max_coords_per_key: Option<usize>,
    pub seed: u64,
    pub frozen: BTreeSet<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tol: 1e-6,
            floor: 1e-4,
            max_coords_per_key: None,
            seed: 0,
            frozen: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Key and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

fn evaluate<F>(params: &ParamStore, frozen: &BTreeSet<String>, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g, frozen);
    let root = f(&mut g, &bound)?;
    Ok((g.item(root), g.kink_signature()))
}

/// Compares reverse-mode adjoints of `f` against central differences over
/// every trainable coordinate of `params` (or a seeded subset of them).
/// `params` is restored before returning.
pub fn gradient_check<F>(params: &mut ParamStore, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g, &cfg.frozen);
    let root = f(&mut g, &bound)?;
    if !g.item(root).is_finite() {
        return Err(Error::NonFinite {
            what: "objective at the base point".into(),
        });
    }
    let base_sig = g.kink_signature();
    let grads = g.backward(root)?;
    let analytic = bound.collect(&g, &grads);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        passed: true,
    };

    for (key, grad) in &analytic {
        let numel = grad.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_key {
            Some(k) if k < numel => {
                let mut idx = rand::seq::index::sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let original = params.get(key).expect("bound key").data()[i];
            let mut probe = |params: &mut ParamStore, value: f64| -> Result<(f64, u64)> {
                params.get_mut(key).expect("bound key").data_mut()[i] = value;
                let out = evaluate(params, &cfg.frozen, &mut f);
                params.get_mut(key).expect("bound key").data_mut()[i] = original;
                let (v, sig) = out?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("objective probed at {key}[{i}] = {value}"),
                    });
                }
                Ok((v, sig))
            };
            let (plus, sig_plus) = probe(params, original + cfg.step)?;
            let (minus, sig_minus) = probe(params, original - cfg.step)?;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((key.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}

/// Single-input convenience wrapper around [`gradient_check`].
pub fn gradient_check_input<F>(x: &Tensor, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.insert("x", x.clone());
    gradient_check(&mut store, |g, b| f(g, b["x"]), cfg)
}
