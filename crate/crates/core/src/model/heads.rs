//! Output normalizers turning logits into label distributions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::LabelDistribution;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Lnf,
    Softmax,
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lnf" => Ok(Head::Lnf),
            "softmax" => Ok(Head::Softmax),
            other => Err(format!("unknown head `{other}` (expected lnf or softmax)")),
        }
    }
}

/// Softmax with max subtraction; invariant under constant shifts.
pub fn softmax(z: &[f64]) -> Result<LabelDistribution> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "softmax input".into() });
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(LabelDistribution::from_normalized(exps.into_iter().map(|e| e / s).collect()))
}

/// Linear normalization: shift by the magnitude of the minimum, then divide
/// by the shifted sum. A shifted sum of zero (e.g. the all-zero vector) is a
/// domain error.
pub fn lnf(z: &[f64]) -> Result<LabelDistribution> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "lnf input".into() });
    }
    let shift = z.iter().cloned().fold(f64::INFINITY, f64::min).abs();
    let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
    let total: f64 = shifted.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("lnf", "degenerate input: shifted sum is zero"));
    }
    Ok(LabelDistribution::from_normalized(shifted.into_iter().map(|v| v / total).collect()))
}

impl Head {
    pub fn apply(self, z: &[f64]) -> Result<LabelDistribution> {
        match self {
            Head::Lnf => lnf(z),
            Head::Softmax => softmax(z),
        }
    }

    /// Row-wise head over an `(N, L)` logit node.
    pub fn apply_graph(self, g: &mut Graph, z: Var) -> Result<Var> {
        match self {
            Head::Softmax => Ok(g.softmax_last(z)),
            Head::Lnf => lnf_graph(g, z),
        }
    }
}

/// Graph form of [`lnf`]; a row whose shifted sum is zero is the same
/// domain error.
pub fn lnf_graph(g: &mut Graph, z: Var) -> Result<Var> {
    let axis = g.shape(z).len() - 1;
    let neg = g.neg(z);
    let neg_min = g.max_axis(neg, axis, true)?;
    let shift = g.abs(neg_min);
    let shifted = g.add(z, shift)?;
    let total = g.sum_axis(shifted, axis, true)?;
    if let Some(row) = g.value(total).data().iter().position(|t| *t <= 0.0) {
        return Err(Error::domain(
            "lnf",
            format!("degenerate logits in row {row}: all equal and non-positive, shifted sum is zero"),
        ));
    }
    g.div(shifted, total)
}
