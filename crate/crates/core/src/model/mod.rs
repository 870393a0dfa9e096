//! The implicit distribution representation network.
//!
//! Pipeline: time-stacked features, residual extractor, mean over time,
//! latent map `(L, H, W)`, GCN coordinates `(L, 2L, 2)`, bilinear lookup into
//! the distribution matrix `M` `(L, 2L)`, attention squeeze to `L` logits and
//! the output head.
//!
//! Checkpoint parameter keys:
//!
//! | key | shape |
//! |-----|-------|
//! | `extractor.l{i}.w` / `.b`, `i < n_linear` | `(d_in or hidden, hidden)` / `(hidden)` |
//! | `extractor.out.w` / `.b` | `(hidden, L*H*W)` / `(L*H*W)` |
//! | `gcn.coords` | `(L, coord_dim)` |
//! | `gcn.l{i}.w` | widths `coord_dim, gcn_hidden.., 4L` |
//! | `attention.wq`, `.wk`, `.wv` | `(2L, 2L)` |
//! | `attention.wo` / `.bo` | `(2L, 1)` / `(1)` |

pub mod attention;
pub mod checkpoint;
pub mod extractor;
pub mod gcn;
pub mod heads;

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::data::{features_tensor, LabelDistribution, LdlSample};
use crate::error::{Error, Result};
use crate::rng::{substream, INIT};
use crate::tensor::Tensor;
pub use checkpoint::ModelCheckpoint;
pub use heads::Head;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub n_linear: usize,
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    pub time_steps: usize,
    /// Mask density of the pseudo-feature slots during training.
    pub keep_prob: f64,
    pub coord_dim: usize,
    /// GCN widths between the coordinate features and the `4L` output.
    pub gcn_hidden: Vec<usize>,
    pub head: Head,
    pub freeze_coords: bool,
}

impl ModelConfig {
    /// Defaults for `d_in` features and `labels` labels; feature spaces
    /// narrower than 64 get a 64-wide extractor, others 1024.
    pub fn new(d_in: usize, labels: usize) -> Self {
        ModelConfig {
            d_in,
            hidden: if d_in < 64 { 64 } else { 1024 },
            n_linear: 8,
            labels,
            height: 32,
            width: 32,
            time_steps: 4,
            keep_prob: 0.8,
            coord_dim: 64,
            gcn_hidden: vec![64, 128, 256],
            head: Head::Lnf,
            freeze_coords: false,
        }
    }

    /// Tiny shape used by gradient checks.
    pub fn tiny(d_in: usize, labels: usize) -> Self {
        ModelConfig {
            hidden: 8,
            height: 4,
            width: 4,
            time_steps: 2,
            ..ModelConfig::new(d_in, labels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_in == 0 || self.hidden == 0 || self.n_linear == 0 || self.coord_dim == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.labels));
        }
        if self.height < 2 || self.width < 2 {
            return bad(format!("feature map must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if self.time_steps == 0 {
            return bad("time_steps must be at least 1".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob {} outside (0, 1]", self.keep_prob));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `(N, L)` head output.
    pub prediction: Var,
    /// `(N, L)` attention logits.
    pub logits: Var,
    /// `(N, L, 2L)` label distribution matrices.
    pub matrix: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl IdrModel {
    /// Kaiming weights, `U(+-1/sqrt(fan_in))` biases and standard-normal
    /// coordinates, drawn from the init stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        extractor::init(&config, &mut params, &mut substream(seed, INIT, 0));
        gcn::init(&config, &mut params, &mut substream(seed, INIT, 1));
        attention::init(&config, &mut params, &mut substream(seed, INIT, 2));
        Ok(IdrModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = IdrModel::init(config.clone(), 0)?;
        if !reference.params.same_schema(&params) {
            return Err(Error::Schema(format!(
                "parameter keys or shapes do not match the model config (expected {} tensors, got {})",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(IdrModel { config, params })
    }

    /// Keys excluded from optimization.
    pub fn frozen(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        if self.config.freeze_coords {
            s.insert(gcn::COORDS.to_string());
        }
        s
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind_frozen(g, &self.frozen())
    }

    /// Full forward over an `(N, d_in)` batch. With `rng` the pseudo-slots
    /// are masked (training); without it every slot is the native copy.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        let cfg = &self.config;
        if x.rank() != 2 || x.shape()[1] != cfg.d_in {
            return Err(Error::shape("model_forward", x.shape(), &[cfg.d_in]));
        }
        let stacked = g.constant(extractor::stack_batch(x, cfg.time_steps, cfg.keep_prob, rng));
        let features = extractor::extract_features(g, p, cfg, stacked)?;
        self.forward_from_map(g, p, features)
    }

    /// Continues from a squeezed `(N, hidden)` extractor code.
    pub fn forward_from_hidden(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<Forward> {
        let features = extractor::feature_map_graph(g, p, &self.config, hidden)?;
        self.forward_from_map(g, p, features)
    }

    fn forward_from_map(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Forward> {
        let grid = gcn::gcn_forward(g, p, &self.config)?;
        let matrix = g.grid_sample(features, grid)?;
        let logits = attention::attention_squeeze(g, p, matrix)?;
        let prediction = self.config.head.apply_graph(g, logits)?;
        Ok(Forward {
            prediction,
            logits,
            matrix,
        })
    }

    /// Evaluation-mode predictions and matrices for a batch of samples.
    /// Processed in chunks of 256 rows.
    pub fn predict_with_matrices(&self, samples: &[LdlSample]) -> Result<(Vec<LabelDistribution>, Tensor)> {
        let all: BTreeSet<String> = self.params.keys().map(str::to_string).collect();
        let mut preds = Vec::with_capacity(samples.len());
        let mut matrices = Vec::new();
        for chunk in samples.chunks(256) {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g, &all);
            let fwd = self.forward(&mut g, &p, &features_tensor(chunk), None)?;
            preds.extend(rows_to_distributions(g.value(fwd.prediction))?);
            matrices.extend_from_slice(g.value(fwd.matrix).data());
        }
        let l = self.config.labels;
        Ok((preds, Tensor::new(vec![samples.len(), l, 2 * l], matrices)?))
    }

    pub fn predict(&self, samples: &[LdlSample]) -> Result<Vec<LabelDistribution>> {
        Ok(self.predict_with_matrices(samples)?.0)
    }

    /// Predictions from externally supplied `(N, hidden)` extractor codes.
    pub fn predict_from_hidden(&self, hidden: Tensor) -> Result<Vec<LabelDistribution>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g, &self.params.keys().map(str::to_string).collect());
        let h = g.constant(hidden);
        let fwd = self.forward_from_hidden(&mut g, &p, h)?;
        rows_to_distributions(g.value(fwd.prediction))
    }
}

pub(crate) fn rows_to_distributions(t: &Tensor) -> Result<Vec<LabelDistribution>> {
    (0..t.shape()[0])
        .map(|i| {
            let row = t.row(i).to_vec();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("prediction row {i}") });
            }
            Ok(LabelDistribution::from_normalized(row))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, d: usize, labels: usize) -> Vec<LdlSample> {
        (0..n)
            .map(|i| LdlSample {
                features: (0..d).map(|j| ((i * d + j) as f64 * 0.37).sin()).collect(),
                target: LabelDistribution::uniform(labels),
            })
            .collect()
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::new(12, 3);
        let model = IdrModel::init(cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let s = samples(2, 12, 3);
        let stacked = extractor::stack_batch::<ChaCha8Rng>(&features_tensor(&s), 4, 0.8, None);
        let sv = g.constant(stacked);
        let fmap = extractor::extract_features(&mut g, &p, &model.config, sv).unwrap();
        assert_eq!(g.shape(fmap), &[2, 3, 32, 32]);
        let (preds, m) = model.predict_with_matrices(&s).unwrap();
        assert_eq!(m.shape(), &[2, 3, 6]);
        for d in preds {
            assert!(d.values().iter().all(|v| *v >= 0.0));
            assert!((d.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = IdrModel::init(ModelConfig::tiny(5, 3), 11).unwrap();
        let x = features_tensor(&samples(3, 5, 3));
        let run = || {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let mut rng = substream(1, crate::rng::AUGMENT, 0);
            let f = model.forward(&mut g, &p, &x, Some(&mut rng)).unwrap();
            g.value(f.prediction).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schema_checked_on_assembly() {
        let a = IdrModel::init(ModelConfig::tiny(5, 3), 0).unwrap();
        assert!(IdrModel::from_parts(ModelConfig::tiny(5, 4), a.params.clone()).is_err());
        assert!(IdrModel::from_parts(a.config.clone(), a.params).is_ok());
    }

    #[test]
    fn freeze_flag_excludes_coordinates() {
        let cfg = ModelConfig {
            freeze_coords: true,
            ..ModelConfig::tiny(5, 3)
        };
        let model = IdrModel::init(cfg, 0).unwrap();
        assert!(model.frozen().contains(gcn::COORDS));
    }
}
