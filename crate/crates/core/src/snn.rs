//! Conversion of the extractor's ReLU stack into integrate-and-fire neurons
//! with percentile-based normalization, time-stepped simulation and
//! synaptic-operation energy accounting.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::data::{LabelDistribution, LdlSample};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_versioned, write_json, ModelCheckpoint, SCHEMA_VERSION};
use crate::model::extractor::{stack_time, ReluNet};
use crate::model::IdrModel;
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 99.9;
pub const DEFAULT_E_MAC: f64 = 4.6;
pub const DEFAULT_E_AC: f64 = 0.9;
/// Initial membrane potential as a fraction of the threshold.
pub const DEFAULT_INITIAL_POTENTIAL: f64 = 0.5;

/// `q`-th percentile (0..=100) with linear interpolation between order
/// statistics at rank `q/100 * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub q: f64,
    /// Scale `p_l` of every layer.
    pub scales: Vec<f64>,
}

impl CalibrationProfile {
    pub fn identity(layers: usize) -> Self {
        CalibrationProfile {
            q: 100.0,
            scales: vec![1.0; layers],
        }
    }
}

/// Percentile of each layer's post-ReLU activations over `batch`.
pub fn calibrate(net: &ReluNet, batch: &[Vec<f64>], q: f64) -> Result<CalibrationProfile> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); net.layers.len()];
    for x in batch {
        if x.len() != net.n_in() {
            return Err(Error::shape("calibrate", &[x.len()], &[net.n_in()]));
        }
        for (store, act) in per_layer.iter_mut().zip(net.forward(x)) {
            store.extend(act);
        }
    }
    let mut scales = Vec::with_capacity(per_layer.len());
    for (l, acts) in per_layer.iter().enumerate() {
        let p = percentile(acts, q)?;
        if p.is_nan() || p <= 0.0 {
            return Err(Error::Domain {
                op: "calibrate",
                detail: format!("layer {l} has a non-positive {q}th percentile activation ({p})"),
            });
        }
        scales.push(p);
    }
    Ok(CalibrationProfile { q, scales })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingLayer {
    /// Normalized `(n_in, n_out)` weight.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Source layer and the factor applied to its spikes.
    pub shortcut: Option<(usize, f64)>,
    pub threshold: f64,
}

impl SpikingLayer {
    pub fn n_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingNet {
    pub layers: Vec<SpikingLayer>,
    /// Calibration scales used for decoding.
    pub scales: Vec<f64>,
    pub initial_potential: f64,
}

/// `W'_l = W_l p_{l-1} / p_l` (with `p_{-1} = 1` for the analog input),
/// `b'_l = b_l / p_l`, shortcut factor `p_src / p_l`, thresholds 1.
pub fn convert(net: &ReluNet, profile: &CalibrationProfile) -> Result<SpikingNet> {
    if profile.scales.len() != net.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "profile has {} scales for {} layers",
            profile.scales.len(),
            net.layers.len()
        )));
    }
    if let Some(p) = profile.scales.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument(format!("layer scale {p} must be positive")));
    }
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let p = profile.scales[l];
            let p_prev = if l == 0 { 1.0 } else { profile.scales[l - 1] };
            SpikingLayer {
                weight: layer.weight.map(|w| w * p_prev / p),
                bias: layer.bias.iter().map(|b| b / p).collect(),
                shortcut: layer.shortcut_from.map(|s| (s, profile.scales[s] / p)),
                threshold: 1.0,
            }
        })
        .collect();
    Ok(SpikingNet {
        layers,
        scales: profile.scales.clone(),
        initial_potential: DEFAULT_INITIAL_POTENTIAL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub t_sim: usize,
    pub spike_counts: Vec<Vec<u32>>,
    /// Spike-driven accumulates: each spike times the fan-out of its neuron.
    pub synops: u64,
    /// Accumulates of the analog input current into the first layer (not
    /// part of `synops`).
    pub input_ops: u64,
}

impl SimOutput {
    pub fn rates(&self) -> Vec<Vec<f64>> {
        self.spike_counts
            .iter()
            .map(|c| c.iter().map(|&n| n as f64 / self.t_sim as f64).collect())
            .collect()
    }

    /// Rates multiplied back by the calibration scales.
    pub fn decoded(&self, snn: &SpikingNet) -> Vec<Vec<f64>> {
        self.rates()
            .into_iter()
            .zip(&snn.scales)
            .map(|(r, p)| r.into_iter().map(|v| v * p).collect())
            .collect()
    }
}

impl SpikingNet {
    /// Outgoing synapses per neuron of each layer: the next layer's width
    /// plus one per shortcut that reads it. The last layer has none.
    pub fn fan_out(&self) -> Vec<u64> {
        let mut f: Vec<u64> = (0..self.layers.len())
            .map(|l| self.layers.get(l + 1).map_or(0, |n| n.n_out() as u64))
            .collect();
        for layer in &self.layers {
            if let Some((src, _)) = layer.shortcut {
                f[src] += 1;
            }
        }
        f
    }

    /// Integrate-and-fire with reset by subtraction. Step `s` feeds slot
    /// `s mod T` of `x_stack` as a constant current; biases are injected
    /// every step and spikes propagate through all layers within a step.
    pub fn simulate(&self, x_stack: &[Vec<f64>], t_sim: usize) -> Result<SimOutput> {
        if t_sim == 0 {
            return Err(Error::InvalidArgument("t_sim must be at least 1".into()));
        }
        let n_in = self.layers.first().map_or(0, SpikingLayer::n_in);
        if x_stack.is_empty() || x_stack.iter().any(|x| x.len() != n_in) {
            return Err(Error::shape("simulate", &[x_stack.len()], &[n_in]));
        }
        let fan_out = self.fan_out();
        let mut v: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![self.initial_potential * l.threshold; l.n_out()])
            .collect();
        let mut counts: Vec<Vec<u32>> = self.layers.iter().map(|l| vec![0; l.n_out()]).collect();
        let mut spikes: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.n_out()]).collect();
        let (mut synops, mut input_ops) = (0u64, 0u64);

        for step in 0..t_sim {
            let x = &x_stack[step % x_stack.len()];
            for (l, layer) in self.layers.iter().enumerate() {
                let n_out = layer.n_out();
                let mut current = layer.bias.clone();
                let input: &[f64] = if l == 0 { x } else { &spikes[l - 1] };
                let w = layer.weight.data();
                let mut events = 0u64;
                for (i, &s) in input.iter().enumerate() {
                    if s != 0.0 {
                        events += 1;
                        for (c, wij) in current.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                            *c += s * wij;
                        }
                    }
                }
                if l == 0 {
                    input_ops += events * n_out as u64;
                }
                if let Some((src, factor)) = layer.shortcut {
                    for (c, s) in current.iter_mut().zip(&spikes[src]) {
                        *c += factor * s;
                    }
                }
                let mut fired = 0u64;
                for j in 0..n_out {
                    v[l][j] += current[j];
                    if v[l][j] >= layer.threshold {
                        v[l][j] -= layer.threshold;
                        spikes[l][j] = 1.0;
                        counts[l][j] += 1;
                        fired += 1;
                    } else {
                        spikes[l][j] = 0.0;
                    }
                }
                synops += fired * fan_out[l];
            }
        }
        Ok(SimOutput {
            t_sim,
            spike_counts: counts,
            synops,
            input_ops,
        })
    }
}

/// `sum |snn - ann| / sum |ann|` over the last layer of every sample.
pub fn mean_relative_error(net: &ReluNet, snn: &SpikingNet, batch: &[Vec<f64>], t_sim: usize) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for x in batch {
        let ann = net.forward(x).pop().unwrap_or_default();
        let sim = snn.simulate(std::slice::from_ref(x), t_sim)?;
        let dec = sim.decoded(snn).pop().unwrap_or_default();
        num += ann.iter().zip(&dec).map(|(a, b)| (a - b).abs()).sum::<f64>();
        den += ann.iter().map(|a| a.abs()).sum::<f64>();
    }
    if den == 0.0 {
        return Err(Error::Domain {
            op: "mean_relative_error",
            detail: "reference activations are all zero".into(),
        });
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub schema_version: u32,
    pub kind: String,
    pub batch: usize,
    pub time_steps: usize,
    pub t_sim: usize,
    pub ann_macs: u64,
    pub snn_synops: u64,
    pub snn_input_ops: u64,
    pub e_mac: f64,
    pub e_ac: f64,
    /// `1 - synops * e_ac / (macs * e_mac)`.
    pub estimated_saving: f64,
}

impl EnergyReport {
    pub const KIND: &'static str = "energy-report";
}

/// MACs of the dense network over every time slot of every probe sample
/// against spike-driven accumulates of the converted network.
pub fn energy_report(
    ann: &ReluNet,
    snn: &SpikingNet,
    probe: &[Vec<Vec<f64>>],
    t_sim: usize,
    e_mac: f64,
    e_ac: f64,
) -> Result<EnergyReport> {
    if ann.layers.len() != snn.layers.len()
        || ann.layers.iter().zip(&snn.layers).any(|(a, s)| a.weight.shape() != s.weight.shape())
    {
        return Err(Error::InvalidArgument("ANN and SNN topologies differ".into()));
    }
    let first = probe
        .first()
        .ok_or_else(|| Error::InvalidArgument("energy probe batch is empty".into()))?;
    let slots = first.len();
    let ann_macs = probe.len() as u64 * slots as u64 * ann.macs_per_row();
    let (mut synops, mut input_ops) = (0, 0);
    for x_stack in probe {
        let out = snn.simulate(x_stack, t_sim)?;
        synops += out.synops;
        input_ops += out.input_ops;
    }
    Ok(EnergyReport {
        schema_version: SCHEMA_VERSION,
        kind: EnergyReport::KIND.into(),
        batch: probe.len(),
        time_steps: slots,
        t_sim,
        ann_macs,
        snn_synops: synops,
        snn_input_ops: input_ops,
        e_mac,
        e_ac,
        estimated_saving: 1.0 - (synops as f64 * e_ac) / (ann_macs as f64 * e_mac),
    })
}

/// Converted extractor together with the ANN model whose remaining stages
/// decode its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnCheckpoint {
    pub schema_version: u32,
    pub kind: String,
    pub model: ModelCheckpoint,
    pub profile: CalibrationProfile,
    pub spiking: SpikingNet,
}

impl SnnCheckpoint {
    pub const KIND: &'static str = "snn-model";

    pub fn new(model: &IdrModel, profile: CalibrationProfile, spiking: SpikingNet) -> Self {
        SnnCheckpoint {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            model: ModelCheckpoint::new(model, None, None),
            profile,
            spiking,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned(path, Self::KIND)
    }
}

/// Evaluation-mode time stacks of each sample (every slot the native copy).
pub fn probe_stacks(model: &IdrModel, samples: &[LdlSample]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.config;
    samples
        .iter()
        .map(|s| stack_time::<rand_chacha::ChaCha8Rng>(&s.features, cfg.time_steps, cfg.keep_prob, None))
        .collect()
}

/// Predictions with the extractor replaced by the spiking network: decoded
/// last-layer rates feed the latent map, GCN lookup, attention and head.
pub fn snn_predict(model: &IdrModel, snn: &SpikingNet, samples: &[LdlSample], t_sim: usize) -> Result<Vec<LabelDistribution>> {
    let hidden = model.config.hidden;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(crate::trainer::EVAL_CHUNK) {
        let mut codes = Vec::with_capacity(chunk.len() * hidden);
        for stack in probe_stacks(model, chunk) {
            let out = snn.simulate(&stack, t_sim)?;
            codes.extend(out.decoded(snn).pop().unwrap_or_default());
        }
        preds.extend(model.predict_from_hidden(Tensor::new(vec![chunk.len(), hidden], codes)?)?);
    }
    Ok(preds)
}
