//! `ildl` command line: synth, train, eval, cv, convert-snn and energy.
//!
//! Settings resolve as flag, then `--config` file (`key = value`), then the
//! dataset's `<file>.cfg` sidecar (k, repeats, seed), then built-in defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baseline::{bfgsll_fit, BaselineCheckpoint, FitConfig};
use crate::config::KvConfig;
use crate::data::{
    holdout_split, load_with_sidecar, synthesize, write_csv, AugmentConfig, DatasetSidecar, GroundTruth,
    LabelDistribution, LdlDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_all};
use crate::model::checkpoint::{write_json, SCHEMA_VERSION};
use crate::model::extractor::ReluNet;
use crate::model::{Head, IdrModel, ModelCheckpoint, ModelConfig};
use crate::objectives::{kl_loss, LossWeights, MatrixPrior, KL_EPS};
use crate::snn::{
    calibrate, convert, energy_report, mean_relative_error, probe_stacks, snn_predict, SnnCheckpoint,
    DEFAULT_E_AC, DEFAULT_E_MAC, DEFAULT_PERCENTILE,
};
use crate::trainer::{cross_validate, train, write_history_csv, Algo, CvConfig, TrainConfig};

pub const OUT_DIR_ENV: &str = "ILDL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ildl", version, about = "Label distribution learning with implicit distribution representation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic softmax-linear dataset and its ground truth.
    Synth(SynthArgs),
    /// Train the model on a dataset and write a checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a model, baseline or SNN checkpoint on a dataset.
    Eval(EvalArgs),
    /// Repeated k-fold cross-validation of one algorithm.
    Cv(CvArgs),
    /// Convert a model's extractor to a spiking network.
    ConvertSnn(ConvertArgs),
    /// Operation-count energy estimate of an SNN checkpoint.
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; defaults to `<out-dir>/synth-<n>x<d>x<L>-s<seed>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

/// Exactly one of `--data` or `--synth`.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// Dataset CSV (`f0..,y0..` header).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// In-memory synthetic dataset `N,D,L[,SEED]`.
    #[arg(long)]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    pub seed: u64,
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(format!("expected N,D,L[,SEED], got `{s}`"));
        }
        let num = |v: &str| v.parse::<u64>().map_err(|e| format!("`{v}`: {e}"));
        Ok(SynthSpec {
            n: num(parts[0])? as usize,
            d: num(parts[1])? as usize,
            labels: num(parts[2])? as usize,
            seed: parts.get(3).map_or(Ok(0), |v| num(v))?,
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub early_stopping: Option<bool>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub greedy_soup: Option<bool>,
    #[arg(long)]
    pub soup_pool: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    #[arg(long)]
    pub mask_keep: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub beta_large: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// `moments` or `sampled`.
    #[arg(long)]
    pub prior: Option<MatrixPrior>,
    /// `lnf` or `softmax`.
    #[arg(long)]
    pub head: Option<Head>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Height and width of the latent feature map.
    #[arg(long)]
    pub map_size: Option<usize>,
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub freeze_coords: Option<bool>,
    #[arg(long)]
    pub l2_reg: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "early_stopping",
    "patience",
    "min_delta",
    "greedy_soup",
    "soup_pool",
    "augment",
    "mixup_alpha",
    "mask_keep",
    "lambda",
    "beta",
    "lambda1",
    "lambda2",
    "beta_large",
    "sigma2",
    "prior",
    "head",
    "hidden",
    "map_size",
    "time_steps",
    "keep_prob",
    "freeze_coords",
    "l2_reg",
    "max_iter",
    "tol",
    "k",
    "repeats",
    "jobs",
    "algo",
];

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = "idr")]
    pub algo: Algo,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Simulation length for SNN checkpoints.
    #[arg(long, default_value_t = 64)]
    pub t_sim: usize,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub algo: Option<Algo>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Calibration data.
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile: f64,
    /// Samples (from the top of the dataset) used for calibration and the
    /// energy probe.
    #[arg(long, default_value_t = 256)]
    pub calib_size: usize,
    #[arg(long, default_value_t = 64)]
    pub t_sim: usize,
    #[arg(long, default_value_t = DEFAULT_E_MAC)]
    pub e_mac: f64,
    #[arg(long, default_value_t = DEFAULT_E_AC)]
    pub e_ac: f64,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// Probe data.
    #[command(flatten)]
    pub source: DataSource,
    /// SNN checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub probe_size: usize,
    #[arg(long, default_value_t = 64)]
    pub t_sim: usize,
    #[arg(long, default_value_t = DEFAULT_E_MAC)]
    pub e_mac: f64,
    #[arg(long, default_value_t = DEFAULT_E_AC)]
    pub e_ac: f64,
    #[arg(long, env = OUT_DIR_ENV, default_value = "ildl-out")]
    pub out_dir: PathBuf,
}

/// Ground truth written next to a synthetic CSV as `<file>.truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub schema_version: u32,
    pub kind: String,
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    pub seed: u64,
    pub ground_truth: GroundTruth,
}

impl GroundTruthFile {
    pub const KIND: &'static str = "synth-ground-truth";

    pub fn path_for(csv: &Path) -> PathBuf {
        let mut s = csv.as_os_str().to_owned();
        s.push(".truth.json");
        PathBuf::from(s)
    }
}

/// Agreement between the ANN and SNN heads on an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnAgreement {
    pub schema_version: u32,
    pub kind: String,
    pub t_sim: usize,
    pub samples: usize,
    /// Mean `KL(ann || snn)` over the samples.
    pub mean_kl: f64,
}

/// Fully resolved settings of a training or CV run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub cv: CvConfig,
    pub algo: Algo,
}

impl RunSpec {
    pub fn resolve(ds: &LdlDataset, sidecar: &DatasetSidecar, o: &Overrides, algo: Option<Algo>) -> Result<Self> {
        let file = match &o.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        file.reject_unknown(CONFIG_KEYS)?;
        macro_rules! pick {
            ($flag:expr, $key:literal) => {
                match $flag.clone() {
                    Some(v) => Some(v),
                    None => file.parse_key($key)?,
                }
            };
        }
        let seed: u64 = pick!(o.seed, "seed").or(sidecar.seed).unwrap_or(0);

        let mut model = ModelConfig::new(ds.n_features(), ds.n_labels());
        if let Some(v) = pick!(o.hidden, "hidden") {
            model.hidden = v;
        }
        if let Some(v) = pick!(o.map_size, "map_size") {
            model.height = v;
            model.width = v;
        }
        if let Some(v) = pick!(o.time_steps, "time_steps") {
            model.time_steps = v;
        }
        if let Some(v) = pick!(o.keep_prob, "keep_prob") {
            model.keep_prob = v;
        }
        if let Some(v) = pick!(o.head, "head") {
            model.head = v;
        }
        if let Some(v) = pick!(o.freeze_coords, "freeze_coords") {
            model.freeze_coords = v;
        }
        model.validate()?;

        let d = TrainConfig::default();
        let a = AugmentConfig::default();
        let train = TrainConfig {
            batch_size: pick!(o.batch_size, "batch_size").unwrap_or(d.batch_size),
            epochs: pick!(o.epochs, "epochs").unwrap_or(d.epochs),
            learning_rate: pick!(o.learning_rate, "learning_rate").unwrap_or(d.learning_rate),
            weight_decay: pick!(o.weight_decay, "weight_decay").unwrap_or(d.weight_decay),
            early_stopping: pick!(o.early_stopping, "early_stopping").unwrap_or(d.early_stopping),
            patience: pick!(o.patience, "patience").unwrap_or(d.patience),
            min_delta: pick!(o.min_delta, "min_delta").unwrap_or(d.min_delta),
            greedy_soup: pick!(o.greedy_soup, "greedy_soup").unwrap_or(d.greedy_soup),
            soup_pool: pick!(o.soup_pool, "soup_pool").unwrap_or(d.soup_pool),
            augmentation: AugmentConfig {
                alpha: pick!(o.mixup_alpha, "mixup_alpha").unwrap_or(a.alpha),
                keep_prob: pick!(o.mask_keep, "mask_keep").unwrap_or(a.keep_prob),
                enabled: pick!(o.augment, "augment").unwrap_or(a.enabled),
                fixed_lambda: None,
            },
            seed,
        };
        train.validate()?;

        let w = LossWeights::default();
        let weights = LossWeights {
            lambda: pick!(o.lambda, "lambda").unwrap_or(w.lambda),
            beta: pick!(o.beta, "beta").unwrap_or(w.beta),
            lambda1: pick!(o.lambda1, "lambda1").unwrap_or(w.lambda1),
            lambda2: pick!(o.lambda2, "lambda2").unwrap_or(w.lambda2),
            beta_large: pick!(o.beta_large, "beta_large").unwrap_or(w.beta_large),
            sigma2: pick!(o.sigma2, "sigma2").unwrap_or(w.sigma2),
            prior: pick!(o.prior, "prior").unwrap_or(w.prior),
            ..w
        };
        weights.validate()?;

        let f = FitConfig::default();
        let fit = FitConfig {
            l2_reg: pick!(o.l2_reg, "l2_reg").unwrap_or(f.l2_reg),
            max_iter: pick!(o.max_iter, "max_iter").unwrap_or(f.max_iter),
            tol: pick!(o.tol, "tol").unwrap_or(f.tol),
            ..f
        };

        let c = CvConfig::default();
        let cv = CvConfig {
            k: file.parse_key("k")?.or(sidecar.k).unwrap_or(c.k),
            repeats: file.parse_key("repeats")?.or(sidecar.repeats).unwrap_or(c.repeats),
            seed,
            jobs: file.parse_key("jobs")?.unwrap_or(c.jobs),
        };
        let algo = match algo {
            Some(a) => a,
            None => file.parse_key("algo")?.unwrap_or(Algo::Idr),
        };
        Ok(RunSpec {
            model,
            train,
            weights,
            fit,
            cv,
            algo,
        })
    }
}

fn load_source(src: &DataSource) -> Result<(LdlDataset, DatasetSidecar)> {
    match (&src.data, &src.synth) {
        (Some(path), None) => load_with_sidecar(path),
        (None, Some(s)) => Ok((synthesize(s.n, s.d, s.labels, s.seed)?.dataset, DatasetSidecar::default())),
        _ => Err(Error::InvalidArgument("exactly one of --data or --synth is required".into())),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn check_shape(what: &str, d: usize, labels: usize, ds: &LdlDataset) -> Result<()> {
    if d != ds.n_features() || labels != ds.n_labels() {
        return Err(Error::Schema(format!(
            "{what} expects d={d} L={labels}, dataset `{}` has d={} L={}",
            ds.name(),
            ds.n_features(),
            ds.n_labels()
        )));
    }
    Ok(())
}

fn checkpoint_kind(path: &Path) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    value
        .get("kind")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("{}: missing `kind`", path.display())))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let synth = synthesize(args.n, args.d, args.labels, args.seed)?;
    let path = match &args.out {
        Some(p) => p.clone(),
        None => args.out_dir.join(format!("{}.csv", synth.dataset.name())),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_csv(&synth.dataset, &path)?;
    write_json(
        &GroundTruthFile::path_for(&path),
        &GroundTruthFile {
            schema_version: SCHEMA_VERSION,
            kind: GroundTruthFile::KIND.into(),
            n: args.n,
            d: args.d,
            labels: args.labels,
            seed: args.seed,
            ground_truth: synth.ground_truth,
        },
    )?;
    Ok(path)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let (ds, sidecar) = load_source(&args.source)?;
    let spec = RunSpec::resolve(&ds, &sidecar, &args.overrides, Some(args.algo))?;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join("model.json");
    match spec.algo {
        Algo::Idr => {
            let (tr, val) = holdout_split(ds.len(), spec.train.seed)?;
            let model = IdrModel::init(spec.model.clone(), spec.train.seed)?;
            let out = train(model, &ds.select(&tr), &ds.select(&val), &spec.train, &spec.weights)?;
            let val_kl = out.soup.as_ref().map(|s| s.val_kl);
            ModelCheckpoint::new(&out.model, Some(out.best_epoch), val_kl).save(&path)?;
            write_history_csv(&args.out_dir.join("history.csv"), &out.history)?;
        }
        Algo::Bfgsll => {
            let (model, _) = bfgsll_fit(ds.samples(), &spec.fit)?;
            write_json(&path, &BaselineCheckpoint::new(model))?;
        }
        Algo::Uniform => {
            return Err(Error::InvalidArgument("the uniform predictor has nothing to train".into()));
        }
    }
    Ok(path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let (ds, _) = load_source(&args.source)?;
    let targets: Vec<LabelDistribution> = ds.samples().iter().map(|s| s.target.clone()).collect();
    let kind = checkpoint_kind(&args.checkpoint)?;
    ensure_dir(&args.out_dir)?;
    let (algo, preds) = match kind.as_str() {
        ModelCheckpoint::KIND => {
            let model = ModelCheckpoint::load(&args.checkpoint)?.into_model()?;
            check_shape("checkpoint", model.config.d_in, model.config.labels, &ds)?;
            ("idr", model.predict(ds.samples())?)
        }
        BaselineCheckpoint::KIND => {
            let ck: BaselineCheckpoint = crate::model::checkpoint::read_versioned(&args.checkpoint, &kind)?;
            check_shape("checkpoint", ck.model.n_features, ck.model.n_labels, &ds)?;
            ("bfgsll", ck.model.predict_all(ds.samples())?)
        }
        SnnCheckpoint::KIND => {
            let ck = SnnCheckpoint::load(&args.checkpoint)?;
            let model = ck.model.into_model()?;
            check_shape("checkpoint", model.config.d_in, model.config.labels, &ds)?;
            let ann = model.predict(ds.samples())?;
            let snn = snn_predict(&model, &ck.spiking, ds.samples(), args.t_sim)?;
            let mean_kl = ann
                .iter()
                .zip(&snn)
                .map(|(a, s)| kl_loss(a.values(), s.values(), KL_EPS))
                .sum::<Result<f64>>()?
                / ann.len() as f64;
            write_json(
                &args.out_dir.join("snn-agreement.json"),
                &SnnAgreement {
                    schema_version: SCHEMA_VERSION,
                    kind: "snn-agreement".into(),
                    t_sim: args.t_sim,
                    samples: ann.len(),
                    mean_kl,
                },
            )?;
            ("idr-snn", snn)
        }
        other => return Err(Error::Schema(format!("{}: unknown kind `{other}`", args.checkpoint.display()))),
    };
    let report = aggregate(&[evaluate_all(&targets, &preds)?], algo, ds.name())?;
    let path = args.out_dir.join("eval.json");
    report.write_json(&path)?;
    report.write_csv(&args.out_dir.join("eval.csv"))?;
    Ok(path)
}

pub fn cmd_cv(args: &CvArgs) -> Result<PathBuf> {
    let (ds, sidecar) = load_source(&args.source)?;
    let mut spec = RunSpec::resolve(&ds, &sidecar, &args.overrides, args.algo)?;
    if let Some(k) = args.k {
        spec.cv.k = k;
    }
    if let Some(r) = args.repeats {
        spec.cv.repeats = r;
    }
    if let Some(j) = args.jobs {
        spec.cv.jobs = j;
    }
    let out = cross_validate(&ds, spec.algo, &spec.model, &spec.train, &spec.weights, &spec.fit, &spec.cv)?;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join(format!("cv-{}.json", spec.algo));
    out.report.write_json(&path)?;
    out.report.write_csv(&args.out_dir.join(format!("cv-{}.csv", spec.algo)))?;
    Ok(path)
}

pub fn cmd_convert_snn(args: &ConvertArgs) -> Result<PathBuf> {
    let (ds, _) = load_source(&args.source)?;
    let model = ModelCheckpoint::load(&args.checkpoint)?.into_model()?;
    check_shape("checkpoint", model.config.d_in, model.config.labels, &ds)?;
    let probe = &ds.samples()[..args.calib_size.min(ds.len())];
    let net = ReluNet::from_extractor(&model.params, &model.config)?;
    let batch: Vec<Vec<f64>> = probe.iter().map(|s| s.features.clone()).collect();
    let profile = calibrate(&net, &batch, args.percentile)?;
    let spiking = convert(&net, &profile)?;
    let rel = mean_relative_error(&net, &spiking, &batch, args.t_sim)?;
    println!("mean relative error at t_sim={}: {rel:.6}", args.t_sim);
    let report = energy_report(&net, &spiking, &probe_stacks(&model, probe), args.t_sim, args.e_mac, args.e_ac)?;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join("snn.json");
    SnnCheckpoint::new(&model, profile, spiking).save(&path)?;
    write_json(&args.out_dir.join("energy.json"), &report)?;
    Ok(path)
}

pub fn cmd_energy(args: &EnergyArgs) -> Result<PathBuf> {
    let (ds, _) = load_source(&args.source)?;
    let ck = SnnCheckpoint::load(&args.checkpoint)?;
    let model = ck.model.into_model()?;
    check_shape("checkpoint", model.config.d_in, model.config.labels, &ds)?;
    let net = ReluNet::from_extractor(&model.params, &model.config)?;
    let probe = &ds.samples()[..args.probe_size.min(ds.len())];
    let report = energy_report(&net, &ck.spiking, &probe_stacks(&model, probe), args.t_sim, args.e_mac, args.e_ac)?;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join("energy.json");
    write_json(&path, &report)?;
    Ok(path)
}

/// Runs one subcommand and returns the main output file.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::ConvertSnn(a) => cmd_convert_snn(a),
        Command::Energy(a) => cmd_energy(a),
    }
}
