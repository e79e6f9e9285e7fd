//! Experiment harness: configuration, per-method evaluation over shared
//! constellation sets, sweeps, CSV output, SVG plots and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::channel::{build_dataset, ArrayGeometry, ChannelDataset, DatasetConfig, Split};
use crate::covariance::build_dictionary;
use crate::error::{invalid, Error, Result};
use crate::networks::{precode_constellation, Architecture, DecoderMode, ModelConfig};
use crate::pilot::{draw_noise, PilotConstraint, PilotKind};
use crate::precoding::{mrt, sum_rate, swmmse, wmmse, zf, PrecoderSet};
use crate::rng::{self, derive_seed};
use crate::training::{
    finetune, infer_csi, noise_var_from_snr_db, pretrain, sample_constellation, Constellation, ModelCheckpoint,
    ScenarioIndex, TrainConfig,
};
use crate::vq::feedback_bits;

pub const CSV_HEADER: &str = "sweep_var,value,method,mean_sum_rate,std_err,n_constellations,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    VqvaeSGnnLearntP,
    VqaeIGnnLearntP,
    VqvaeSGnn,
    VqaeIGnn,
    VqvaeSSwmmse,
    VqaeIWmmse,
    WmmsePerfectCsi,
    Mrt,
    Zf,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::VqvaeSGnnLearntP,
        Method::VqaeIGnnLearntP,
        Method::VqvaeSGnn,
        Method::VqaeIGnn,
        Method::VqvaeSSwmmse,
        Method::VqaeIWmmse,
        Method::WmmsePerfectCsi,
        Method::Mrt,
        Method::Zf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VqvaeSGnnLearntP => "vqvae_s_gnn_learntP",
            Method::VqaeIGnnLearntP => "vqae_i_gnn_learntP",
            Method::VqvaeSGnn => "vqvae_s_gnn",
            Method::VqaeIGnn => "vqae_i_gnn",
            Method::VqvaeSSwmmse => "vqvae_s_swmmse",
            Method::VqaeIWmmse => "vqae_i_wmmse",
            Method::WmmsePerfectCsi => "wmmse_perfect_csi",
            Method::Mrt => "mrt",
            Method::Zf => "zf",
        }
    }

    /// Curve label used in plots.
    pub fn legend(self) -> &'static str {
        match self {
            Method::VqvaeSGnnLearntP => "VQ-VAE(S) + GNN, learnt P",
            Method::VqaeIGnnLearntP => "VQ-AE(I) + GNN, learnt P",
            Method::VqvaeSGnn => "VQ-VAE(S) + GNN",
            Method::VqaeIGnn => "VQ-AE(I) + GNN",
            Method::VqvaeSSwmmse => "VQ-VAE(S) + SWMMSE",
            Method::VqaeIWmmse => "VQ-AE(I) + WMMSE",
            Method::WmmsePerfectCsi => "WMMSE, perfect CSI",
            Method::Mrt => "MRT",
            Method::Zf => "ZF",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        if let Some(m) = Method::ALL.iter().find(|m| m.name() == name) {
            return Ok(*m);
        }
        match name {
            "gmm_gnn" | "gmm_swmmse" => Err(Error::NotImplemented(format!(
                "method {name} relies on a separately trained GMM feedback model and is out of scope"
            ))),
            _ => Err(invalid(format!("unknown method {name:?}"))),
        }
    }

    /// Trained model the method draws its feedback from.
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::VqvaeSGnnLearntP => Some(Variant::VqvaeSLearntP),
            Method::VqaeIGnnLearntP => Some(Variant::VqaeILearntP),
            Method::VqvaeSGnn | Method::VqvaeSSwmmse => Some(Variant::VqvaeSDftP),
            Method::VqaeIGnn | Method::VqaeIWmmse => Some(Variant::VqaeIDftP),
            Method::WmmsePerfectCsi | Method::Mrt | Method::Zf => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    VqvaeSLearntP,
    VqaeILearntP,
    VqvaeSDftP,
    VqaeIDftP,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::VqvaeSLearntP => "vqvae_s_learntP",
            Variant::VqaeILearntP => "vqae_i_learntP",
            Variant::VqvaeSDftP => "vqvae_s_dftP",
            Variant::VqaeIDftP => "vqae_i_dftP",
        }
    }

    pub fn mode(self) -> DecoderMode {
        match self {
            Variant::VqvaeSLearntP | Variant::VqvaeSDftP => DecoderMode::Statistical,
            Variant::VqaeILearntP | Variant::VqaeIDftP => DecoderMode::Instantaneous,
        }
    }

    pub fn pilot_kind(self) -> PilotKind {
        match self {
            Variant::VqvaeSLearntP | Variant::VqaeILearntP => PilotKind::Learnable,
            Variant::VqvaeSDftP | Variant::VqaeIDftP => PilotKind::FixedDft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    J,
    B,
    Np,
    Snr,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::J => "J",
            SweepAxis::B => "B",
            SweepAxis::Np => "n_p",
            SweepAxis::Snr => "snr",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "J" | "j" => Ok(SweepAxis::J),
            "B" | "b" => Ok(SweepAxis::B),
            "n_p" | "np" => Ok(SweepAxis::Np),
            "snr" | "SNR" => Ok(SweepAxis::Snr),
            _ => Err(invalid(format!("unknown sweep axis {s:?}; expected J, B, n_p or snr"))),
        }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub geometry: ArrayGeometry,
    pub n_p: usize,
    pub n_l: usize,
    pub n_e: usize,
    pub codebook_size: usize,
    pub j: usize,
    pub j_values: Vec<usize>,
    pub codebook_sizes: Vec<usize>,
    pub n_p_values: Vec<usize>,
    pub snr_db: f64,
    pub snr_values: Vec<f64>,
    pub rho: f64,
    pub n_constellations: usize,
    pub n_scenarios: usize,
    pub samples_per_scenario: usize,
    pub eval_size: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub train_missing: bool,
    pub arch: Architecture,
    pub freeze_coarse_estimator: bool,
    pub train: TrainConfig,
    pub swmmse_samples: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 2x8 array, 2,000 evaluation samples and 100
    /// constellations per point.
    pub fn desk() -> Self {
        ExperimentConfig {
            geometry: ArrayGeometry::desk(),
            n_p: 4,
            n_l: 8,
            n_e: 2,
            codebook_size: 16,
            j: 4,
            j_values: vec![2, 4, 6],
            codebook_sizes: vec![16, 64, 256],
            n_p_values: vec![2, 4, 8],
            snr_db: 15.0,
            snr_values: vec![5.0, 10.0, 15.0, 20.0],
            rho: 1.0,
            n_constellations: 100,
            n_scenarios: 200,
            samples_per_scenario: 30,
            eval_size: 2000,
            methods: Method::ALL.to_vec(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoint_dir: PathBuf::from("out/checkpoints"),
            dataset: None,
            train_missing: false,
            arch: Architecture::default(),
            freeze_coarse_estimator: false,
            train: TrainConfig {
                beta: 1.0,
                batch_size: 8,
                constellation_batch: 4,
                finetune_epochs: 20,
                ..TrainConfig::default()
            },
            swmmse_samples: crate::precoding::DEFAULT_SAA_SAMPLES,
            max_iter: crate::precoding::DEFAULT_MAX_ITER,
            tol: crate::precoding::DEFAULT_TOL,
        }
    }

    /// 4x16 array, 40 feedback bits, 8 pilots, 500 constellations over
    /// 10,000 evaluation samples.
    pub fn paper_scale() -> Self {
        ExperimentConfig {
            geometry: ArrayGeometry::full_scale(),
            n_p: 8,
            codebook_size: 1024,
            j_values: vec![2, 4, 6, 8],
            codebook_sizes: vec![16, 64, 256, 1024],
            n_p_values: vec![4, 8, 12, 16],
            n_constellations: 500,
            n_scenarios: 1000,
            samples_per_scenario: 30,
            eval_size: 10_000,
            ..ExperimentConfig::desk()
        }
    }

    pub fn noise_var(&self) -> f64 {
        noise_var_from_snr_db(self.snr_db)
    }

    pub fn model_config(&self, mode: DecoderMode, n_p: usize, codebook_size: usize) -> ModelConfig {
        ModelConfig {
            geometry: self.geometry,
            n_p,
            n_l: self.n_l,
            n_e: self.n_e,
            codebook_size,
            mode,
            arch: self.arch,
            freeze_coarse_estimator: self.freeze_coarse_estimator,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, rho: self.rho, ..self.train.clone() }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            geometry: self.geometry,
            n_scenarios: self.n_scenarios,
            samples_per_scenario: self.samples_per_scenario,
            eval_size: self.eval_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.n_constellations == 0 {
            return Err(Error::Config("n_constellations must be at least 1".into()));
        }
        if self.j == 0 || self.j_values.contains(&0) {
            return Err(Error::Config("user counts must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        self.model_config(DecoderMode::Statistical, self.n_p, self.codebook_size)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("{key}: cannot parse {v:?} as {what}"));
        let int = || v.parse::<usize>().map_err(|_| bad("an unsigned integer"));
        let real = || v.parse::<f64>().map_err(|_| bad("a number"));
        let boolean = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("a boolean")),
        };
        let ints = || v.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad("a list of integers"))).collect::<Result<Vec<_>>>();
        let reals = || v.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad("a list of numbers"))).collect::<Result<Vec<_>>>();
        let pair = || -> Result<[usize; 2]> {
            let l = ints()?;
            <[usize; 2]>::try_from(l).map_err(|_| bad("two integers"))
        };
        let g = &mut self.geometry;
        match key {
            "n_v" => g.n_v = int()?,
            "n_h" => g.n_h = int()?,
            "d_v" => g.d_v = real()?,
            "d_h" => g.d_h = real()?,
            "n_p" => self.n_p = int()?,
            "n_l" => self.n_l = int()?,
            "n_e" => self.n_e = int()?,
            "codebook_size" => self.codebook_size = int()?,
            "j" => self.j = int()?,
            "j_values" => self.j_values = ints()?,
            "codebook_sizes" => self.codebook_sizes = ints()?,
            "n_p_values" => self.n_p_values = ints()?,
            "snr_db" => self.snr_db = real()?,
            "snr_values" => self.snr_values = reals()?,
            "rho" => self.rho = real()?,
            "n_constellations" => self.n_constellations = int()?,
            "n_scenarios" => self.n_scenarios = int()?,
            "samples_per_scenario" => self.samples_per_scenario = int()?,
            "eval_size" => self.eval_size = int()?,
            "methods" => {
                self.methods = if v == "all" {
                    Method::ALL.to_vec()
                } else {
                    v.split(',').map(|s| Method::parse(s.trim())).collect::<Result<Vec<_>>>()?
                }
            }
            "seed" => self.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "dataset" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "train_missing" => self.train_missing = boolean()?,
            "encoder_hidden" => self.arch.encoder_hidden = pair()?,
            "decoder_hidden" => self.arch.decoder_hidden = pair()?,
            "node_features" => self.arch.node_features = int()?,
            "gnn_layers" => self.arch.gnn_layers = int()?,
            "freeze_coarse_estimator" => self.freeze_coarse_estimator = boolean()?,
            "learning_rate" => self.train.learning_rate = real()?,
            "finetune_learning_rate" => {
                self.train.finetune_learning_rate = if v == "auto" { None } else { Some(real()?) }
            }
            "batch_size" => self.train.batch_size = int()?,
            "constellation_batch" => self.train.constellation_batch = int()?,
            "pretrain_epochs" => self.train.pretrain_epochs = int()?,
            "finetune_epochs" => self.train.finetune_epochs = int()?,
            "j_train" => self.train.j_train = int()?,
            "j_max" => self.train.j_max = if v == "none" { None } else { Some(int()?) },
            "snr_train_db" => self.train.snr_train_db = real()?,
            "snr_train_range" => {
                self.train.snr_range_db = if v == "none" {
                    None
                } else {
                    let r = reals()?;
                    match r.as_slice() {
                        [lo, hi] if lo <= hi => Some((*lo, *hi)),
                        _ => return Err(bad("two increasing numbers")),
                    }
                }
            }
            "beta" => self.train.beta = real()?,
            "clip_norm" => self.train.clip_norm = real()?,
            "pilot_constraint" => {
                self.train.pilot_constraint = match v {
                    "frobenius" => PilotConstraint::Frobenius,
                    "per_row" => PilotConstraint::PerRow,
                    _ => return Err(bad("frobenius or per_row")),
                }
            }
            "swmmse_samples" => self.swmmse_samples = int()?,
            "max_iter" => self.max_iter = int()?,
            "tol" => self.tol = real()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {}", i + 1, m)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Every setting as ordered `key=value` pairs; feeding them back through
    /// [`ExperimentConfig::set`] reproduces the configuration.
    pub fn snapshot(&self) -> Vec<(&'static str, String)> {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let t = &self.train;
        vec![
            ("n_v", self.geometry.n_v.to_string()),
            ("n_h", self.geometry.n_h.to_string()),
            ("d_v", self.geometry.d_v.to_string()),
            ("d_h", self.geometry.d_h.to_string()),
            ("n_p", self.n_p.to_string()),
            ("n_l", self.n_l.to_string()),
            ("n_e", self.n_e.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("j", self.j.to_string()),
            ("j_values", list(&self.j_values)),
            ("codebook_sizes", list(&self.codebook_sizes)),
            ("n_p_values", list(&self.n_p_values)),
            ("snr_db", self.snr_db.to_string()),
            ("snr_values", list(&self.snr_values)),
            ("rho", self.rho.to_string()),
            ("n_constellations", self.n_constellations.to_string()),
            ("n_scenarios", self.n_scenarios.to_string()),
            ("samples_per_scenario", self.samples_per_scenario.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("methods", self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint_dir", self.checkpoint_dir.display().to_string()),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("train_missing", self.train_missing.to_string()),
            ("encoder_hidden", list(&self.arch.encoder_hidden)),
            ("decoder_hidden", list(&self.arch.decoder_hidden)),
            ("node_features", self.arch.node_features.to_string()),
            ("gnn_layers", self.arch.gnn_layers.to_string()),
            ("freeze_coarse_estimator", self.freeze_coarse_estimator.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("finetune_learning_rate", t.finetune_learning_rate.map_or("auto".into(), |v| v.to_string())),
            ("batch_size", t.batch_size.to_string()),
            ("constellation_batch", t.constellation_batch.to_string()),
            ("pretrain_epochs", t.pretrain_epochs.to_string()),
            ("finetune_epochs", t.finetune_epochs.to_string()),
            ("j_train", t.j_train.to_string()),
            ("j_max", t.j_max.map_or("none".into(), |v| v.to_string())),
            ("snr_train_db", t.snr_train_db.to_string()),
            ("snr_train_range", t.snr_range_db.map_or("none".into(), |(a, b)| format!("{a},{b}"))),
            ("beta", t.beta.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            (
                "pilot_constraint",
                match t.pilot_constraint {
                    PilotConstraint::Frobenius => "frobenius".into(),
                    PilotConstraint::PerRow => "per_row".into(),
                },
            ),
            ("swmmse_samples", self.swmmse_samples.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("tol", self.tol.to_string()),
        ]
    }
}

/// Dataset named in the config, or a fresh one generated from it.
pub fn load_or_build_dataset(cfg: &ExperimentConfig) -> Result<ChannelDataset> {
    match &cfg.dataset {
        Some(path) => {
            let ds = ChannelDataset::load(path)?;
            if ds.geometry != cfg.geometry {
                return Err(Error::Fingerprint(format!(
                    "dataset {} has a {}x{} array, config expects {}x{}",
                    path.display(),
                    ds.geometry.n_v,
                    ds.geometry.n_h,
                    cfg.geometry.n_v,
                    cfg.geometry.n_h
                )));
            }
            Ok(ds)
        }
        None => build_dataset(&cfg.dataset_config()),
    }
}

pub fn checkpoint_path(dir: &Path, variant: Variant, n_p: usize, codebook_size: usize) -> PathBuf {
    dir.join(format!("{}_np{}_C{}.ckpt", variant.name(), n_p, codebook_size))
}

pub fn pretrain_checkpoint_path(dir: &Path, variant: Variant, n_p: usize, codebook_size: usize) -> PathBuf {
    dir.join(format!("{}_np{}_C{}.pretrain.ckpt", variant.name(), n_p, codebook_size))
}

/// Load a checkpoint and check it against the configuration it will serve.
pub fn load_checkpoint_for(
    cfg: &ExperimentConfig,
    path: &Path,
    variant: Variant,
    n_p: usize,
    codebook_size: usize,
) -> Result<ModelCheckpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let ckpt = ModelCheckpoint::load(path)?;
    ckpt.ensure_compatible(&cfg.model_config(variant.mode(), n_p, codebook_size), variant.pilot_kind())?;
    Ok(ckpt)
}

/// Pre-train and fine-tune one variant, saving both checkpoints.
pub fn train_variant(
    cfg: &ExperimentConfig,
    dataset: &ChannelDataset,
    variant: Variant,
    n_p: usize,
    codebook_size: usize,
) -> Result<ModelCheckpoint> {
    let model = cfg.model_config(variant.mode(), n_p, codebook_size);
    let tc = cfg.train_config();
    let (pre, _) = pretrain(dataset, model, variant.pilot_kind(), &tc)?;
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    pre.save(&pretrain_checkpoint_path(&cfg.checkpoint_dir, variant, n_p, codebook_size))?;
    let (fine, _) = finetune(&pre, &model, dataset, &tc)?;
    fine.save(&checkpoint_path(&cfg.checkpoint_dir, variant, n_p, codebook_size))?;
    Ok(fine)
}

fn obtain_checkpoint(
    cfg: &ExperimentConfig,
    dataset: &ChannelDataset,
    variant: Variant,
    n_p: usize,
    codebook_size: usize,
) -> Result<ModelCheckpoint> {
    let path = checkpoint_path(&cfg.checkpoint_dir, variant, n_p, codebook_size);
    if !path.exists() && cfg.train_missing {
        return train_variant(cfg, dataset, variant, n_p, codebook_size);
    }
    load_checkpoint_for(cfg, &path, variant, n_p, codebook_size)
}

/// The shared evaluation constellations for `(seed, J)`.
pub fn eval_constellations(
    cfg: &ExperimentConfig,
    dataset: &ChannelDataset,
    j: usize,
    noise_var: f64,
) -> Result<Vec<Constellation>> {
    let index = ScenarioIndex::new(dataset, Split::Eval);
    let mut r = rng::seeded(derive_seed(cfg.seed, &[0xE0, j as u64]));
    (0..cfg.n_constellations).map(|_| sample_constellation(&index, j, noise_var, &mut r)).collect()
}

/// Sum rate of `method` on each constellation, evaluated on the true channels.
pub fn evaluate_method(
    method: Method,
    checkpoint: Option<&ModelCheckpoint>,
    dataset: &ChannelDataset,
    constellations: &[Constellation],
    cfg: &ExperimentConfig,
) -> Result<Vec<f64>> {
    if method.variant().is_some() && checkpoint.is_none() {
        return Err(Error::MissingCheckpoint(format!("method {} needs a trained model", method.name())));
    }
    let dict = checkpoint.map(|c| build_dictionary(&c.config.geometry));
    constellations
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let h: Vec<Vec<Complex64>> = c.samples.iter().map(|&i| dataset.samples[i].h.clone()).collect();
            let v = match (checkpoint, &dict) {
                (Some(ckpt), Some(dict)) => {
                    let noise: Vec<Vec<Complex64>> = (0..h.len())
                        .map(|u| {
                            let mut r = rng::seeded(derive_seed(cfg.seed, &[0xA0, k as u64, u as u64]));
                            draw_noise(ckpt.config.n_p, c.noise_var, &mut r)
                        })
                        .collect();
                    let rows: Vec<&[Complex64]> = h.iter().map(|x| x.as_slice()).collect();
                    let stats = infer_csi(ckpt, dict, &rows, &noise)?;
                    match method {
                        Method::VqvaeSSwmmse => {
                            let mut r = rng::seeded(derive_seed(cfg.seed, &[0xB0, k as u64]));
                            swmmse(&stats, dict, cfg.rho, c.noise_var, cfg.swmmse_samples, cfg.max_iter, cfg.tol, &mut r)?.0
                        }
                        Method::VqaeIWmmse => {
                            let mu: Vec<Vec<Complex64>> = stats.iter().map(|s| s.mu.clone()).collect();
                            wmmse(&mu, cfg.rho, c.noise_var, cfg.max_iter, cfg.tol)?.0
                        }
                        _ => PrecoderSet {
                            v: precode_constellation(&ckpt.params, &ckpt.config.arch, &stats, c.noise_var, cfg.rho)?,
                            rho: cfg.rho,
                        },
                    }
                }
                _ => match method {
                    Method::WmmsePerfectCsi => wmmse(&h, cfg.rho, c.noise_var, cfg.max_iter, cfg.tol)?.0,
                    Method::Mrt => mrt(&h, cfg.rho)?,
                    Method::Zf => zf(&h, cfg.rho)?,
                    _ => unreachable!("learned methods checked above"),
                },
            };
            sum_rate(&h, &v, c.noise_var)
        })
        .collect()
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn summarize(rates: &[f64]) -> (f64, f64) {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if rates.len() < 2 {
        return (mean, 0.0);
    }
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sweep_var: String,
    pub value: f64,
    pub method: String,
    pub mean_sum_rate: f64,
    pub std_err: f64,
    pub n_constellations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// One evaluation point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub j: usize,
    pub n_p: usize,
    pub codebook_size: usize,
    pub snr_db: f64,
}

pub fn sweep_points(axis: SweepAxis, cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let base = SweepPoint { value: 0.0, j: cfg.j, n_p: cfg.n_p, codebook_size: cfg.codebook_size, snr_db: cfg.snr_db };
    let pts: Vec<SweepPoint> = match axis {
        SweepAxis::J => cfg.j_values.iter().map(|&j| SweepPoint { value: j as f64, j, ..base }).collect(),
        SweepAxis::Np => cfg.n_p_values.iter().map(|&n_p| SweepPoint { value: n_p as f64, n_p, ..base }).collect(),
        SweepAxis::Snr => cfg.snr_values.iter().map(|&s| SweepPoint { value: s, snr_db: s, ..base }).collect(),
        SweepAxis::B => cfg
            .codebook_sizes
            .iter()
            .map(|&c| Ok(SweepPoint { value: feedback_bits(cfg.n_l, cfg.n_e, c)? as f64, codebook_size: c, ..base }))
            .collect::<Result<_>>()?,
    };
    if pts.is_empty() {
        return Err(Error::Config(format!("no values configured for the {} axis", axis.name())));
    }
    Ok(pts)
}

/// Evaluate every configured method at every point of `axis`.
pub fn run_sweep(axis: SweepAxis, cfg: &ExperimentConfig, dataset: &ChannelDataset) -> Result<SweepResult> {
    cfg.validate()?;
    let points = sweep_points(axis, cfg)?;
    if !cfg.train_missing {
        let mut missing = Vec::new();
        for p in &points {
            for m in &cfg.methods {
                if let Some(v) = m.variant() {
                    let path = checkpoint_path(&cfg.checkpoint_dir, v, p.n_p, p.codebook_size);
                    if !path.exists() {
                        missing.push(format!("({}={}, {}) -> {}", axis.name(), p.value, m.name(), path.display()));
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCheckpoint(format!("missing checkpoints: {}", missing.join(", "))));
        }
    }
    let mut rows = Vec::new();
    let mut models: BTreeMap<(Variant, usize, usize), ModelCheckpoint> = BTreeMap::new();
    for p in &points {
        let noise_var = noise_var_from_snr_db(p.snr_db);
        let constellations = eval_constellations(cfg, dataset, p.j, noise_var)?;
        for &m in &cfg.methods {
            let ckpt = match m.variant() {
                Some(v) => {
                    let key = (v, p.n_p, p.codebook_size);
                    if !models.contains_key(&key) {
                        models.insert(key, obtain_checkpoint(cfg, dataset, v, p.n_p, p.codebook_size)?);
                    }
                    models.get(&key)
                }
                None => None,
            };
            let rates = evaluate_method(m, ckpt, dataset, &constellations, cfg)?;
            let (mean, se) = summarize(&rates);
            rows.push(SweepRow {
                sweep_var: axis.name().to_string(),
                value: p.value,
                method: m.name().to_string(),
                mean_sum_rate: mean,
                std_err: se,
                n_constellations: rates.len(),
                seed: cfg.seed,
            });
        }
    }
    Ok(SweepResult { rows })
}

pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.sweep_var.clone(),
            r.value.to_string(),
            r.method.clone(),
            r.mean_sum_rate.to_string(),
            r.std_err.to_string(),
            r.n_constellations.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if !saw_header {
            let header: Vec<&str> = rec.iter().collect();
            if header.join(",") != CSV_HEADER {
                return Err(Error::Parse { line, msg: format!("expected header {CSV_HEADER:?}") });
            }
            saw_header = true;
            continue;
        }
        if rec.len() != 7 {
            return Err(Error::Parse { line, msg: format!("expected 7 fields, found {}", rec.len()) });
        }
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number {:?}", field(i)) })
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse::<u64>().map_err(|_| Error::Parse { line, msg: format!("bad integer {:?}", field(i)) })
        };
        rows.push(SweepRow {
            sweep_var: field(0).to_string(),
            value: num(1)?,
            method: field(2).to_string(),
            mean_sum_rate: num(3)?,
            std_err: num(4)?,
            n_constellations: int(5)? as usize,
            seed: int(6)?,
        });
    }
    if !saw_header {
        return Err(Error::Parse { line: 1, msg: "empty file".into() });
    }
    Ok(rows)
}

const PALETTE: [&str; 9] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];

/// Sum rate over the sweep variable: one polyline per method with
/// standard-error bars.
pub fn plot_svg(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(invalid("nothing to plot: no rows"));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 230.0, 30.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (mut x0, mut x1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.value), b.max(r.value)));
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let y0 = rows.iter().map(|r| r.mean_sum_rate - r.std_err).fold(0.0, f64::min);
    let mut y1 = rows.iter().map(|r| r.mean_sum_rate + r.std_err).fold(f64::NEG_INFINITY, f64::max) * 1.1;
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let sweep_var = &rows[0].sweep_var;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, sx(fx), top + ph + 18.0, trim_num(fx));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, sy(fy) + 4.0, trim_num(fy));
        let _ = writeln!(s, r##"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##, sy(fy), left + pw, sy(fy));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 20.0, xml_escape(sweep_var));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">sum rate [bit/s/Hz]</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, m) in methods.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<&SweepRow> = rows.iter().filter(|r| r.method == *m).collect();
        pts.sort_by(|a, b| a.value.total_cmp(&b.value));
        let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", sx(r.value), sy(r.mean_sum_rate))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" data-method="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            xml_escape(m),
            coords.join(" ")
        );
        for r in &pts {
            let (x, lo, hi) = (sx(r.value), sy(r.mean_sum_rate - r.std_err), sy(r.mean_sum_rate + r.std_err));
            let _ = writeln!(s, r#"<line class="errbar" x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="{color}"/>"#);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sy(r.mean_sum_rate));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let label = Method::parse(m).map(|x| x.legend()).unwrap_or(m);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Write `{dir}/{command}.manifest`: the command, the configuration
/// snapshot, the seed and the SHA-256 of every artifact.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, artifacts: &[PathBuf]) -> Result<PathBuf> {
    let mut s = String::new();
    let _ = writeln!(s, "command={command}");
    let _ = writeln!(s, "seed={}", cfg.seed);
    for (k, v) in cfg.snapshot() {
        let _ = writeln!(s, "config.{k}={v}");
    }
    for a in artifacts {
        let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(s, "artifact.{name}.sha256={}", sha256_file(a)?);
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{command}.manifest"));
    std::fs::write(&path, s)?;
    Ok(path)
}
