//! Two-stage training: per-user VQ-VAE pre-training with the pilot layer,
//! then constellation-batched fine-tuning of the whole pipeline against the
//! negative sum rate. Also the checkpoint container and constellation sampling.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::channel::{ArrayGeometry, ChannelDataset, Split};
use crate::covariance::{build_dictionary, gaussian_nll_node, mse_node, AngularDictionary, StatisticalCsi};
use crate::diffcore::{clip_global_norm, Adam, CVar, DiffError, Graph, ParameterStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::networks::{
    complex_rows, decode, encode, gnn_precode, init_model, is_gnn_param, Architecture, DecoderMode, DecoderOutput,
    ModelConfig,
};
use crate::pilot::{
    build_dft_pilots, draw_noise, learnable_pilot_forward, renormalize_pilot, PilotConstraint, PilotKind, PILOT_IM,
    PILOT_RE,
};
use crate::precoding::sum_rate_node;
use crate::rng::{self, derive_seed, SimRng};
use crate::vq::{usage_histogram, vq_node, VqNode, CODEBOOK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Finetune),
            _ => Err(Error::Format(format!("unknown stage tag {}", t))),
        }
    }
}

fn pilot_tag(k: PilotKind) -> u8 {
    match k {
        PilotKind::FixedDft => 0,
        PilotKind::Learnable => 1,
    }
}

fn pilot_from_tag(t: u8) -> Result<PilotKind> {
    match t {
        0 => Ok(PilotKind::FixedDft),
        1 => Ok(PilotKind::Learnable),
        _ => Err(Error::Format(format!("unknown pilot kind tag {}", t))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Pre-training step size; fine-tuning defaults to a tenth of it.
    pub learning_rate: f64,
    pub finetune_learning_rate: Option<f64>,
    /// Users per pre-training step.
    pub batch_size: usize,
    /// Constellations per fine-tuning step.
    pub constellation_batch: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub j_train: usize,
    /// Draw each training constellation size uniformly from `2..=j_max`.
    pub j_max: Option<usize>,
    pub snr_train_db: f64,
    /// Draw each training SNR uniformly from this range (dB).
    pub snr_range_db: Option<(f64, f64)>,
    pub beta: f64,
    pub clip_norm: f64,
    pub rho: f64,
    pub pilot_constraint: PilotConstraint,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            finetune_learning_rate: None,
            batch_size: 64,
            constellation_batch: 16,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            j_train: 4,
            j_max: None,
            snr_train_db: 15.0,
            snr_range_db: None,
            beta: 0.25,
            clip_norm: 10.0,
            rho: 1.0,
            pilot_constraint: PilotConstraint::Frobenius,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.finetune_learning_rate.is_some_and(|v| !(v > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.constellation_batch == 0 || self.j_train == 0 {
            return Err(invalid("batch sizes and J_train must be at least 1"));
        }
        if self.j_max.is_some_and(|m| m < 2) {
            return Err(invalid("j_max must be at least 2"));
        }
        if !(self.beta >= 0.0) || !(self.clip_norm > 0.0) || !(self.rho > 0.0) {
            return Err(invalid("beta, clip norm and rho must be valid"));
        }
        Ok(())
    }
}

pub fn noise_var_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Trained (or freshly initialized) model plus the settings that shaped it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub stage: Stage,
    pub config: ModelConfig,
    pub pilot_kind: PilotKind,
    pub beta: f64,
    pub seed: u64,
    pub params: ParameterStore,
}

const CKPT_MAGIC: &[u8; 8] = b"VQPCKPT\0";
const CKPT_VERSION: u32 = 1;

impl ModelCheckpoint {
    /// Fresh parameters with the pilot at the fixed DFT rows.
    pub fn initialize(config: ModelConfig, pilot_kind: PilotKind, beta: f64, seed: u64) -> Result<Self> {
        let pilot = build_dft_pilots(&config.geometry, config.n_p)?;
        let params = init_model(&config, &pilot, seed)?;
        Ok(ModelCheckpoint { stage: Stage::Pretrain, config, pilot_kind, beta, seed, params })
    }

    /// Reject a checkpoint whose architecture-defining settings differ from `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig, pilot_kind: PilotKind) -> Result<()> {
        let c = &self.config;
        let mut diffs = Vec::new();
        let mut check = |name: &str, have: String, want: String| {
            if have != want {
                diffs.push(format!("{name}: checkpoint {have}, expected {want}"));
            }
        };
        check("N_v", c.geometry.n_v.to_string(), expected.geometry.n_v.to_string());
        check("N_h", c.geometry.n_h.to_string(), expected.geometry.n_h.to_string());
        check("n_p", c.n_p.to_string(), expected.n_p.to_string());
        check("N_L", c.n_l.to_string(), expected.n_l.to_string());
        check("N_E", c.n_e.to_string(), expected.n_e.to_string());
        check("C", c.codebook_size.to_string(), expected.codebook_size.to_string());
        check("mode", format!("{:?}", c.mode), format!("{:?}", expected.mode));
        check("pilot", format!("{:?}", self.pilot_kind), format!("{:?}", pilot_kind));
        check("layers", format!("{:?}", c.arch), format!("{:?}", expected.arch));
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Fingerprint(diffs.join("; ")))
        }
    }

    /// Container layout (little-endian): magic, version, stage tag; the
    /// fingerprint (N_v, N_h, n_p, N_L, N_E, C as u32, mode and pilot kind as
    /// u8, β as f64, seed as u64); array spacing (two f64), layer widths
    /// (six u32) and the coarse-estimator flag (u8); then a u32 tensor count
    /// and for every tensor its name, rank, u64 dimensions and f64 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u8(self.stage.tag());
        for v in [c.geometry.n_v, c.geometry.n_h, c.n_p, c.n_l, c.n_e, c.codebook_size] {
            w.u32(v as u32);
        }
        w.u8(c.mode.tag());
        w.u8(pilot_tag(self.pilot_kind));
        w.f64(self.beta);
        w.u64(self.seed);
        w.f64(c.geometry.d_v);
        w.f64(c.geometry.d_h);
        let a = &c.arch;
        for v in [
            a.encoder_hidden[0],
            a.encoder_hidden[1],
            a.decoder_hidden[0],
            a.decoder_hidden[1],
            a.node_features,
            a.gnn_layers,
        ] {
            w.u32(v as u32);
        }
        w.u8(c.freeze_coarse_estimator as u8);
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {}", version)));
        }
        let stage = Stage::from_tag(r.u8()?)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let mode = DecoderMode::from_tag(r.u8()?)?;
        let pilot_kind = pilot_from_tag(r.u8()?)?;
        let beta = r.f64()?;
        let seed = r.u64()?;
        let (d_v, d_h) = (r.f64()?, r.f64()?);
        let mut widths = [0usize; 6];
        for v in &mut widths {
            *v = r.u32()? as usize;
        }
        let freeze = r.u8()? != 0;
        let geometry = ArrayGeometry::new(dims[0], dims[1], d_v, d_h).map_err(|e| Error::Format(e.to_string()))?;
        let config = ModelConfig {
            geometry,
            n_p: dims[2],
            n_l: dims[3],
            n_e: dims[4],
            codebook_size: dims[5],
            mode,
            arch: Architecture {
                encoder_hidden: [widths[0], widths[1]],
                decoder_hidden: [widths[2], widths[3]],
                node_features: widths[4],
                gnn_layers: widths[5],
            },
            freeze_coarse_estimator: freeze,
        };
        let mut ckpt = ModelCheckpoint::initialize(config, pilot_kind, beta, seed)
            .map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
        ckpt.stage = stage;

        let count = r.u32()? as usize;
        if count != ckpt.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                count,
                ckpt.params.len()
            )));
        }
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            ckpt.params
                .set_value(&name, t)
                .map_err(|e| Error::Format(format!("checkpoint tensor {}: {}", name, e)))?;
        }
        r.expect_end()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingCheckpoint(format!("{}: {}", path.display(), e)))?;
        ModelCheckpoint::from_bytes(&bytes)
    }
}

/// Samples of one split grouped by scenario.
#[derive(Clone, Debug)]
pub struct ScenarioIndex {
    pub scenarios: Vec<u32>,
    pub members: Vec<Vec<usize>>,
}

impl ScenarioIndex {
    pub fn new(dataset: &ChannelDataset, split: Split) -> Self {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in dataset.split(split) {
            map.entry(dataset.scenario_ids[i]).or_default().push(i);
        }
        let (scenarios, members) = map.into_iter().unzip();
        ScenarioIndex { scenarios, members }
    }
}

/// `J` users from pairwise distinct scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    pub samples: Vec<usize>,
    pub scenarios: Vec<u32>,
    pub noise_var: f64,
}

pub fn sample_constellation(index: &ScenarioIndex, j: usize, noise_var: f64, rng: &mut SimRng) -> Result<Constellation> {
    if j == 0 || j > index.scenarios.len() {
        return Err(invalid(format!("cannot draw {} distinct scenarios from {}", j, index.scenarios.len())));
    }
    let picks = sample_indices(rng, index.scenarios.len(), j);
    let mut samples = Vec::with_capacity(j);
    let mut scenarios = Vec::with_capacity(j);
    for k in picks.iter() {
        let m = &index.members[k];
        samples.push(m[rng.random_range(0..m.len())]);
        scenarios.push(index.scenarios[k]);
    }
    Ok(Constellation { samples, scenarios, noise_var })
}

/// Quantizer plugged into the pipeline: `(graph, z, codebook, β)`.
pub type Quantizer<'a> = dyn Fn(&mut Graph, Var, Var, f64) -> Result<VqNode> + 'a;

pub fn nearest_quantizer(g: &mut Graph, z: Var, codebook: Var, beta: f64) -> Result<VqNode> {
    vq_node(g, z, codebook, beta)
}

/// Per-user rows for one pipeline pass.
pub struct UserBatch<'a> {
    pub h: Vec<&'a [Complex64]>,
    /// One `n_p` noise draw per row.
    pub noise: Vec<Vec<Complex64>>,
}

pub struct PipelineOutput {
    pub z: Var,
    pub vq: VqNode,
    pub decoded: DecoderOutput,
    /// `L_rec` per row, `[B,1]`.
    pub reconstruction: Var,
    /// `L_rec + codebook + β commitment` per row, `[B,1]`.
    pub vqvae_loss: Var,
    /// True channels as a graph constant.
    pub h: CVar,
}

fn rows_tensor(rows: &[&[Complex64]], n: usize, part: fn(&Complex64) -> f64) -> Result<Tensor, DiffError> {
    Tensor::matrix(rows.len(), n, rows.iter().flat_map(|r| r.iter().map(part)).collect())
}

/// Pilot observation, encoder, quantizer and decoder for a batch of users.
pub fn vqvae_forward(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    dict: &AngularDictionary,
    batch: &UserBatch<'_>,
    quantizer: &Quantizer<'_>,
) -> Result<PipelineOutput> {
    let cfg = &ckpt.config;
    let (n, n_p) = (cfg.n(), cfg.n_p);
    if batch.h.is_empty() || batch.h.len() != batch.noise.len() {
        return Err(invalid("batch needs one noise draw per channel"));
    }
    if batch.h.iter().any(|h| h.len() != n) || batch.noise.iter().any(|v| v.len() != n_p) {
        return Err(invalid("batch dimensions disagree with the model"));
    }
    let h = g.complex_constant(rows_tensor(&batch.h, n, |z| z.re)?, rows_tensor(&batch.h, n, |z| z.im)?)?;
    let noise_rows: Vec<&[Complex64]> = batch.noise.iter().map(|v| v.as_slice()).collect();
    let noise = g.complex_constant(rows_tensor(&noise_rows, n_p, |z| z.re)?, rows_tensor(&noise_rows, n_p, |z| z.im)?)?;
    let y = learnable_pilot_forward(g, &ckpt.params, h, noise)?;
    let z = encode(g, &ckpt.params, cfg, y, dict)?;
    let codebook = g.param(&ckpt.params, CODEBOOK)?;
    let vq = quantizer(g, z, codebook, ckpt.beta)?;
    let decoded = decode(g, &ckpt.params, cfg, vq.f)?;
    let reconstruction = match (cfg.mode, decoded.c) {
        (DecoderMode::Statistical, Some(c)) => gaussian_nll_node(g, &batch.h, decoded.mu, c, dict)?,
        _ => mse_node(g, h, decoded.mu)?,
    };
    let t = g.add(reconstruction, vq.codebook_term)?;
    let vqvae_loss = g.add(t, vq.commitment_term)?;
    Ok(PipelineOutput { z, vq, decoded, reconstruction, vqvae_loss, h })
}

/// Scalar pre-training loss: batch mean of `L_VQ-VAE`.
pub fn pretrain_loss(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    dict: &AngularDictionary,
    batch: &UserBatch<'_>,
    quantizer: &Quantizer<'_>,
) -> Result<(Var, PipelineOutput)> {
    let out = vqvae_forward(g, ckpt, dict, batch, quantizer)?;
    let loss = g.mean(out.vqvae_loss)?;
    Ok((loss, out))
}

/// Scalar fine-tuning loss: mean over constellations of
/// `mean_users(L_VQ-VAE) - R`. Rows of `batch` are the constellations'
/// users back to back, sized by `groups`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss(
    g: &mut Graph,
    ckpt: &ModelCheckpoint,
    dict: &AngularDictionary,
    batch: &UserBatch<'_>,
    groups: &[usize],
    noise_vars: &[f64],
    rho: f64,
    quantizer: &Quantizer<'_>,
) -> Result<(Var, PipelineOutput)> {
    let out = vqvae_forward(g, ckpt, dict, batch, quantizer)?;
    let rows = batch.h.len();
    let c = match out.decoded.c {
        Some(c) => c,
        None => g.constant(Tensor::full(rows, 4 * ckpt.config.n(), 1.0))?,
    };
    let v = gnn_precode(g, &ckpt.params, &ckpt.config.arch, out.decoded.mu, c, groups, noise_vars, rho)?;
    let rate = sum_rate_node(g, out.h, v, groups, noise_vars)?;
    let mut pool = Tensor::zeros(groups.len(), rows);
    let mut start = 0;
    for (k, &j) in groups.iter().enumerate() {
        for r in start..start + j {
            pool.set(k, r, 1.0 / j as f64);
        }
        start += j;
    }
    let pool = g.constant(pool)?;
    let per_group = g.matmul(pool, out.vqvae_loss)?;
    let per_group = g.sub(per_group, rate)?;
    let loss = g.mean(per_group)?;
    Ok((loss, out))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Codeword selection counts over the final epoch.
    pub codebook_usage: Vec<usize>,
}

fn step(ckpt: &mut ModelCheckpoint, mut grads: BTreeMap<String, Tensor>, tc: &TrainConfig, lr: f64, stage: Stage) -> Result<()> {
    if ckpt.pilot_kind == PilotKind::FixedDft {
        grads.remove(PILOT_RE);
        grads.remove(PILOT_IM);
    }
    if stage == Stage::Pretrain {
        grads.retain(|name, _| !is_gnn_param(name));
    }
    clip_global_norm(&mut grads, tc.clip_norm);
    ckpt.params.adam_step(&grads, &Adam::new(lr))?;
    if ckpt.pilot_kind == PilotKind::Learnable {
        renormalize_pilot(&mut ckpt.params, tc.pilot_constraint)?;
    }
    Ok(())
}

fn diverged(e: Error, what: String) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { op }) => Error::NonFiniteLoss(format!("{what}: non-finite value in {op}")),
        other => other,
    }
}

fn training_snr(tc: &TrainConfig, rng: &mut SimRng) -> f64 {
    match tc.snr_range_db {
        Some((lo, hi)) if hi > lo => rng.random_range(lo..=hi),
        Some((lo, _)) => lo,
        None => tc.snr_train_db,
    }
}

/// Pre-train encoder, quantizer, decoder and (learnable) pilot on the
/// pre-training split. The GNN is initialized but never updated.
pub fn pretrain(
    dataset: &ChannelDataset,
    config: ModelConfig,
    pilot_kind: PilotKind,
    tc: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    tc.validate()?;
    if dataset.geometry != config.geometry {
        return Err(invalid("dataset geometry differs from the model configuration"));
    }
    let mut ckpt = ModelCheckpoint::initialize(config, pilot_kind, tc.beta, tc.seed)?;
    let dict = build_dictionary(&config.geometry);
    let split = dataset.split(Split::Pretrain);
    if split.is_empty() {
        return Err(invalid("pre-training split is empty"));
    }
    let mut report = TrainReport::default();
    for epoch in 0..tc.pretrain_epochs {
        let mut r = rng::seeded(derive_seed(tc.seed, &[1, epoch as u64]));
        let mut order = split.to_vec();
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let mut total = 0.0;
        let mut usage = vec![0; config.codebook_size];
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let noise = chunk
                .iter()
                .map(|_| draw_noise(config.n_p, noise_var_from_snr_db(training_snr(tc, &mut r)), &mut r))
                .collect();
            let batch = UserBatch { h: chunk.iter().map(|&i| dataset.samples[i].h.as_slice()).collect(), noise };
            let mut g = Graph::new();
            let what = || format!("pre-training epoch {epoch}, batch {b}, samples {:?}", chunk);
            let (loss, out) = pretrain_loss(&mut g, &ckpt, &dict, &batch, &nearest_quantizer).map_err(|e| diverged(e, what()))?;
            let value = g.value(loss).item();
            let grads = g.backward(loss).map_err(|e| diverged(e.into(), what()))?.into_params();
            if grads.values().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss(format!("{}: non-finite gradient", what())));
            }
            step(&mut ckpt, grads, tc, tc.learning_rate, Stage::Pretrain)?;
            total += value * chunk.len() as f64;
            for (u, c) in usage.iter_mut().zip(usage_histogram(out.vq.indices.iter().flatten(), config.codebook_size)) {
                *u += c;
            }
            report.steps += 1;
        }
        report.epoch_losses.push(total / split.len() as f64);
        report.codebook_usage = usage;
    }
    ckpt.stage = Stage::Pretrain;
    Ok((ckpt, report))
}

/// Fine-tune every parameter, GNN included, on constellations from the
/// fine-tuning split.
pub fn finetune(
    checkpoint: &ModelCheckpoint,
    expected: &ModelConfig,
    dataset: &ChannelDataset,
    tc: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    tc.validate()?;
    checkpoint.ensure_compatible(expected, checkpoint.pilot_kind)?;
    if checkpoint.stage != Stage::Pretrain {
        return Err(invalid("fine-tuning expects a pre-trained checkpoint"));
    }
    if dataset.geometry != checkpoint.config.geometry {
        return Err(Error::Fingerprint("dataset geometry differs from the checkpoint".into()));
    }
    let mut ckpt = checkpoint.clone();
    ckpt.params = fresh_optimizer_state(&checkpoint.params)?;
    let cfg = ckpt.config;
    let dict = build_dictionary(&cfg.geometry);
    let index = ScenarioIndex::new(dataset, Split::Finetune);
    let j_cap = tc.j_max.unwrap_or(tc.j_train).min(index.scenarios.len());
    if tc.j_train > index.scenarios.len() || j_cap == 0 {
        return Err(invalid(format!("fine-tuning split has only {} scenarios", index.scenarios.len())));
    }
    let per_epoch = (dataset.split(Split::Finetune).len() / tc.j_train).max(1);
    let lr = tc.finetune_lr();
    let mut report = TrainReport::default();
    for epoch in 0..tc.finetune_epochs {
        let mut r = rng::seeded(derive_seed(tc.seed, &[2, epoch as u64]));
        let mut total = 0.0;
        let mut usage = vec![0; cfg.codebook_size];
        let mut done = 0;
        let mut b = 0;
        while done < per_epoch {
            let k = tc.constellation_batch.min(per_epoch - done);
            let mut groups = Vec::with_capacity(k);
            let mut noise_vars = Vec::with_capacity(k);
            let mut rows = Vec::new();
            let mut noise = Vec::new();
            for _ in 0..k {
                let j = match tc.j_max {
                    Some(_) => r.random_range(2.min(j_cap)..=j_cap),
                    None => tc.j_train,
                };
                let s2 = noise_var_from_snr_db(training_snr(tc, &mut r));
                let c = sample_constellation(&index, j, s2, &mut r)?;
                for &i in &c.samples {
                    rows.push(dataset.samples[i].h.as_slice());
                    noise.push(draw_noise(cfg.n_p, s2, &mut r));
                }
                groups.push(j);
                noise_vars.push(s2);
            }
            let batch = UserBatch { h: rows, noise };
            let mut g = Graph::new();
            let what = || format!("fine-tuning epoch {epoch}, batch {b}");
            let (loss, out) = finetune_loss(&mut g, &ckpt, &dict, &batch, &groups, &noise_vars, tc.rho, &nearest_quantizer)
                .map_err(|e| diverged(e, what()))?;
            let value = g.value(loss).item();
            let grads = g.backward(loss).map_err(|e| diverged(e.into(), what()))?.into_params();
            if grads.values().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss(format!("{}: non-finite gradient", what())));
            }
            step(&mut ckpt, grads, tc, lr, Stage::Finetune)?;
            total += value * k as f64;
            for (u, c) in usage.iter_mut().zip(usage_histogram(out.vq.indices.iter().flatten(), cfg.codebook_size)) {
                *u += c;
            }
            done += k;
            b += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(total / per_epoch as f64);
        report.codebook_usage = usage;
    }
    ckpt.stage = Stage::Finetune;
    Ok((ckpt, report))
}

fn fresh_optimizer_state(params: &ParameterStore) -> Result<ParameterStore> {
    let mut out = ParameterStore::new();
    for (name, t) in params.iter() {
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

/// Decoder output for each user, observed through the checkpoint's pilot
/// with the given noise draws. In instantaneous mode `c` is all ones,
/// i.e. identity covariance.
pub fn infer_csi(
    ckpt: &ModelCheckpoint,
    dict: &AngularDictionary,
    h: &[&[Complex64]],
    noise: &[Vec<Complex64>],
) -> Result<Vec<StatisticalCsi>> {
    let mut g = Graph::new();
    let batch = UserBatch { h: h.to_vec(), noise: noise.to_vec() };
    let out = vqvae_forward(&mut g, ckpt, dict, &batch, &nearest_quantizer)?;
    let mu = complex_rows(&g, out.decoded.mu);
    let n = ckpt.config.n();
    Ok(mu
        .into_iter()
        .enumerate()
        .map(|(i, mu)| {
            let c = match out.decoded.c {
                Some(c) => g.value(c).row_slice(i).to_vec(),
                None => vec![1.0; 4 * n],
            };
            StatisticalCsi { mu, c }
        })
        .collect())
}
