//! Trainable blocks: coarse estimator, encoder, decoder heads, the precoder
//! GNN and its power-normalization layer.
//!
//! Every block reads its weights from a [`ParameterStore`] by name, so the
//! same store drives training, evaluation and checkpointing. Batches are
//! row-stacked: one row per user. GNN batches hold several constellations
//! back to back, described by their group sizes.

use num_complex::Complex64;
use rand::Rng;

use crate::channel::ArrayGeometry;
use crate::covariance::{AngularDictionary, StatisticalCsi, C_FLOOR};
use crate::diffcore::{CVar, DiffError, Graph, ParameterStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::pilot::{register_pilot, PilotMatrix, PILOT_IM, PILOT_RE};
use crate::rng;
use crate::vq::{Codebook, CODEBOOK};

pub const COARSE_RE: &str = "enc.coarse.re";
pub const COARSE_IM: &str = "enc.coarse.im";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// VQ-VAE: the decoder emits a mean and angular powers.
    Statistical,
    /// VQ-AE: mean only, covariance fixed to identity.
    Instantaneous,
}

impl DecoderMode {
    pub fn tag(self) -> u8 {
        match self {
            DecoderMode::Statistical => 0,
            DecoderMode::Instantaneous => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DecoderMode::Statistical),
            1 => Ok(DecoderMode::Instantaneous),
            t => Err(Error::Format(format!("unknown decoder mode tag {}", t))),
        }
    }
}

/// Hidden layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub encoder_hidden: [usize; 2],
    pub decoder_hidden: [usize; 2],
    pub node_features: usize,
    pub gnn_layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { encoder_hidden: [256, 128], decoder_hidden: [128, 256], node_features: 128, gnn_layers: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: ArrayGeometry,
    pub n_p: usize,
    pub n_l: usize,
    pub n_e: usize,
    pub codebook_size: usize,
    pub mode: DecoderMode,
    pub arch: Architecture,
    /// Use `conj(P)` taken from the current pilot instead of a trained map.
    pub freeze_coarse_estimator: bool,
}

impl ModelConfig {
    pub fn n(&self) -> usize {
        self.geometry.n()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.n_p == 0 || self.n_p > n {
            return Err(invalid(format!("pilot count {} must be in 1..={}", self.n_p, n)));
        }
        crate::vq::feedback_bits(self.n_l, self.n_e, self.codebook_size)?;
        let a = &self.arch;
        if a.encoder_hidden.contains(&0) || a.decoder_hidden.contains(&0) || a.node_features == 0 {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Weight `[fan_in, fan_out]` and bias `[1, fan_out]` named `{prefix}.w` / `{prefix}.b`.
/// GNN weights draw from a He-uniform range so the signal survives the softplus stack.
#[derive(Clone, Debug)]
struct Dense {
    w: String,
    b: String,
}

impl Dense {
    fn named(prefix: &str) -> Self {
        Dense { w: format!("{prefix}.w"), b: format!("{prefix}.b") }
    }

    fn register(&self, store: &mut ParameterStore, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        let mut r = rng::seeded(rng::derive_seed(seed, &[name_tag(&self.w)]));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wb = if is_gnn_param(&self.w) { 6f64.sqrt() * bound } else { bound };
        let w = (0..fan_in * fan_out).map(|_| r.random_range(-wb..=wb)).collect();
        let b = (0..fan_out).map(|_| r.random_range(-bound..=bound)).collect();
        store.insert(self.w.clone(), Tensor::matrix(fan_in, fan_out, w)?)?;
        store.insert(self.b.clone(), Tensor::matrix(1, fan_out, b)?)?;
        Ok(())
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// FNV-1a, used only to derive per-layer seeds from parameter names.
fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn softplus_dense(g: &mut Graph, store: &ParameterStore, layer: &str, x: Var) -> Result<Var, DiffError> {
    let y = Dense::named(layer).forward(g, store, x)?;
    g.softplus(y)
}

fn msg_layer(l: usize) -> String {
    format!("gnn.msg{l}")
}

fn upd_layer(l: usize) -> String {
    format!("gnn.upd{l}")
}

/// Register every parameter of the pipeline: pilot, coarse estimator,
/// encoder, codebook, decoder and GNN.
pub fn init_model(cfg: &ModelConfig, pilot: &PilotMatrix, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let n = cfg.n();
    if pilot.n != n || pilot.n_p != cfg.n_p {
        return Err(invalid(format!("pilot is {}x{}, model expects {}x{}", pilot.n_p, pilot.n, cfg.n_p, n)));
    }
    let a = cfg.arch;
    let mut store = ParameterStore::new();
    register_pilot(&mut store, pilot)?;

    let (re, im) = pilot.to_tensors();
    store.insert(COARSE_RE, re)?;
    store.insert(COARSE_IM, im.map(|v| -v))?;

    let [e0, e1] = a.encoder_hidden;
    Dense::named("enc.l0").register(&mut store, 8 * n, e0, seed)?;
    Dense::named("enc.l1").register(&mut store, e0, e1, seed)?;
    Dense::named("enc.out").register(&mut store, e1, cfg.n_l, seed)?;

    let mut r = rng::seeded(rng::derive_seed(seed, &[name_tag(CODEBOOK)]));
    let cb = Codebook::random(cfg.codebook_size, cfg.n_e, &mut r)?;
    store.insert(CODEBOOK, cb.tensor().clone())?;

    let [d0, d1] = a.decoder_hidden;
    Dense::named("dec.l0").register(&mut store, cfg.n_l, d0, seed)?;
    Dense::named("dec.l1").register(&mut store, d0, d1, seed)?;
    Dense::named("dec.mu").register(&mut store, d1, 2 * n, seed)?;
    if cfg.mode == DecoderMode::Statistical {
        Dense::named("dec.c").register(&mut store, d1, 4 * n, seed)?;
    }

    let d = a.node_features;
    Dense::named("gnn.feat").register(&mut store, 6 * n + 1, d, seed)?;
    for l in 0..a.gnn_layers {
        Dense::named(&msg_layer(l)).register(&mut store, d, d, seed)?;
        Dense::named(&upd_layer(l)).register(&mut store, 2 * d, d, seed)?;
    }
    Dense::named("gnn.read0").register(&mut store, d, d, seed)?;
    Dense::named("gnn.read1").register(&mut store, d, 2 * n, seed)?;
    Ok(store)
}

pub fn is_gnn_param(name: &str) -> bool {
    name.starts_with("gnn.")
}

/// Coarse channel estimate `ĥ = y G` (row form of `ĥ = Gᵀ y`).
pub fn coarse_estimate(g: &mut Graph, store: &ParameterStore, y: CVar, freeze: bool) -> Result<CVar, DiffError> {
    let map = if freeze {
        let p = CVar::new(g.param(store, PILOT_RE)?, g.param(store, PILOT_IM)?);
        g.conj(p)?
    } else {
        CVar::new(g.param(store, COARSE_RE)?, g.param(store, COARSE_IM)?)
    };
    g.complex_matmul(y, map)
}

/// `Qᵀ` split into real and imaginary `N x 4N` tensors.
pub fn dictionary_transpose(dict: &AngularDictionary) -> (Tensor, Tensor) {
    let (rows, cols) = (dict.q.nrows(), dict.q.ncols());
    let mut re = Tensor::zeros(cols, rows);
    let mut im = Tensor::zeros(cols, rows);
    for k in 0..rows {
        for i in 0..cols {
            let z = dict.q[(k, i)];
            re.set(i, k, z.re);
            im.set(i, k, z.im);
        }
    }
    (re, im)
}

/// Encoder input `[Re(Qĥ), Im(Qĥ)]` per row, `[B, 8N]`.
pub fn preprocess(g: &mut Graph, h_hat: CVar, dict: &AngularDictionary) -> Result<Var, DiffError> {
    let (re, im) = dictionary_transpose(dict);
    let qt = g.complex_constant(re, im)?;
    let x = g.complex_matmul(h_hat, qt)?;
    g.complex_to_real(x)
}

/// Latents `z` `[B, N_L]` from observations `y` `[B, n_p]`.
pub fn encode(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    y: CVar,
    dict: &AngularDictionary,
) -> Result<Var, DiffError> {
    let h_hat = coarse_estimate(g, store, y, cfg.freeze_coarse_estimator)?;
    let x = preprocess(g, h_hat, dict)?;
    let x = softplus_dense(g, store, "enc.l0", x)?;
    let x = softplus_dense(g, store, "enc.l1", x)?;
    Dense::named("enc.out").forward(g, store, x)
}

pub struct DecoderOutput {
    /// `[B, N]`.
    pub mu: CVar,
    /// `[B, 4N]`, `None` in instantaneous mode.
    pub c: Option<Var>,
}

pub fn decode(g: &mut Graph, store: &ParameterStore, cfg: &ModelConfig, f: Var) -> Result<DecoderOutput, DiffError> {
    let n = cfg.n();
    let t = softplus_dense(g, store, "dec.l0", f)?;
    let t = softplus_dense(g, store, "dec.l1", t)?;
    let m = Dense::named("dec.mu").forward(g, store, t)?;
    let mu = CVar::new(g.slice_cols(m, 0, n)?, g.slice_cols(m, n, 2 * n)?);
    let c = match cfg.mode {
        DecoderMode::Statistical => {
            let pre = Dense::named("dec.c").forward(g, store, t)?;
            let sp = g.softplus(pre)?;
            Some(g.offset(sp, C_FLOOR)?)
        }
        DecoderMode::Instantaneous => None,
    };
    Ok(DecoderOutput { mu, c })
}

/// Averaging matrix over the other members of each group (zero row for a
/// singleton group).
fn neighbour_mean(groups: &[usize]) -> Tensor {
    let r: usize = groups.iter().sum();
    let mut m = Tensor::zeros(r, r);
    let mut start = 0;
    for &j in groups {
        if j > 1 {
            let w = 1.0 / (j - 1) as f64;
            for a in start..start + j {
                for b in start..start + j {
                    if a != b {
                        m.set(a, b, w);
                    }
                }
            }
        }
        start += j;
    }
    m
}

/// Block matrix of ones: row `a` sums the rows of its own group.
pub(crate) fn group_sum(groups: &[usize]) -> Tensor {
    let r: usize = groups.iter().sum();
    let mut m = Tensor::zeros(r, r);
    let mut start = 0;
    for &j in groups {
        for a in start..start + j {
            for b in start..start + j {
                m.set(a, b, 1.0);
            }
        }
        start += j;
    }
    m
}

/// Precoders `[R, N]` (row `j` is `v_j`) for row-stacked constellations.
///
/// `mu` is `[R, N]`, `c` is `[R, 4N]`, `groups` lists the constellation
/// sizes in row order and `noise_vars` the per-constellation `σ²`. Each
/// constellation is scaled to total power `rho`.
pub fn gnn_precode(
    g: &mut Graph,
    store: &ParameterStore,
    arch: &Architecture,
    mu: CVar,
    c: Var,
    groups: &[usize],
    noise_vars: &[f64],
    rho: f64,
) -> Result<CVar> {
    let r: usize = groups.iter().sum();
    if groups.is_empty() || groups.contains(&0) || groups.len() != noise_vars.len() || r != g.value(mu.re).rows() {
        return Err(invalid(format!("group sizes {:?} do not match {} stacked users", groups, g.value(mu.re).rows())));
    }
    if !(rho > 0.0) || noise_vars.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("power budget and noise variances must be positive"));
    }
    let n = g.value(mu.re).cols();
    let log_noise: Vec<f64> = groups.iter().zip(noise_vars).flat_map(|(&j, &s)| std::iter::repeat_n(s.ln(), j)).collect();
    let noise_col = g.constant(Tensor::column(log_noise))?;
    let x = g.concat_cols(&[mu.re, mu.im, c, noise_col])?;
    let mut h = softplus_dense(g, store, "gnn.feat", x)?;

    let agg = g.constant(neighbour_mean(groups))?;
    for l in 0..arch.gnn_layers {
        let msg = softplus_dense(g, store, &msg_layer(l), h)?;
        let m = g.matmul(agg, msg)?;
        let hm = g.concat_cols(&[h, m])?;
        h = softplus_dense(g, store, &upd_layer(l), hm)?;
    }
    let o = softplus_dense(g, store, "gnn.read0", h)?;
    let o = Dense::named("gnn.read1").forward(g, store, o)?;
    let v = CVar::new(g.slice_cols(o, 0, n)?, g.slice_cols(o, n, 2 * n)?);
    normalize_power(g, v, groups, rho)
}

/// Scale each constellation's precoders to total power `rho`.
pub fn normalize_power(g: &mut Graph, v: CVar, groups: &[usize], rho: f64) -> Result<CVar> {
    let e = g.abs2(v)?;
    let e = g.sum_rows(e)?;
    let s = g.constant(group_sum(groups))?;
    let total = g.matmul(s, e)?;
    if g.value(total).data().iter().any(|&t| t <= 0.0) {
        return Err(Error::Numerical("precoder network produced all-zero output".into()));
    }
    let budget = g.constant(Tensor::full(g.value(total).rows(), 1, rho))?;
    let ratio = g.div(budget, total)?;
    let scale = g.sqrt(ratio)?;
    Ok(g.complex_mul_col(v, scale)?)
}

/// Pack statistics into `(mu, c)` graph constants for [`gnn_precode`].
pub fn stats_constants(g: &mut Graph, stats: &[StatisticalCsi]) -> Result<(CVar, Var)> {
    let b = stats.len();
    if b == 0 {
        return Err(invalid("no users"));
    }
    let n = stats[0].mu.len();
    let mut re = Vec::with_capacity(b * n);
    let mut im = Vec::with_capacity(b * n);
    let mut c = Vec::with_capacity(b * 4 * n);
    for s in stats {
        s.validate(n)?;
        re.extend(s.mu.iter().map(|z| z.re));
        im.extend(s.mu.iter().map(|z| z.im));
        c.extend_from_slice(&s.c);
    }
    let mu = g.complex_constant(Tensor::matrix(b, n, re)?, Tensor::matrix(b, n, im)?)?;
    let c = g.constant(Tensor::matrix(b, 4 * n, c)?)?;
    Ok((mu, c))
}

/// Rows of a complex `[R, N]` node as complex vectors.
pub fn complex_rows(g: &Graph, x: CVar) -> Vec<Vec<Complex64>> {
    let (re, im) = (g.value(x.re), g.value(x.im));
    (0..re.rows())
        .map(|i| re.row_slice(i).iter().zip(im.row_slice(i)).map(|(&a, &b)| Complex64::new(a, b)).collect())
        .collect()
}

/// Precoders for a single constellation of statistics, outside training.
pub fn precode_constellation(
    store: &ParameterStore,
    arch: &Architecture,
    stats: &[StatisticalCsi],
    noise_var: f64,
    rho: f64,
) -> Result<Vec<Vec<Complex64>>> {
    let mut g = Graph::new();
    let (mu, c) = stats_constants(&mut g, stats)?;
    let v = gnn_precode(&mut g, store, arch, mu, c, &[stats.len()], &[noise_var], rho)?;
    Ok(complex_rows(&g, v))
}
