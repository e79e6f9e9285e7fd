//! Synthetic URA downlink channels.
//!
//! Each user scenario is a handful of angular clusters; a channel draw sums one
//! complex-Gaussian-weighted steering vector per cluster, with the cluster's
//! mean angles jittered by its angular spread. Gain variances sum to one and
//! every steering vector has squared norm `N`, so `E[||h||^2] = N` before the
//! dataset-level rescaling.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, SimRng};

/// Uniform rectangular array. Antenna `n = v * n_h + h` (vertical-major).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrayGeometry {
    pub n_v: usize,
    pub n_h: usize,
    /// Vertical spacing in wavelengths.
    pub d_v: f64,
    /// Horizontal spacing in wavelengths.
    pub d_h: f64,
}

impl ArrayGeometry {
    pub fn new(n_v: usize, n_h: usize, d_v: f64, d_h: f64) -> Result<Self> {
        if n_v == 0 || n_h == 0 {
            return Err(invalid(format!("array must have at least one element, got {}x{}", n_v, n_h)));
        }
        if !(d_v > 0.0 && d_h > 0.0) {
            return Err(invalid(format!("antenna spacings must be positive, got {} / {}", d_v, d_h)));
        }
        Ok(ArrayGeometry { n_v, n_h, d_v, d_h })
    }

    /// 2 x 8 array, lambda vertical and lambda/2 horizontal spacing.
    pub fn desk() -> Self {
        ArrayGeometry { n_v: 2, n_h: 8, d_v: 1.0, d_h: 0.5 }
    }

    /// 4 x 16 array with the same spacings.
    pub fn full_scale() -> Self {
        ArrayGeometry { n_v: 4, n_h: 16, d_v: 1.0, d_h: 0.5 }
    }

    pub fn n(&self) -> usize {
        self.n_v * self.n_h
    }
}

fn check_angles(azimuth: f64, elevation: f64) -> Result<()> {
    if !(azimuth > -PI - 1e-12 && azimuth <= PI + 1e-12) {
        return Err(invalid(format!("azimuth {} outside (-pi, pi]", azimuth)));
    }
    if !(-PI / 2.0 - 1e-12..=PI / 2.0 + 1e-12).contains(&elevation) {
        return Err(invalid(format!("elevation {} outside [-pi/2, pi/2]", elevation)));
    }
    Ok(())
}

/// Array response `a_v(elevation) ⊗ a_h(azimuth, elevation)`; unit-magnitude entries.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth: f64, elevation: f64) -> Result<Vec<Complex64>> {
    check_angles(azimuth, elevation)?;
    let phase_v = 2.0 * PI * geometry.d_v * elevation.sin();
    let phase_h = 2.0 * PI * geometry.d_h * azimuth.sin() * elevation.cos();
    let mut a = Vec::with_capacity(geometry.n());
    for v in 0..geometry.n_v {
        for h in 0..geometry.n_h {
            a.push(Complex64::from_polar(1.0, phase_v * v as f64 + phase_h * h as f64));
        }
    }
    Ok(a)
}

/// One angular cluster of a user scenario. Angles and spreads in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cluster {
    pub azimuth: f64,
    pub elevation: f64,
    pub azimuth_spread: f64,
    pub elevation_spread: f64,
    pub gain_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserScenario {
    pub clusters: Vec<Cluster>,
    pub seed: u64,
}

impl UserScenario {
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(invalid("scenario needs at least one cluster"));
        }
        let mut total = 0.0;
        for c in &self.clusters {
            check_angles(c.azimuth, c.elevation)?;
            if c.gain_variance < 0.0 || c.azimuth_spread < 0.0 || c.elevation_spread < 0.0 {
                return Err(invalid("gain variances and spreads must be nonnegative"));
            }
            total += c.gain_variance;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("gain variances sum to {}, expected 1", total)));
        }
        Ok(())
    }

    /// Draw from the scenario prior: 1..=5 clusters, uniform azimuth, elevation
    /// within ±30°, spreads in [1°, 10°], flat-Dirichlet gain split.
    pub fn random(rng: &mut SimRng) -> UserScenario {
        let p = rng.random_range(1..=5usize);
        let deg = PI / 180.0;
        let mut weights: Vec<f64> = (0..p).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let clusters = weights
            .into_iter()
            .map(|w| Cluster {
                azimuth: PI - rng.random::<f64>() * 2.0 * PI,
                elevation: rng.random_range(-PI / 6.0..=PI / 6.0),
                azimuth_spread: rng.random_range(1.0 * deg..=10.0 * deg),
                elevation_spread: rng.random_range(1.0 * deg..=10.0 * deg),
                gain_variance: w,
            })
            .collect();
        UserScenario { clusters, seed: rng.random() }
    }
}

fn wrap_azimuth(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub h: Vec<Complex64>,
}

impl ChannelSample {
    pub fn sq_norm(&self) -> f64 {
        self.h.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// `h = Σ_p g_p a(θ_p + δθ, φ_p + δφ)` with `g_p ~ CN(0, var_p)` and Gaussian jitter.
pub fn sample_channel(scenario: &UserScenario, geometry: &ArrayGeometry, rng: &mut SimRng) -> ChannelSample {
    let mut h = vec![Complex64::new(0.0, 0.0); geometry.n()];
    for c in &scenario.clusters {
        let gain = rng::complex_normal(rng, c.gain_variance);
        let az = wrap_azimuth(c.azimuth + c.azimuth_spread * rng::standard_normal(rng));
        let el = (c.elevation + c.elevation_spread * rng::standard_normal(rng)).clamp(-PI / 2.0, PI / 2.0);
        let a = steering_vector(geometry, az, el).expect("wrapped angles are in range");
        for (hn, an) in h.iter_mut().zip(a) {
            *hn += gain * an;
        }
    }
    ChannelSample { h }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub geometry: ArrayGeometry,
    pub n_scenarios: usize,
    pub samples_per_scenario: usize,
    pub eval_size: usize,
    pub seed: u64,
}

/// Channel pool with disjoint pre-train / fine-tune / evaluation splits.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDataset {
    pub geometry: ArrayGeometry,
    pub scenarios: Vec<UserScenario>,
    /// Scenario of each sample.
    pub scenario_ids: Vec<u32>,
    pub samples: Vec<ChannelSample>,
    pub pretrain: Vec<usize>,
    pub finetune: Vec<usize>,
    pub eval: Vec<usize>,
    /// Scalar applied to every generated channel.
    pub normalization: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Finetune,
    Eval,
}

pub fn build_dataset(config: &DatasetConfig) -> Result<ChannelDataset> {
    let pool = config.n_scenarios * config.samples_per_scenario;
    if config.n_scenarios == 0 || config.samples_per_scenario == 0 {
        return Err(invalid("dataset needs at least one scenario and one sample per scenario"));
    }
    if config.eval_size > pool {
        return Err(invalid(format!("eval size {} exceeds generated pool of {}", config.eval_size, pool)));
    }
    let mut master = rng::seeded(config.seed);
    let scenarios: Vec<UserScenario> = (0..config.n_scenarios).map(|_| UserScenario::random(&mut master)).collect();

    let geometry = config.geometry;
    let per_scenario: Vec<Vec<ChannelSample>> = scenarios
        .par_iter()
        .map(|s| {
            let mut r = rng::seeded(s.seed);
            (0..config.samples_per_scenario).map(|_| sample_channel(s, &geometry, &mut r)).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(pool);
    let mut scenario_ids = Vec::with_capacity(pool);
    for (id, group) in per_scenario.into_iter().enumerate() {
        for s in group {
            samples.push(s);
            scenario_ids.push(id as u32);
        }
    }

    let mean_energy = samples.iter().map(ChannelSample::sq_norm).sum::<f64>() / pool as f64;
    let normalization = (geometry.n() as f64 / mean_energy).sqrt();
    for s in &mut samples {
        for z in &mut s.h {
            *z *= normalization;
        }
    }

    let mut order: Vec<usize> = (0..pool).collect();
    for i in (1..pool).rev() {
        let j = master.random_range(0..=i);
        order.swap(i, j);
    }
    let mut eval = order[..config.eval_size].to_vec();
    let train = &order[config.eval_size..];
    let half = train.len().div_ceil(2);
    let mut pretrain = train[..half].to_vec();
    let mut finetune = train[half..].to_vec();
    eval.sort_unstable();
    pretrain.sort_unstable();
    finetune.sort_unstable();

    Ok(ChannelDataset { geometry, scenarios, scenario_ids, samples, pretrain, finetune, eval, normalization })
}

const DATASET_MAGIC: &[u8; 8] = b"VQPCHDS\0";
const DATASET_VERSION: u32 = 1;

impl ChannelDataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Finetune => &self.finetune,
            Split::Eval => &self.eval,
        }
    }

    pub fn mean_energy(&self, indices: impl IntoIterator<Item = usize>) -> f64 {
        let (sum, n) = indices
            .into_iter()
            .fold((0.0, 0usize), |(s, n), i| (s + self.samples[i].sq_norm(), n + 1));
        sum / n.max(1) as f64
    }

    /// New draws from an existing scenario, scaled by the dataset normalization.
    pub fn fresh_samples(&self, scenario: usize, count: usize, seed: u64) -> Vec<ChannelSample> {
        let mut r = rng::seeded(seed);
        (0..count)
            .map(|_| {
                let mut s = sample_channel(&self.scenarios[scenario], &self.geometry, &mut r);
                s.h.iter_mut().for_each(|z| *z *= self.normalization);
                s
            })
            .collect()
    }

    /// Binary container, all integers and floats little-endian:
    /// header (magic, version, n_v, n_h, d_v, d_h, sample/scenario/split counts,
    /// normalization), interleaved re/im channel entries, per-sample scenario
    /// ids, the three split index tables, and the scenario descriptions.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.geometry.n_v as u32);
        w.u32(self.geometry.n_h as u32);
        w.f64(self.geometry.d_v);
        w.f64(self.geometry.d_h);
        w.u64(self.samples.len() as u64);
        w.u64(self.scenarios.len() as u64);
        w.u64(self.pretrain.len() as u64);
        w.u64(self.finetune.len() as u64);
        w.u64(self.eval.len() as u64);
        w.f64(self.normalization);
        for s in &self.samples {
            for z in &s.h {
                w.f64(z.re);
                w.f64(z.im);
            }
        }
        for &id in &self.scenario_ids {
            w.u32(id);
        }
        for table in [&self.pretrain, &self.finetune, &self.eval] {
            for &i in table {
                w.u64(i as u64);
            }
        }
        for sc in &self.scenarios {
            w.u64(sc.seed);
            w.u32(sc.clusters.len() as u32);
            for c in &sc.clusters {
                for v in [c.azimuth, c.elevation, c.azimuth_spread, c.elevation_spread, c.gain_variance] {
                    w.f64(v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("dataset: bad magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("dataset: unsupported version {}", version)));
        }
        let n_v = r.u32()? as usize;
        let n_h = r.u32()? as usize;
        let geometry = ArrayGeometry::new(n_v, n_h, r.f64()?, r.f64()?)?;
        let n_samples = r.u64()? as usize;
        let n_scenarios = r.u64()? as usize;
        let n_pre = r.u64()? as usize;
        let n_fine = r.u64()? as usize;
        let n_eval = r.u64()? as usize;
        let normalization = r.f64()?;
        let n = geometry.n();
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut h = Vec::with_capacity(n);
            for _ in 0..n {
                h.push(Complex64::new(r.f64()?, r.f64()?));
            }
            samples.push(ChannelSample { h });
        }
        let scenario_ids = (0..n_samples).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut read_table = |len: usize| -> Result<Vec<usize>> {
            (0..len)
                .map(|_| {
                    let i = r.u64()? as usize;
                    if i >= n_samples {
                        return Err(Error::Format(format!("dataset: split index {} out of range", i)));
                    }
                    Ok(i)
                })
                .collect()
        };
        let pretrain = read_table(n_pre)?;
        let finetune = read_table(n_fine)?;
        let eval = read_table(n_eval)?;
        let mut scenarios = Vec::with_capacity(n_scenarios);
        for _ in 0..n_scenarios {
            let seed = r.u64()?;
            let p = r.u32()? as usize;
            let mut clusters = Vec::with_capacity(p);
            for _ in 0..p {
                clusters.push(Cluster {
                    azimuth: r.f64()?,
                    elevation: r.f64()?,
                    azimuth_spread: r.f64()?,
                    elevation_spread: r.f64()?,
                    gain_variance: r.f64()?,
                });
            }
            scenarios.push(UserScenario { clusters, seed });
        }
        r.expect_end()?;
        if scenario_ids.iter().any(|&id| id as usize >= n_scenarios) {
            return Err(Error::Format("dataset: scenario id out of range".into()));
        }
        Ok(ChannelDataset { geometry, scenarios, scenario_ids, samples, pretrain, finetune, eval, normalization })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
