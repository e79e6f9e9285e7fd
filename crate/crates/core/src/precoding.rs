//! Sum rate under the transpose convention `h_jᵀ v_m`, and the classical
//! precoders: matched filter, zero forcing, WMMSE and sample-average WMMSE.
//!
//! Solvers conjugate the channels once on entry (`g_j = conj(h_j)`, so
//! `h_jᵀ v = g_jᴴ v`) and work in the usual Hermitian form afterwards.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::covariance::{build_covariance, AngularDictionary, StatisticalCsi};
use crate::diffcore::{CVar, Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::networks::group_sum;
use crate::rng::{complex_normal, SimRng};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_SAA_SAMPLES: usize = 32;
const POWER_TOL: f64 = 1e-10;

/// Per-user precoders `v_j` under the power budget `rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecoderSet {
    pub v: Vec<Vec<Complex64>>,
    pub rho: f64,
}

impl PrecoderSet {
    pub fn total_power(&self) -> f64 {
        self.v.iter().flatten().map(|z| z.norm_sqr()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    /// Objective at the initial point followed by one entry per iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

fn check_shapes(h: &[Vec<Complex64>], v: &[Vec<Complex64>]) -> Result<usize> {
    let n = h.first().map(|x| x.len()).ok_or_else(|| invalid("no users"))?;
    if h.iter().any(|x| x.len() != n) || v.len() != h.len() || v.iter().any(|x| x.len() != n) {
        return Err(invalid("channel and precoder dimensions disagree"));
    }
    Ok(n)
}

fn bilinear(h: &[Complex64], v: &[Complex64]) -> Complex64 {
    h.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `Σ_j log2(1 + |h_jᵀ v_j|² / (Σ_{m≠j} |h_jᵀ v_m|² + σ²))`.
pub fn sum_rate(h: &[Vec<Complex64>], v: &PrecoderSet, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(invalid(format!("noise variance {} must be positive", noise_var)));
    }
    check_shapes(h, &v.v)?;
    Ok(per_user_rates(h, &v.v, noise_var).iter().sum())
}

pub fn per_user_rates(h: &[Vec<Complex64>], v: &[Vec<Complex64>], noise_var: f64) -> Vec<f64> {
    h.iter()
        .enumerate()
        .map(|(j, hj)| {
            let gains: Vec<f64> = v.iter().map(|vm| bilinear(hj, vm).norm_sqr()).collect();
            let interference: f64 = gains.iter().enumerate().filter(|&(m, _)| m != j).map(|(_, x)| x).sum();
            (1.0 + gains[j] / (interference + noise_var)).log2()
        })
        .collect()
}

/// Matched filter `v_j = sqrt(ρ/J) conj(h_j)/||h_j||`.
pub fn mrt(h: &[Vec<Complex64>], rho: f64) -> Result<PrecoderSet> {
    let j = h.len();
    if j == 0 || !(rho > 0.0) {
        return Err(invalid("mrt needs at least one user and positive power"));
    }
    let amp = (rho / j as f64).sqrt();
    let v = h
        .iter()
        .map(|hj| {
            let norm = hj.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                vec![Complex64::new(0.0, 0.0); hj.len()]
            } else {
                hj.iter().map(|z| z.conj() * (amp / norm)).collect()
            }
        })
        .collect();
    Ok(PrecoderSet { v, rho })
}

fn conj_columns(h: &[Vec<Complex64>]) -> DMatrix<Complex64> {
    DMatrix::from_fn(h[0].len(), h.len(), |i, j| h[j][i].conj())
}

/// Zero forcing: columns of `G (GᴴG)⁻¹`, each scaled to power `ρ/J`.
pub fn zf(h: &[Vec<Complex64>], rho: f64) -> Result<PrecoderSet> {
    let j = h.len();
    if j == 0 || !(rho > 0.0) {
        return Err(invalid("zf needs at least one user and positive power"));
    }
    let n = h[0].len();
    if j > n {
        return Err(invalid(format!("zero forcing needs J <= N, got J = {} and N = {}", j, n)));
    }
    let g = conj_columns(h);
    let gram = g.adjoint() * &g;
    let ev = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 0.0) || hi / lo > 1e12 {
        return Err(Error::Numerical(format!("channel Gram matrix is singular (eigenvalues {:e}..{:e})", lo, hi)));
    }
    let inv = gram.try_inverse().ok_or_else(|| Error::Numerical("channel Gram matrix is singular".into()))?;
    let w = g * inv;
    let amp = (rho / j as f64).sqrt();
    let v = (0..j)
        .map(|m| {
            let col = w.column(m);
            let norm = col.norm();
            col.iter().map(|z| z * (amp / norm)).collect()
        })
        .collect();
    Ok(PrecoderSet { v, rho })
}

/// Weighted MMSE on a channel estimate, initialized at the matched filter.
pub fn wmmse(
    h: &[Vec<Complex64>],
    rho: f64,
    noise_var: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(PrecoderSet, SolverReport)> {
    if !(noise_var > 0.0) {
        return Err(invalid(format!("noise variance {} must be positive", noise_var)));
    }
    let init = mrt(h, rho)?;
    let samples: Vec<Vec<DVector<Complex64>>> = h.iter().map(|hj| vec![conj_vec(hj)]).collect();
    Ok(block_updates(&samples, init, noise_var, max_iter, tol))
}

/// Sample-average stochastic WMMSE over `h_j = μ_j + L_j ξ` with a fixed
/// draw of `samples` circular Gaussian `ξ` per user.
#[allow(clippy::too_many_arguments)]
pub fn swmmse(
    stats: &[StatisticalCsi],
    dict: &AngularDictionary,
    rho: f64,
    noise_var: f64,
    samples: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut SimRng,
) -> Result<(PrecoderSet, SolverReport)> {
    if samples == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let n = dict.n();
    let draws: Vec<Vec<Vec<Complex64>>> = stats
        .iter()
        .map(|_| (0..samples).map(|_| (0..n).map(|_| complex_normal(rng, 1.0)).collect()).collect())
        .collect();
    swmmse_with_draws(stats, dict, rho, noise_var, &draws, max_iter, tol)
}

/// [`swmmse`] with caller-supplied whitened draws `draws[j][s]`.
pub fn swmmse_with_draws(
    stats: &[StatisticalCsi],
    dict: &AngularDictionary,
    rho: f64,
    noise_var: f64,
    draws: &[Vec<Vec<Complex64>>],
    max_iter: usize,
    tol: f64,
) -> Result<(PrecoderSet, SolverReport)> {
    if !(noise_var > 0.0) {
        return Err(invalid(format!("noise variance {} must be positive", noise_var)));
    }
    let n = dict.n();
    if draws.len() != stats.len() || draws.iter().any(|d| d.is_empty() || d.len() != draws[0].len()) {
        return Err(invalid("need the same positive number of draws for every user"));
    }
    let mut samples = Vec::with_capacity(stats.len());
    for (s, d) in stats.iter().zip(draws) {
        s.validate(n)?;
        let cov = build_covariance(&s.c, dict)?;
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?
            .unpack();
        let mu = DVector::from_column_slice(&s.mu);
        let per_user = d
            .iter()
            .map(|xi| {
                if xi.len() != n {
                    return Err(invalid(format!("draw of length {} for N = {}", xi.len(), n)));
                }
                let h = &mu + &l * DVector::from_column_slice(xi);
                Ok(h.map(|z| z.conj()))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(per_user);
    }
    let mu: Vec<Vec<Complex64>> = stats.iter().map(|s| s.mu.clone()).collect();
    let init = mrt(&mu, rho)?;
    Ok(block_updates(&samples, init, noise_var, max_iter, tol))
}

/// Mean over samples of the sum rate; `g[j][s]` are conjugated channels.
pub fn sample_average_rate(g: &[Vec<DVector<Complex64>>], v: &[DVector<Complex64>], noise_var: f64) -> f64 {
    let s_count = g[0].len();
    let mut total = 0.0;
    for s in 0..s_count {
        for (j, gj) in g.iter().enumerate() {
            let gains: Vec<f64> = v.iter().map(|vm| gj[s].dotc(vm).norm_sqr()).collect();
            let interference: f64 = gains.iter().enumerate().filter(|&(m, _)| m != j).map(|(_, x)| x).sum();
            total += (1.0 + gains[j] / (interference + noise_var)).log2();
        }
    }
    total / s_count as f64
}

fn conj_vec(h: &[Complex64]) -> DVector<Complex64> {
    DVector::from_iterator(h.len(), h.iter().map(|z| z.conj()))
}

fn block_updates(
    g: &[Vec<DVector<Complex64>>],
    init: PrecoderSet,
    noise_var: f64,
    max_iter: usize,
    tol: f64,
) -> (PrecoderSet, SolverReport) {
    let rho = init.rho;
    let n = init.v[0].len();
    let users = g.len();
    let s_count = g[0].len();
    let inv_s = 1.0 / s_count as f64;
    let mut v: Vec<DVector<Complex64>> = init.v.iter().map(|x| DVector::from_column_slice(x)).collect();
    let mut rate = sample_average_rate(g, &v, noise_var);
    let mut trace = vec![rate];
    let mut best = (rate, v.clone());
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut a = DMatrix::<Complex64>::zeros(n, n);
        let mut b: Vec<DVector<Complex64>> = vec![DVector::zeros(n); users];
        for j in 0..users {
            for s in 0..s_count {
                let gjs = &g[j][s];
                let proj: Vec<Complex64> = v.iter().map(|vm| gjs.dotc(vm)).collect();
                let total: f64 = proj.iter().map(|p| p.norm_sqr()).sum::<f64>() + noise_var;
                let signal = proj[j];
                let u = signal / total;
                let w = total / (total - signal.norm_sqr());
                a += (gjs * gjs.adjoint()) * Complex64::from(w * u.norm_sqr() * inv_s);
                b[j] += gjs * (u * (w * inv_s));
            }
        }
        v = solve_power_constrained(&a, &b, rho);
        let next = sample_average_rate(g, &v, noise_var);
        trace.push(next);
        if next > best.0 {
            best = (next, v.clone());
        }
        let delta = (next - rate).abs();
        rate = next;
        if delta <= tol {
            stop = StopReason::Converged;
            break;
        }
    }
    let set = PrecoderSet { v: best.1.iter().map(|x| x.iter().copied().collect()).collect(), rho };
    let report = SolverReport { iterations, trace, converged: stop == StopReason::Converged, stop_reason: stop };
    (set, report)
}

/// `v_j = (A + λI)⁺ b_j` with the smallest `λ >= 0` meeting `Σ||v_j||² <= ρ`.
fn solve_power_constrained(a: &DMatrix<Complex64>, b: &[DVector<Complex64>], rho: f64) -> Vec<DVector<Complex64>> {
    let eig = SymmetricEigen::new(a.clone());
    let d: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let floor = 1e-12 * d.iter().cloned().fold(0.0, f64::max);
    let coords: Vec<DVector<Complex64>> = b.iter().map(|bj| eig.eigenvectors.adjoint() * bj).collect();
    let weight: Vec<f64> = (0..d.len()).map(|i| coords.iter().map(|c| c[i].norm_sqr()).sum()).collect();

    let inv = |i: usize, lambda: f64| {
        let den = d[i] + lambda;
        if lambda == 0.0 && d[i] <= floor {
            0.0
        } else {
            1.0 / den
        }
    };
    let power = |lambda: f64| (0..d.len()).map(|i| weight[i] * inv(i, lambda).powi(2)).sum::<f64>();

    let lambda = if power(0.0) <= rho {
        0.0
    } else {
        let bnorm: f64 = b.iter().map(|x| x.norm_squared()).sum();
        let mut hi = (bnorm / rho).sqrt().max(f64::MIN_POSITIVE);
        while power(hi) > rho {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let p = power(mid);
            if p > rho {
                lo = mid;
            } else {
                hi = mid;
                if rho - p <= POWER_TOL {
                    break;
                }
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        hi
    };
    coords
        .iter()
        .map(|c| {
            let scaled = DVector::from_iterator(d.len(), (0..d.len()).map(|i| c[i] * inv(i, lambda)));
            &eig.eigenvectors * scaled
        })
        .collect()
}

/// Per-constellation sum rate `[K,1]` of row-stacked channels and precoders.
/// `groups` are the constellation sizes in row order.
pub fn sum_rate_node(g: &mut Graph, h: CVar, v: CVar, groups: &[usize], noise_vars: &[f64]) -> Result<Var> {
    let r: usize = groups.iter().sum();
    if groups.len() != noise_vars.len() || g.value(h.re).rows() != r || g.value(v.re).rows() != r {
        return Err(invalid("group sizes do not match the stacked rows"));
    }
    let vt = g.complex_transpose(v)?;
    let cross = g.complex_matmul(h, vt)?;
    let gains = g.abs2(cross)?;
    let mask = g.constant(group_sum(groups))?;
    let eye = g.constant(Tensor::identity(r))?;
    let within = g.mul(gains, mask)?;
    let total = g.sum_rows(within)?;
    let diag = g.mul(gains, eye)?;
    let signal = g.sum_rows(diag)?;
    let interference = g.sub(total, signal)?;
    let noise: Vec<f64> = groups.iter().zip(noise_vars).flat_map(|(&j, &s)| std::iter::repeat_n(s, j)).collect();
    let noise = g.constant(Tensor::column(noise))?;
    let den = g.add(interference, noise)?;
    let sinr = g.div(signal, den)?;
    let one_plus = g.offset(sinr, 1.0)?;
    let rate = g.ln(one_plus)?;
    let rate = g.scale(rate, 1.0 / LN_2)?;
    let mut pool = Tensor::zeros(groups.len(), r);
    let mut start = 0;
    for (k, &j) in groups.iter().enumerate() {
        for c in start..start + j {
            pool.set(k, c, 1.0);
        }
        start += j;
    }
    let pool = g.constant(pool)?;
    Ok(g.matmul(pool, rate)?)
}
