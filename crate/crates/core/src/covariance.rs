//! Block-Toeplitz covariance model `C = Qᴴ diag(c) Q` and its Gaussian likelihood.
//!
//! `Q = F_{N_v} ⊗ F_{N_h}` where `F_T` holds the first `T` columns of the
//! unitary `2T`-point DFT, so `QᴴQ = I` and `c = 1` gives `C = I`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{ArrayGeometry, ChannelSample};
use crate::diffcore::{CVar, CustomGrad, DiffError, Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::pilot::unitary_dft;

/// Lower bound on every angular power `c_k` produced by the decoder.
pub const C_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AngularDictionary {
    pub geometry: ArrayGeometry,
    /// `4N x N`.
    pub q: DMatrix<Complex64>,
    /// `Qᴴ`, whose columns are the atoms `a_k` with `C = Σ c_k a_k a_kᴴ`.
    atoms: DMatrix<Complex64>,
}

pub fn build_dictionary(geometry: &ArrayGeometry) -> AngularDictionary {
    let (nv, nh) = (geometry.n_v, geometry.n_h);
    let n = geometry.n();
    let q = DMatrix::from_fn(4 * n, n, |row, col| {
        let (mv, mh) = (row / (2 * nh), row % (2 * nh));
        let (cv, ch) = (col / nh, col % nh);
        unitary_dft(2 * nv, mv, cv) * unitary_dft(2 * nh, mh, ch)
    });
    let atoms = q.adjoint();
    AngularDictionary { geometry: *geometry, q, atoms }
}

impl AngularDictionary {
    pub fn n(&self) -> usize {
        self.q.ncols()
    }

    pub fn atoms(&self) -> &DMatrix<Complex64> {
        &self.atoms
    }

    /// `Q x` for an `N`-vector.
    pub fn project(&self, x: &[Complex64]) -> Vec<Complex64> {
        (&self.q * DVector::from_column_slice(x)).iter().copied().collect()
    }
}

/// Mean and angular power spectrum of a conditional Gaussian channel model.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticalCsi {
    pub mu: Vec<Complex64>,
    pub c: Vec<f64>,
}

impl StatisticalCsi {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mu.len() != n || self.c.len() != 4 * n {
            return Err(invalid(format!(
                "statistics sized ({}, {}) for N = {}",
                self.mu.len(),
                self.c.len(),
                n
            )));
        }
        if self.mu.iter().any(|z| !z.is_finite()) || self.c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("statistics contain non-finite values"));
        }
        if let Some(v) = self.c.iter().find(|&&v| v < C_FLOOR) {
            return Err(invalid(format!("angular power {} below floor {}", v, C_FLOOR)));
        }
        Ok(())
    }
}

pub fn build_covariance(c: &[f64], dict: &AngularDictionary) -> Result<DMatrix<Complex64>> {
    let n = dict.n();
    if c.len() != 4 * n {
        return Err(invalid(format!("expected {} angular powers, got {}", 4 * n, c.len())));
    }
    if let Some(v) = c.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(invalid(format!("angular power {} is not a nonnegative number", v)));
    }
    let mut scaled = dict.atoms.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= Complex64::new(c[k], 0.0);
    }
    let cov = &scaled * dict.atoms.adjoint();
    // Exact Hermitian symmetry.
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(cov[(i, i)].re, 0.0)
        } else if i < j {
            cov[(i, j)]
        } else {
            cov[(j, i)].conj()
        }
    }))
}

/// Largest deviation of `cov` from block-Toeplitz-with-Toeplitz-blocks
/// structure: entries must depend only on the vertical and horizontal index
/// differences.
pub fn block_toeplitz_deviation(cov: &DMatrix<Complex64>, n_v: usize, n_h: usize) -> f64 {
    let mut reference = std::collections::HashMap::new();
    let mut worst: f64 = 0.0;
    for i in 0..n_v * n_h {
        for j in 0..n_v * n_h {
            let key = ((i / n_h) as i64 - (j / n_h) as i64, (i % n_h) as i64 - (j % n_h) as i64);
            let z = cov[(i, j)];
            let r = *reference.entry(key).or_insert(z);
            worst = worst.max((z - r).norm());
        }
    }
    worst
}

/// NLL value and its gradients for one sample.
#[derive(Clone, Debug)]
pub struct NllEval {
    pub value: f64,
    /// `∂/∂Re μ + i ∂/∂Im μ`, i.e. `-2 C⁻¹ r`.
    pub grad_mu: Vec<Complex64>,
    /// `a_kᴴ C⁻¹ a_k - |a_kᴴ C⁻¹ r|²`.
    pub grad_c: Vec<f64>,
}

/// `ln det(πC) + (h-μ)ᴴ C⁻¹ (h-μ)` through a Cholesky factorization.
pub fn gaussian_nll(h: &ChannelSample, stat: &StatisticalCsi, dict: &AngularDictionary) -> Result<f64> {
    Ok(nll_eval(&h.h, &stat.mu, &stat.c, dict, false)?.value)
}

pub fn gaussian_nll_with_grad(h: &ChannelSample, stat: &StatisticalCsi, dict: &AngularDictionary) -> Result<NllEval> {
    nll_eval(&h.h, &stat.mu, &stat.c, dict, true)
}

fn nll_eval(h: &[Complex64], mu: &[Complex64], c: &[f64], dict: &AngularDictionary, grads: bool) -> Result<NllEval> {
    let n = dict.n();
    if h.len() != n || mu.len() != n {
        return Err(invalid(format!("channel/mean length {} / {} for N = {}", h.len(), mu.len(), n)));
    }
    let cov = build_covariance(c, dict)?;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky factorization of the decoder covariance failed".into()))?;
    let l = chol.l();
    let logdet: f64 = 2.0 * (0..n).map(|i| l[(i, i)].re.ln()).sum::<f64>();
    let r = DVector::from_iterator(n, h.iter().zip(mu).map(|(a, b)| a - b));
    let s = l
        .solve_lower_triangular(&r)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let quad: f64 = s.iter().map(|z| z.norm_sqr()).sum();
    let value = n as f64 * PI.ln() + logdet + quad;
    if !value.is_finite() {
        return Err(Error::Numerical("Gaussian NLL is not finite".into()));
    }
    if !grads {
        return Ok(NllEval { value, grad_mu: Vec::new(), grad_c: Vec::new() });
    }
    let cinv_r = chol.solve(&r);
    let grad_mu = cinv_r.iter().map(|z| -2.0 * z).collect();
    let w = l
        .solve_lower_triangular(dict.atoms())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let grad_c = w
        .column_iter()
        .map(|col| {
            let energy: f64 = col.iter().map(|z| z.norm_sqr()).sum();
            let inner: Complex64 = col.iter().zip(s.iter()).map(|(a, b)| a.conj() * b).sum();
            energy - inner.norm_sqr()
        })
        .collect();
    Ok(NllEval { value, grad_mu, grad_c })
}

struct NllGrad {
    mu_re: Tensor,
    mu_im: Tensor,
    c: Tensor,
}

impl CustomGrad for NllGrad {
    fn name(&self) -> &'static str {
        "gaussian_nll"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let scale_rows = |t: &Tensor| {
            let mut out = t.clone();
            let c = t.cols();
            for (i, &gi) in grad_out.data().iter().enumerate() {
                for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                    *v *= gi;
                }
            }
            out
        };
        vec![Some(scale_rows(&self.mu_re)), Some(scale_rows(&self.mu_im)), Some(scale_rows(&self.c))]
    }
}

/// Per-sample NLL `[B,1]` as a graph node. `h` rows are the true channels;
/// `mu` is `[B,N]` complex and `c` is `[B,4N]`.
pub fn gaussian_nll_node(
    g: &mut Graph,
    h: &[&[Complex64]],
    mu: CVar,
    c: Var,
    dict: &AngularDictionary,
) -> Result<Var> {
    let n = dict.n();
    let (mr, mi, cv) = (g.value(mu.re), g.value(mu.im), g.value(c));
    let b = h.len();
    if mr.rows() != b || mr.cols() != n || mi.rows() != b || cv.rows() != b || cv.cols() != 4 * n {
        return Err(DiffError::ShapeMismatch {
            op: "gaussian_nll",
            detail: format!("batch {} with mean {:?} and powers {:?}", b, mr.shape(), cv.shape()),
        }
        .into());
    }
    let evals: Vec<NllEval> = (0..b)
        .into_par_iter()
        .map(|i| {
            let m: Vec<Complex64> = mr.row_slice(i).iter().zip(mi.row_slice(i)).map(|(&a, &b)| Complex64::new(a, b)).collect();
            nll_eval(h[i], &m, cv.row_slice(i), dict, true)
        })
        .collect::<Result<_>>()?;
    let value = Tensor::column(evals.iter().map(|e| e.value).collect());
    let grad = NllGrad {
        mu_re: Tensor::matrix(b, n, evals.iter().flat_map(|e| e.grad_mu.iter().map(|z| z.re)).collect())?,
        mu_im: Tensor::matrix(b, n, evals.iter().flat_map(|e| e.grad_mu.iter().map(|z| z.im)).collect())?,
        c: Tensor::matrix(b, 4 * n, evals.iter().flat_map(|e| e.grad_c.iter().copied()).collect())?,
    };
    Ok(g.custom(&[mu.re, mu.im, c], value, Box::new(grad))?)
}

/// `||h - h̄||²` summed over real and imaginary parts.
pub fn mse_loss(h: &ChannelSample, h_bar: &[Complex64]) -> f64 {
    h.h.iter().zip(h_bar).map(|(a, b)| (a - b).norm_sqr()).sum()
}

/// Per-sample squared error `[B,1]` between constant channels and a complex estimate.
pub fn mse_node(g: &mut Graph, h: CVar, h_bar: CVar) -> std::result::Result<Var, DiffError> {
    let d = g.complex_sub(h_bar, h)?;
    let e = g.abs2(d)?;
    g.sum_rows(e)
}
