//! Pilot matrices and the noisy observation `y = P h + n`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::{ArrayGeometry, ChannelSample};
use crate::diffcore::{CVar, DiffError, Graph, ParameterStore, Tensor};
use crate::error::{invalid, Result};
use crate::rng::{self, SimRng};

pub const PILOT_RE: &str = "pilot.re";
pub const PILOT_IM: &str = "pilot.im";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PilotKind {
    FixedDft,
    Learnable,
}

/// Energy constraint re-imposed on a learnable pilot after each optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PilotConstraint {
    /// `||P||_F^2 = N`.
    Frobenius,
    /// Every row (pilot symbol) carries `N / n_p`.
    PerRow,
}

/// `n_p x N` complex pilot matrix, stored row-major as separate re/im parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotMatrix {
    pub n_p: usize,
    pub n: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub kind: PilotKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub y: Vec<Complex64>,
    pub noise_var: f64,
}

/// Entry `(k, m)` of the unitary `t`-point DFT.
pub(crate) fn unitary_dft(t: usize, k: usize, m: usize) -> Complex64 {
    let phase = -2.0 * PI * ((k * m) % t) as f64 / t as f64;
    Complex64::from_polar(1.0 / (t as f64).sqrt(), phase)
}

/// Rows `floor(k N / n_p)` of the unitary 2D-DFT `F_{N_v} ⊗ F_{N_h}`, rescaled
/// to entries of magnitude `1/sqrt(n_p)` so that every column has unit norm.
pub fn build_dft_pilots(geometry: &ArrayGeometry, n_p: usize) -> Result<PilotMatrix> {
    let n = geometry.n();
    if n_p == 0 || n_p > n {
        return Err(invalid(format!("pilot count {} must be in 1..={}", n_p, n)));
    }
    let rescale = (n as f64 / n_p as f64).sqrt();
    let mut re = Vec::with_capacity(n_p * n);
    let mut im = Vec::with_capacity(n_p * n);
    for k in 0..n_p {
        let row = k * n / n_p;
        let (rv, rh) = (row / geometry.n_h, row % geometry.n_h);
        for col in 0..n {
            let (cv, ch) = (col / geometry.n_h, col % geometry.n_h);
            let z = unitary_dft(geometry.n_v, rv, cv) * unitary_dft(geometry.n_h, rh, ch) * rescale;
            re.push(z.re);
            im.push(z.im);
        }
    }
    Ok(PilotMatrix { n_p, n, re, im, kind: PilotKind::FixedDft })
}

impl PilotMatrix {
    pub fn entry(&self, k: usize, col: usize) -> Complex64 {
        Complex64::new(self.re[k * self.n + col], self.im[k * self.n + col])
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::matrix(self.n_p, self.n, self.re.clone()).expect("pilot shape"),
            Tensor::matrix(self.n_p, self.n, self.im.clone()).expect("pilot shape"),
        )
    }

    pub fn from_store(store: &ParameterStore, kind: PilotKind) -> Result<Self> {
        let re = store.value(PILOT_RE).ok_or_else(|| DiffError::UnknownParam(PILOT_RE.into()))?;
        let im = store.value(PILOT_IM).ok_or_else(|| DiffError::UnknownParam(PILOT_IM.into()))?;
        if re.shape() != im.shape() || !re.is_matrix() {
            return Err(invalid("pilot re/im tensors must be matrices of equal shape"));
        }
        Ok(PilotMatrix { n_p: re.rows(), n: re.cols(), re: re.data().to_vec(), im: im.data().to_vec(), kind })
    }

    /// `P h` accumulated in the same order as the graph's complex matmul.
    pub fn apply(&self, h: &[Complex64]) -> Vec<Complex64> {
        (0..self.n_p)
            .map(|k| {
                let mut rr = 0.0;
                let mut ii = 0.0;
                let mut ri = 0.0;
                let mut ir = 0.0;
                for (col, z) in h.iter().enumerate() {
                    let (pr, pi) = (self.re[k * self.n + col], self.im[k * self.n + col]);
                    rr += z.re * pr;
                    ii += z.im * pi;
                    ri += z.re * pi;
                    ir += z.im * pr;
                }
                Complex64::new(rr - ii, ri + ir)
            })
            .collect()
    }
}

/// `n_p` draws of `CN(0, σ²)`.
pub fn draw_noise(n_p: usize, noise_var: f64, rng: &mut SimRng) -> Vec<Complex64> {
    (0..n_p).map(|_| rng::complex_normal(rng, noise_var)).collect()
}

pub fn observe(p: &PilotMatrix, h: &ChannelSample, noise_var: f64, rng: &mut SimRng) -> Result<Observation> {
    if noise_var < 0.0 {
        return Err(invalid(format!("noise variance {} is negative", noise_var)));
    }
    if h.h.len() != p.n {
        return Err(invalid(format!("channel length {} vs pilot width {}", h.h.len(), p.n)));
    }
    let noise = draw_noise(p.n_p, noise_var, rng);
    Ok(observe_with_noise(p, &h.h, &noise, noise_var))
}

pub fn observe_with_noise(p: &PilotMatrix, h: &[Complex64], noise: &[Complex64], noise_var: f64) -> Observation {
    let y = p.apply(h).into_iter().zip(noise).map(|(a, b)| a + b).collect();
    Observation { y, noise_var }
}

/// Register `pilot.re` / `pilot.im` initialized from `init`.
pub fn register_pilot(store: &mut ParameterStore, init: &PilotMatrix) -> Result<()> {
    let (re, im) = init.to_tensors();
    store.insert(PILOT_RE, re)?;
    store.insert(PILOT_IM, im)?;
    Ok(())
}

/// Differentiable `Y = H Pᵀ + N` for a batch of channels (rows of `h`).
/// The noise enters as a constant leaf.
pub fn learnable_pilot_forward(
    g: &mut Graph,
    store: &ParameterStore,
    h: CVar,
    noise: CVar,
) -> std::result::Result<CVar, DiffError> {
    let p = CVar::new(g.param(store, PILOT_RE)?, g.param(store, PILOT_IM)?);
    let pt = g.complex_transpose(p)?;
    let hp = g.complex_matmul(h, pt)?;
    g.complex_add(hp, noise)
}

/// Project the stored pilot back onto the energy constraint.
pub fn renormalize_pilot(store: &mut ParameterStore, constraint: PilotConstraint) -> Result<()> {
    let mut re = store.value(PILOT_RE).ok_or_else(|| DiffError::UnknownParam(PILOT_RE.into()))?.clone();
    let mut im = store.value(PILOT_IM).ok_or_else(|| DiffError::UnknownParam(PILOT_IM.into()))?.clone();
    let (n_p, n) = (re.rows(), re.cols());
    match constraint {
        PilotConstraint::Frobenius => {
            let e = re.sq_norm() + im.sq_norm();
            if e <= 0.0 {
                return Err(crate::error::Error::Numerical("pilot matrix collapsed to zero".into()));
            }
            let k = (n as f64 / e).sqrt();
            re.scale_in_place(k);
            im.scale_in_place(k);
        }
        PilotConstraint::PerRow => {
            let target = n as f64 / n_p as f64;
            for r in 0..n_p {
                let e: f64 = re.row_slice(r).iter().chain(im.row_slice(r)).map(|v| v * v).sum();
                if e <= 0.0 {
                    return Err(crate::error::Error::Numerical(format!("pilot row {} collapsed to zero", r)));
                }
                let k = (target / e).sqrt();
                for c in 0..n {
                    re.set(r, c, re.at(r, c) * k);
                    im.set(r, c, im.at(r, c) * k);
                }
            }
        }
    }
    store.set_value(PILOT_RE, re)?;
    store.set_value(PILOT_IM, im)?;
    Ok(())
}
