//! Sub-vector quantization against a shared codebook, feedback bit packing,
//! and the VQ-VAE codebook/commitment terms with a straight-through gradient.

use std::fmt;

use rand::Rng;

use crate::diffcore::{CustomGrad, DiffError, Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::SimRng;

pub const CODEBOOK: &str = "vq.codebook";

/// `C x N_E` codeword matrix, `C` a power of two.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if !entries.is_matrix() || !entries.rows().is_power_of_two() {
            return Err(invalid(format!("codebook shape {:?}: size must be a power of two", entries.shape())));
        }
        if !entries.is_finite() {
            return Err(invalid("codebook contains non-finite entries"));
        }
        Ok(Codebook { entries })
    }

    /// Entries uniform in `[-1/C, 1/C]`.
    pub fn random(size: usize, dim: usize, rng: &mut SimRng) -> Result<Self> {
        let bound = 1.0 / size as f64;
        let data = (0..size * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Codebook::new(Tensor::matrix(size, dim, data)?)
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn codeword(&self, c: usize) -> &[f64] {
        self.entries.row_slice(c)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.entries
    }
}

/// Quantized latent: one codeword index per sub-vector, plus the assembled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMessage {
    pub indices: Vec<usize>,
    pub f: Vec<f64>,
}

/// Index of the closest codeword; ties go to the lowest index.
pub fn nearest_codeword(sub: &[f64], codebook: &Codebook) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..codebook.size() {
        let d: f64 = codebook.codeword(c).iter().zip(sub).map(|(e, z)| (e - z) * (e - z)).sum();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

pub fn quantize(z: &[f64], codebook: &Codebook) -> Result<FeedbackMessage> {
    let n_e = codebook.dim();
    if n_e == 0 || z.len() % n_e != 0 {
        return Err(invalid(format!("latent length {} not divisible by codeword size {}", z.len(), n_e)));
    }
    let indices: Vec<usize> = z.chunks(n_e).map(|sub| nearest_codeword(sub, codebook)).collect();
    let f = indices.iter().flat_map(|&i| codebook.codeword(i).iter().copied()).collect();
    Ok(FeedbackMessage { indices, f })
}

/// `B = (N_L / N_E) log2 C`.
pub fn feedback_bits(n_l: usize, n_e: usize, c: usize) -> Result<usize> {
    if n_e == 0 || n_l % n_e != 0 {
        return Err(invalid(format!("N_E = {} does not divide N_L = {}", n_e, n_l)));
    }
    if !c.is_power_of_two() {
        return Err(invalid(format!("codebook size {} is not a power of two", c)));
    }
    Ok(n_l / n_e * c.trailing_zeros() as usize)
}

/// Feedback payload, most significant bit of each index first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedbackBits(pub Vec<bool>);

impl FeedbackBits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for FeedbackBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

pub fn pack_feedback(indices: &[usize], codebook_size: usize) -> Result<FeedbackBits> {
    if !codebook_size.is_power_of_two() {
        return Err(invalid(format!("codebook size {} is not a power of two", codebook_size)));
    }
    let width = codebook_size.trailing_zeros() as usize;
    let mut bits = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        if i >= codebook_size {
            return Err(invalid(format!("index {} out of codebook of size {}", i, codebook_size)));
        }
        for b in (0..width).rev() {
            bits.push((i >> b) & 1 == 1);
        }
    }
    Ok(FeedbackBits(bits))
}

pub fn unpack_feedback(bits: &FeedbackBits, n_sub: usize, codebook_size: usize) -> Result<Vec<usize>> {
    if !codebook_size.is_power_of_two() {
        return Err(invalid(format!("codebook size {} is not a power of two", codebook_size)));
    }
    let width = codebook_size.trailing_zeros() as usize;
    if bits.len() != n_sub * width {
        return Err(invalid(format!("expected {} feedback bits, got {}", n_sub * width, bits.len())));
    }
    if width == 0 {
        return Ok(vec![0; n_sub]);
    }
    Ok(bits.0.chunks(width).map(|chunk| chunk.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)).collect())
}

/// `(||sg(z) - f||², β ||z - sg(f)||²)` evaluated without a graph.
pub fn vq_loss_terms(z: &[f64], f: &[f64], beta: f64) -> (f64, f64) {
    let d: f64 = z.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    (d, beta * d)
}

pub fn usage_histogram<'a>(indices: impl IntoIterator<Item = &'a usize>, codebook_size: usize) -> Vec<usize> {
    let mut h = vec![0; codebook_size];
    for &i in indices {
        h[i] += 1;
    }
    h
}

struct StraightThrough;

impl CustomGrad for StraightThrough {
    fn name(&self) -> &'static str {
        "quantizer"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad_out.clone())]
    }
}

/// Graph outputs of the quantizer for a batch of latents.
pub struct VqNode {
    /// Quantized latents `[B, N_L]`; downstream gradients pass straight to `z`.
    pub f: Var,
    pub indices: Vec<Vec<usize>>,
    /// `||sg(z) - f||²` per sample `[B,1]`, differentiable in the codebook only.
    pub codebook_term: Var,
    /// `β ||z - sg(f)||²` per sample `[B,1]`, differentiable in `z` only.
    pub commitment_term: Var,
}

pub fn vq_node(g: &mut Graph, z: Var, codebook: Var, beta: f64) -> Result<VqNode> {
    let cb = Codebook::new(g.value(codebook).clone())?;
    let (b, n_l) = (g.value(z).rows(), g.value(z).cols());
    let n_e = cb.dim();
    if n_l % n_e != 0 {
        return Err(DiffError::ShapeMismatch {
            op: "quantizer",
            detail: format!("latent width {} vs codeword size {}", n_l, n_e),
        }
        .into());
    }
    let mut indices = Vec::with_capacity(b);
    let mut f_data = Vec::with_capacity(b * n_l);
    for i in 0..b {
        let msg = quantize(g.value(z).row_slice(i), &cb)?;
        f_data.extend_from_slice(&msg.f);
        indices.push(msg.indices);
    }
    let f_value = Tensor::matrix(b, n_l, f_data)?;
    let f = g.custom(&[z], f_value.clone(), Box::new(StraightThrough))?;

    let flat: Vec<usize> = indices.iter().flatten().copied().collect();
    let z_sg = g.stop_gradient(z)?;
    let z_sub = g.reshape(z_sg, b * n_l / n_e, n_e)?;
    let chosen = g.gather_rows(codebook, &flat)?;
    let d = g.sub(z_sub, chosen)?;
    let d2 = g.square(d)?;
    let d2 = g.reshape(d2, b, n_l)?;
    let codebook_term = g.sum_rows(d2)?;

    let f_sg = g.constant(f_value)?;
    let c = g.sub(z, f_sg)?;
    let c2 = g.square(c)?;
    let c2 = g.sum_rows(c2)?;
    let commitment_term = g.scale(c2, beta)?;

    Ok(VqNode { f, indices, codebook_term, commitment_term })
}
