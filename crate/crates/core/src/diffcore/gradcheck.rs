//! Central finite differences for checking hand-written backward rules.
//!
//! These helpers only evaluate the function; they never touch the tape, so
//! they stay independent of the gradient code they check.

use super::Tensor;

/// Central-difference gradient of `f` with respect to every entry of every input.
pub fn central_difference(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = inputs[k].map(|_| 0.0);
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = f(&work);
            work[k].data_mut()[i] = orig - step;
            let down = f(&work);
            work[k].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// `max |a - b| / max(max |a|, max |b|, 1e-8)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}
