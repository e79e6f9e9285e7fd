use std::collections::BTreeMap;

use super::{DiffError, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

/// Named trainable tensors with per-parameter Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let zeros = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])?;
        self.slots.insert(
            name,
            Slot { value, first_moment: zeros.clone(), second_moment: zeros, step: 0 },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Replace a parameter value in place; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let slot = self.slots.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_value",
                detail: format!("{}: {:?} vs {:?}", name, slot.value.shape(), value.shape()),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// One bias-corrected Adam update for every parameter named in `grads`.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, opt: &Adam) -> Result<(), DiffError> {
        for (name, g) in grads {
            let slot = self.slots.get(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{}: parameter {:?}, gradient {:?}", name, slot.value.shape(), g.shape()),
                });
            }
        }
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("validated above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - opt.beta1.powi(t);
            let bc2 = 1.0 - opt.beta2.powi(t);
            let m = slot.first_moment.data_mut();
            let v = slot.second_moment.data_mut();
            let p = slot.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}
