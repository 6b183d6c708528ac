use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with classical (in-gradient) L2: `g ← g + λ·w` before the moment
/// update, for parameters that decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    /// First and second moments, allocated on first use of each slot.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(param, grad, decays)` slot. Slot `i` keeps its
    /// moment buffers across calls. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step_slices(&mut self, slots: &mut [(&mut [f64], &[f64], bool)], lr: f64) -> Result<()> {
        for (i, (p, g, _)) in slots.iter().enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim(
                    "adam",
                    format!("slot {i}"),
                    format!("{} parameters but {} gradients", p.len(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in slot {i}")));
            }
        }
        self.step += 1;
        if self.moments.len() < slots.len() {
            self.moments.resize(slots.len(), None);
        }
        for (i, (p, g, decays)) in slots.iter_mut().enumerate() {
            self.update(i, p, g, *decays, lr)?;
        }
        Ok(())
    }

    /// Updates the trainable parameters for which gradients are given.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.param(*id);
            if p.value.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    p.name.clone(),
                    format!("parameter {:?} vs gradient {:?}", p.value.shape(), g.shape()),
                ));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient for {}", p.name)));
            }
        }
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let kind = store.param(*id).kind;
            if !kind.trainable() {
                continue;
            }
            self.update(id.index(), store.get_mut(*id).data_mut(), g.data(), kind.decays(), lr)?;
        }
        Ok(())
    }

    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64], decays: bool, lr: f64) -> Result<()> {
        let (m, v) = self.moments[slot].get_or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        if m.len() != p.len() {
            return Err(Error::dim(
                "adam",
                format!("slot {slot}"),
                format!("moment buffers hold {} values, parameter {}", m.len(), p.len()),
            ));
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let wd = if decays { self.weight_decay } else { 0.0 };
        for i in 0..p.len() {
            let grad = g[i] + wd * p[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
