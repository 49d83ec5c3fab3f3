//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            learning_rate: 3e-4,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct OptimizerState<T: Scalar = f32> {
    pub hyper: AdamWHyper,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], hyper: AdamWHyper) -> Self {
        let m = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
        OptimizerState { hyper, t: 0, m, v }
    }

    pub fn moments(&self, idx: usize) -> (&[T], &[T]) {
        (&self.m[idx], &self.v[idx])
    }

    /// Restore moments saved in a checkpoint.
    pub fn restore(&mut self, idx: usize, m: Vec<T>, v: Vec<T>, t: u64) -> Result<()> {
        if m.len() != self.m[idx].len() || v.len() != self.v[idx].len() {
            return Err(Error::dimension(
                "optimizer restore",
                &[m.len(), v.len()],
                format!("{} elements", self.m[idx].len()),
            ));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        self.t = t;
        Ok(())
    }
}

/// One AdamW step over `params` at learning rate `lr`.
///
/// Weight decay is decoupled: it scales the parameter directly and never
/// enters the moment estimates. Parameters without an accumulated gradient
/// are treated as having a zero gradient (decay still applies). Gradients
/// are consumed (zeroed) by the step.
pub fn adamw_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &[Tensor<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::dimension(
            "adamw_step",
            &[params.len()],
            format!("{} parameter slots", state.m.len()),
        ));
    }
    state.t += 1;
    let h = state.hyper;
    let b1 = T::from_f64(h.beta1);
    let b2 = T::from_f64(h.beta2);
    let one_m_b1 = T::from_f64(1.0 - h.beta1);
    let one_m_b2 = T::from_f64(1.0 - h.beta2);
    let bc1 = T::from_f64(1.0 / (1.0 - h.beta1.powi(state.t as i32)));
    let bc2 = T::from_f64(1.0 / (1.0 - h.beta2.powi(state.t as i32)));
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * h.weight_decay);
    let eps = T::from_f64(h.eps);

    for (idx, p) in params.iter().enumerate() {
        if p.numel() != state.m[idx].len() {
            return Err(Error::dimension(
                "adamw_step",
                &p.shape(),
                format!("{} elements in moment slot {}", state.m[idx].len(), idx),
            ));
        }
        let grad = p.grad();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        p.update_data(|data| {
            for i in 0..data.len() {
                let g = grad.as_ref().map(|g| g[i]).unwrap_or(T::ZERO);
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * bc1;
                let v_hat = v[i] * bc2;
                data[i] = data[i] - decay * data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        });
        p.zero_grad();
    }
    Ok(())
}

/// Cosine annealing from `initial_lr` down to `final_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial_lr: 3e-4,
            final_lr: 1e-6,
            total_steps: 1,
        }
    }
}

impl LrSchedule {
    /// lr(t) = final + 0.5 (initial - final)(1 + cos(pi t / total)).
    /// Out-of-range `t` clamps to the endpoints.
    pub fn cosine_lr(&self, t: u64) -> f64 {
        if self.total_steps == 0 {
            return self.final_lr;
        }
        let t = t.min(self.total_steps);
        let frac = t as f64 / self.total_steps as f64;
        self.final_lr + 0.5 * (self.initial_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
