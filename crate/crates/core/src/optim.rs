//! Named parameters, AdamW, and global-norm gradient clipping.

use crate::tensor::{NumericsError, Tensor};
use std::collections::BTreeMap;

/// A named model parameter. `frozen` parameters keep their values verbatim:
/// the optimizer skips them and the model never routes gradients into them.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, frozen: bool) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
            frozen,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.rows(), self.value.cols());
    }
}

/// Decoupled-weight-decay Adam. First and second moments are keyed by
/// parameter name, so the caller may present parameters in any order and may
/// add parameters mid-stream (they start with fresh moments).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the given parameters. Frozen parameters are left
    /// bit-identical; everything else moves by the bias-corrected Adam rule
    /// with weight decay applied directly to the value (decoupled).
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<(), NumericsError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            if p.grad.shape() != p.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw_step",
                    a: p.value.shape(),
                    b: p.grad.shape(),
                });
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| {
                    (
                        Tensor::zeros(p.value.rows(), p.value.cols()),
                        Tensor::zeros(p.value.rows(), p.value.cols()),
                    )
                });
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                if !g.is_finite() {
                    return Err(NumericsError::NonFinite { op: "adamw_step" });
                }
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                value[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
        Ok(())
    }
}

/// Scales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm. The trigger has a tiny relative
/// tolerance so that re-clipping an already-clipped set is a bit-exact no-op.
pub fn clip_gradients(params: &mut [&mut Parameter], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params.iter() {
        if p.frozen {
            continue;
        }
        for g in p.grad.data() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
