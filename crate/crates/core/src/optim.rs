//! Adam with bias correction and linear warmup.
//!
//! Plain Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8), no weight decay, constant
//! learning rate after warmup. State is kept per tensor, aligned with the
//! caller's canonical tensor order.

use ndarray::Array2;

use crate::autograd::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
#[error("non-finite gradient in tensor {name}")]
pub struct NonFiniteGradient {
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    pub step: u64,
}

/// Learning rate after `t` steps: linear warmup to `lr` over
/// `warmup_steps`, then constant.
pub fn lr_at(lr: f64, warmup_steps: u64, t: u64) -> f64 {
    if warmup_steps == 0 {
        lr
    } else {
        lr * ((t as f64 / warmup_steps as f64).min(1.0))
    }
}

impl<F: Scalar> AdamState<F> {
    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Array2<F>> = shapes.into_iter().map(Array2::zeros).collect();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn n_tensors(&self) -> usize {
        self.m.len()
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// One Adam update for tensor `idx` at the current step.
    pub fn update_tensor(
        &mut self,
        idx: usize,
        name: &str,
        tensor: &mut Array2<F>,
        grad: &Array2<F>,
        lr_t: f64,
    ) -> Result<(), NonFiniteGradient> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NonFiniteGradient {
                name: name.to_string(),
            });
        }
        let t = self.step as i32;
        let beta1 = F::from_f64(BETA1);
        let beta2 = F::from_f64(BETA2);
        let one = F::one();
        let eps = F::from_f64(EPSILON);
        let bias1 = F::from_f64(1.0 - BETA1.powi(t));
        let bias2 = F::from_f64(1.0 - BETA2.powi(t));
        let lr = F::from_f64(lr_t);

        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for ((p, g), (m, v)) in tensor
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = beta1 * *m + (one - beta1) * *g;
            *v = beta2 * *v + (one - beta2) * *g * *g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
