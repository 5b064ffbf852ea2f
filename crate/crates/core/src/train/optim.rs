//! AdamW with decoupled weight decay.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub weight_decay: f64,
    /// Per parameter: whether decay applies.
    decay: Vec<bool>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    /// Completed updates per parameter; parameters without a gradient at a
    /// step are skipped and keep their own count.
    steps: Vec<u64>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &[Tensor<F>], decay: Vec<bool>, weight_decay: f64) -> Self {
        assert_eq!(params.len(), decay.len(), "one decay flag per parameter");
        AdamW {
            weight_decay,
            decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.v
    }

    /// One update. `grads[i] = None` leaves parameter `i` and its state alone.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let (b1, b2) = (F::from_real(BETA1), F::from_real(BETA2));
        let (one_b1, one_b2) = (F::from_real(1.0 - BETA1), F::from_real(1.0 - BETA2));
        let eps = F::from_real(EPS);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = F::from_real(1.0 - BETA1.powi(t));
            let bc2 = F::from_real(1.0 - BETA2.powi(t));
            let lr_f = F::from_real(lr);
            let shrink = F::from_real(if self.decay[i] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            });
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * shrink - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_real() * v.to_real())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = F::from_real(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    norm
}
