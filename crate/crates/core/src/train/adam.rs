use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based step count after this update.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64) {
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let one = T::one();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    let (lr, eps) = (T::of(lr), T::of(EPSILON));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam moments for a fixed set of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub ids: Vec<ParamId>,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape());
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
        }
    }

    /// Applies the accumulated gradients in `store` to its values.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            if id.index() >= store.len() {
                return Err(Error::Parameter(format!("unknown parameter {}", id.index())));
            }
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            adam_step(
                p.value.data_mut(),
                &grad,
                self.m[k].data_mut(),
                self.v[k].data_mut(),
                self.t,
                lr,
            );
        }
        Ok(())
    }
}

/// Step size after halving at 50% and again at 75% of a phase.
pub fn scheduled_lr(base: f64, iteration: usize, phase_len: usize) -> f64 {
    let mut lr = base;
    if 2 * iteration >= phase_len {
        lr *= 0.5;
    }
    if 4 * iteration >= 3 * phase_len {
        lr *= 0.5;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = [1.0f64, -2.0];
        let mut m = [0.5, 0.1];
        let mut v = [0.2, 0.3];
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, 1e-3);
        assert_eq!(p[1], -2.0 - 1e-3 * (0.1 * 0.9 / (1.0 - 0.9f64.powi(3))) / ((0.3 * 0.999 / (1.0 - 0.999f64.powi(3))).sqrt() + 1e-8));
        assert_eq!(m, [0.9 * 0.5, 0.9 * 0.1]);
        let mut q = [1.0f64];
        adam_step(&mut q, &[0.0], &mut [0.0], &mut [0.0], 1, 1e-3);
        assert_eq!(q, [1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [0.0f64];
        adam_step(&mut p, &[1.0], &mut [0.0], &mut [0.0], 1, 1e-3);
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn schedule_halves_twice() {
        assert_eq!(scheduled_lr(1.0, 0, 100), 1.0);
        assert_eq!(scheduled_lr(1.0, 49, 100), 1.0);
        assert_eq!(scheduled_lr(1.0, 50, 100), 0.5);
        assert_eq!(scheduled_lr(1.0, 75, 100), 0.25);
    }
}
