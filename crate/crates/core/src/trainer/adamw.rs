//! Adaptive-moment optimizer with decoupled weight decay.

use crate::scalar::Scalar;
use crate::segnet::{Gradients, ParameterSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moments are kept in f64 whatever the parameter precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParameterSet<T>, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW {
            learning_rate,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `w <- w (1 - lr wd)`, then the bias-corrected moment step.
    pub fn step<T: Scalar>(&mut self, params: &mut ParameterSet<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        for (k, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in tensor.data.iter_mut().enumerate() {
                let g = grads.tensors[k][i].as_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let updated = w.as_f64() * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
                *w = T::from_f64_lossy(updated);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{init_params, UNetConfig};

    fn small() -> ParameterSet<f64> {
        let cfg = UNetConfig {
            in_channels: 2,
            base_width: 2,
            depth: 1,
            dropout_rate: 0.0,
            norm_enabled: true,
        };
        let mut p: ParameterSet<f64> = init_params(&cfg, 5).unwrap();
        for t in p.tensors.iter_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += 0.01 * (i as f64 + 1.0);
            }
        }
        p
    }

    fn quadratic_grads(p: &ParameterSet<f64>) -> Gradients<f64> {
        Gradients {
            tensors: p.tensors.iter().map(|t| t.data.clone()).collect(),
        }
    }

    #[test]
    fn quadratic_probe_matches_closed_form() {
        let (lr, wd) = (1e-3, 1e-4);
        let mut p = small();
        let mut opt = AdamW::new(&p, lr, wd);
        let mut m: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut v = m.clone();
        for t in 1..=3 {
            let before = p.clone();
            let g = quadratic_grads(&p);
            opt.step(&mut p, &g);
            for (k, tensor) in before.tensors.iter().enumerate() {
                for (i, &w) in tensor.data.iter().enumerate() {
                    let gi = w;
                    m[k][i] = 0.9 * m[k][i] + 0.1 * gi;
                    v[k][i] = 0.999 * v[k][i] + 0.001 * gi * gi;
                    let mh = m[k][i] / (1.0 - 0.9f64.powi(t));
                    let vh = v[k][i] / (1.0 - 0.999f64.powi(t));
                    let want = w * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
                    assert!((p.tensors[k].data[i] - want).abs() < 1e-10);
                }
            }
        }
        // the first step moves every parameter with a nonzero gradient by ~lr
        let mut q = small();
        let before = q.clone();
        let mut opt = AdamW::new(&q, lr, 0.0);
        let g = quadratic_grads(&q);
        opt.step(&mut q, &g);
        for (a, b) in q.tensors.iter().zip(&before.tensors) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                if y != 0.0 {
                    let expect = lr * y.abs() / (y.abs() + 1e-8);
                    assert!(((y - x).abs() - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = small();
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0, 0.5);
        let g = quadratic_grads(&p);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let (lr, wd) = (0.01, 0.3);
        let mut p = small();
        let before = p.clone();
        let mut opt = AdamW::new(&p, lr, wd);
        let zero = Gradients::zeros_like(&p);
        for _ in 0..4 {
            opt.step(&mut p, &zero);
        }
        let f = (1.0 - lr * wd).powi(4);
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert!((x - y * f).abs() < 1e-15);
            }
        }
    }
}
