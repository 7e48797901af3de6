//! AdamW with decoupled weight decay, and the warm-up + cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state: one pair of moment tensors per parameter.
#[derive(Debug, Clone)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    step_count: u64,
    first_moment: Vec<Vec<S>>,
    second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &[Tensor<S>], config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `grads[i]` is the gradient of `params[i]`; a
    /// missing gradient is an error and leaves every parameter untouched.
    pub fn step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Option<&[S]>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => {
                    return Err(Error::Contract(format!(
                        "parameter {i} has no gradient for the optimizer step"
                    )))
                }
                Some(g) if g.len() != p.numel() || self.first_moment[i].len() != p.numel() => {
                    return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
                }
                Some(_) => {}
            }
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (S::of(1.0 / bc1), S::of(1.0 / bc2));
        let (lr_s, wd, eps) = (S::of(lr), S::of(c.weight_decay), S::of(c.eps));

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                *w -= lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(0.5 * base_lr * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut p = scalar_param(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        for _ in 0..5 {
            st.step(&mut p, &[Some(&[0.0])], 0.1).unwrap();
        }
        assert_eq!(p[0].data()[0], 0.37);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        st.step(&mut p, &[Some(&[1.0])], 0.1).unwrap();
        // bias-corrected first step: lr * g / (|g| + eps)
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn two_identical_steps_follow_moment_recursion() {
        // scalar hand trace: g = 0.5 twice, lr = 0.01, wd = 0.1
        let (g, lr, wd) = (0.5, 0.01, 0.1);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut w = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * (mh / (vh.sqrt() + eps) + wd * w);
        }

        let mut p = scalar_param(2.0);
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        st.step(&mut p, &[Some(&[g])], lr).unwrap();
        st.step(&mut p, &[Some(&[g])], lr).unwrap();
        assert!((p[0].data()[0] - w).abs() < 1e-14);
    }

    #[test]
    fn missing_grad_is_an_error_and_changes_nothing() {
        let mut p = vec![Tensor::scalar(1.0f64), Tensor::scalar(2.0)];
        let mut st = AdamWState::new(&p, AdamWConfig::default());
        assert!(st.step(&mut p, &[Some(&[1.0]), None], 0.1).is_err());
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 1000, 100, 1e-3).unwrap(), 0.0);
        assert_eq!(lr_schedule(100, 1000, 100, 1e-3).unwrap(), 1e-3);
        let mid = lr_schedule(550, 1000, 100, 1e-3).unwrap();
        assert!((mid - 5e-4).abs() < 1e-15);
        assert!(lr_schedule(1000, 1000, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!(matches!(
            lr_schedule(0, 10, 11, 1e-3),
            Err(Error::Config(_))
        ));
    }
}
