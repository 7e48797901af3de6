use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-timestep noise tables, indexed `1..=T`. `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    let in_range = |b: f64| b > 0.0 && b < 1.0;
    if !in_range(beta_start) || !in_range(beta_end) || beta_start > beta_end {
        return Err(Error::Config(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// Default number of timesteps.
    pub const DEFAULT_STEPS: usize = 200;
    /// Default endpoints for 200 steps; the terminal `alpha_bar` stays
    /// within a factor of two of the 1000-step `(1e-4, 0.02)` schedule.
    pub const DEFAULT_BETA_START: f64 = 5e-4;
    pub const DEFAULT_BETA_END: f64 = 0.1;

    pub fn desk_default() -> Self {
        linear_schedule(
            Self::DEFAULT_STEPS,
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape("forward_sample", x0, eps)?;
    let ab = schedule.alpha_bar(t)?;
    schedule.check_t(t)?;
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// [`forward_sample`] with one timestep per leading-axis item.
pub fn forward_sample_batch<S: Scalar>(
    x0: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape("forward_sample_batch", x0, eps)?;
    let n = x0.shape()[0];
    if ts.len() != n {
        return Err(Error::shape(
            "forward_sample_batch (timesteps)",
            &[n],
            &[ts.len()],
        ));
    }
    let per = x0.numel() / n;
    let mut data = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        data.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), data)
}

/// Ancestral step with `sigma_t^2 = beta_t`. `z` is ignored at `t = 1`.
pub fn ddpm_step<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    z: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape("ddpm_step", x_t, eps_hat)?;
    same_shape("ddpm_step (noise)", x_t, z)?;
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let inv = S::of(1.0 / alpha.sqrt());
    let coef = S::of(beta / (1.0 - ab).sqrt());
    let sigma = if t > 1 { S::of(beta.sqrt()) } else { S::zero() };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv * (x - coef * e) + sigma * n)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Deterministic (eta = 0) step from `t` to `t_prev < t`.
pub fn ddim_step<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    same_shape("ddim_step", x_t, eps_hat)?;
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "ddim step must move backwards, got {t} -> {t_prev}"
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    // near T the x0 estimate is a large quotient that the next line mostly
    // cancels, so the arithmetic runs in f64 and rounds once
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let x0 = (x - sn * e) / sa;
            S::of(if t_prev == 0 { x0 } else { pa * x0 + pn * e })
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// `steps` timesteps evenly spaced from `T` down to 1, both included
/// (a single step visits only `T`).
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!(
            "number of inference steps must be in 1..={total}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = total - 1;
    let gaps = steps - 1;
    Ok((0..steps)
        .map(|i| total - (i * span + gaps / 2) / gaps)
        .collect())
}
