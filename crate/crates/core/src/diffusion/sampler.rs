use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::schedule::{ddim_step, ddim_timesteps, ddpm_step, NoiseSchedule};
use crate::ablation::Mask;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::unet::{encode_masks, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!(
                "unknown sampler {other:?} (expected ddpm or ddim)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM subsequence length; DDPM always visits every timestep and
    /// requires this to equal `T`.
    pub num_inference_steps: usize,
    pub seed: u64,
    /// Images denoised together per model call.
    pub batch_size: usize,
}

impl SamplerConfig {
    /// DDIM with `T / 20` steps (at least one).
    pub fn ddim(schedule: &NoiseSchedule, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            num_inference_steps: (schedule.num_steps() / 20).max(1),
            seed,
            batch_size: 32,
        }
    }

    pub fn ddpm(schedule: &NoiseSchedule, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddpm,
            num_inference_steps: schedule.num_steps(),
            seed,
            batch_size: 32,
        }
    }

    /// Timesteps visited, in order.
    pub fn timesteps(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        let total = schedule.num_steps();
        match self.kind {
            SamplerKind::Ddim => ddim_timesteps(total, self.num_inference_steps),
            SamplerKind::Ddpm if self.num_inference_steps == total => {
                Ok((1..=total).rev().collect())
            }
            SamplerKind::Ddpm => Err(Error::Config(format!(
                "ddpm visits all {total} timesteps, got {} inference steps",
                self.num_inference_steps
            ))),
        }
    }
}

/// A mask-conditioned noise predictor `eps(x_t, t | m)`.
pub trait NoisePredictor<S: Scalar>: Sync {
    fn image_channels(&self) -> usize;

    /// `x_t` is `[N, c, H, W]`, `mask_channel` is `[N, 1, H, W]`.
    fn predict(
        &self,
        x_t: &Tensor<S>,
        mask_channel: &Tensor<S>,
        timesteps: &[usize],
    ) -> Result<Tensor<S>>;
}

impl<S: Scalar> NoisePredictor<S> for UNet<S> {
    fn image_channels(&self) -> usize {
        self.config().image_channels
    }

    fn predict(
        &self,
        x_t: &Tensor<S>,
        mask_channel: &Tensor<S>,
        timesteps: &[usize],
    ) -> Result<Tensor<S>> {
        self.predict_noise(x_t, mask_channel, timesteps)
    }
}

/// RNG stream owned by sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| {
        S::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Generates one image per mask, numbering samples from 0. See
/// [`sample_indexed`].
pub fn sample<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    masks: &[Mask],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<Tensor<S>> {
    sample_indexed(model, masks, 0, schedule, sampler)
}

/// Runs the reverse process from `x_T ~ N(0, I)` for each mask, feeding the
/// encoded mask channel at every step. Sample `first_index + i` draws all its
/// noise from its own stream, so results do not depend on batching.
/// Returns `[N, c, H, W]`.
pub fn sample_indexed<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    masks: &[Mask],
    first_index: u64,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<Tensor<S>> {
    let steps = sampler.timesteps(schedule)?;
    if sampler.batch_size == 0 {
        return Err(Error::Config("sampling batch size must be positive".into()));
    }
    let Some(first) = masks.first() else {
        return Err(Error::Contract("no masks to sample from".into()));
    };
    let (h, w) = (first.height(), first.width());
    let c = model.image_channels();
    let chunks: Vec<(usize, &[Mask])> = masks.chunks(sampler.batch_size).enumerate().collect();
    let parts = chunks
        .into_par_iter()
        .map(|(chunk_no, chunk)| {
            let start = first_index + (chunk_no * sampler.batch_size) as u64;
            denoise_chunk(model, chunk, start, (c, h, w), &steps, schedule, sampler)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}

/// The initial noise `x_T` that [`sample_indexed`] draws for one sample.
pub fn initial_noise<S: Scalar>(seed: u64, index: u64, shape: &[usize]) -> Tensor<S> {
    normal_tensor(&mut sample_rng(seed, index), shape)
}

fn denoise_chunk<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    chunk: &[Mask],
    start: u64,
    (c, h, w): (usize, usize, usize),
    steps: &[usize],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<Tensor<S>> {
    let mask_channel = encode_masks::<S>(chunk)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
        .map(|i| sample_rng(sampler.seed, start + i as u64))
        .collect();
    let per = [1, c, h, w];
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor<S>> {
        let noise: Vec<Tensor<S>> = rngs.iter_mut().map(|r| normal_tensor(r, &per)).collect();
        Tensor::stack_outer(&noise)
    };
    let mut x = draw(&mut rngs)?;
    for (k, &t) in steps.iter().enumerate() {
        let ts = vec![t; chunk.len()];
        let eps = model.predict(&x, &mask_channel, &ts)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("noise prediction", x.shape(), eps.shape()));
        }
        x = match sampler.kind {
            SamplerKind::Ddim => {
                let t_prev = steps.get(k + 1).copied().unwrap_or(0);
                ddim_step(&x, t, t_prev, &eps, schedule)?
            }
            SamplerKind::Ddpm => {
                let z = if t > 1 {
                    draw(&mut rngs)?
                } else {
                    Tensor::zeros(x.shape().to_vec())
                };
                ddpm_step(&x, t, &eps, &z, schedule)?
            }
        };
    }
    Ok(x)
}
