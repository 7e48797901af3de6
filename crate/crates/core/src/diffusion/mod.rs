//! Noise schedules, the closed-form forward process and reverse samplers.

mod sampler;
mod schedule;

pub use sampler::{
    initial_noise, sample, sample_indexed, sample_rng, NoisePredictor, SamplerConfig, SamplerKind,
};
pub use schedule::{
    ddim_step, ddim_timesteps, ddpm_step, forward_sample, forward_sample_batch, linear_schedule,
    NoiseSchedule,
};
