pub mod evaluate;
pub mod gen_data;
pub mod sample;
pub mod train;

use std::fs;
use std::path::Path;

use segdiff_core::diffusion::{NoiseSchedule, SamplerConfig, SamplerKind};
use segdiff_core::{Error, Result};

use crate::config::RunConfig;

/// A required input that neither the config file nor a flag supplied.
pub fn missing(flag: &str, what: &str) -> Error {
    Error::Config(format!("missing input: --{flag} ({what})"))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Sampler from the `sampler`, `steps`, `seed` and `batch_size` settings.
pub fn sampler_config(rc: &RunConfig, schedule: &NoiseSchedule) -> Result<SamplerConfig> {
    let kind: SamplerKind = rc.require("sampler")?;
    let seed = rc.require("seed")?;
    let mut cfg = match kind {
        SamplerKind::Ddim => SamplerConfig::ddim(schedule, seed),
        SamplerKind::Ddpm => SamplerConfig::ddpm(schedule, seed),
    };
    if let Some(steps) = rc.optional("steps")? {
        cfg.num_inference_steps = steps;
    }
    if let Some(b) = rc.optional("batch_size")? {
        cfg.batch_size = b;
    }
    cfg.timesteps(schedule)?;
    Ok(cfg)
}

pub fn progress(msg: impl AsRef<str>) {
    eprintln!("[segdiff] {}", msg.as_ref());
}
