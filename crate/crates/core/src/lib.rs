//! Segmentation-guided diffusion for small synthetic medical images.
//!
//! The crate bundles a reverse-mode autodiff engine ([`autodiff`]), noise
//! schedules and samplers ([`diffusion`]), a UNet used both as the
//! mask-conditioned denoiser and as the segmenter ([`unet`]), random mask
//! ablation ([`ablation`]), a phantom dataset generator ([`phantom`]), and
//! training and evaluation ([`train`], [`eval`]).
//!
//! ```no_run
//! use segdiff_core::{gen_sample, NoiseSchedule, PhantomConfig, SamplerConfig, UNet, UNetConfig};
//! use rand::SeedableRng;
//!
//! let schedule = NoiseSchedule::desk_default();
//! let net = UNet::<f32>::init(UNetConfig::denoiser(4), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
//! let mask = gen_sample(&PhantomConfig::default(), 0)?.mask;
//! let images = segdiff_core::diffusion::sample(&net, &[mask], &schedule, &SamplerConfig::ddim(&schedule, 7))?;
//! assert_eq!(images.shape(), &[1, 1, 32, 32]);
//! # Ok::<(), segdiff_core::Error>(())
//! ```

pub mod ablation;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kv;
pub mod phantom;
pub mod train;
pub mod unet;

pub use error::{Error, Result};

pub use ablation::{AblationPattern, Mask};
pub use autodiff::{Scalar, Tensor};
pub use diffusion::{NoisePredictor, NoiseSchedule, SamplerConfig, SamplerKind};
pub use eval::EvalReport;
pub use phantom::{gen_sample, Dataset, LabeledSample, PhantomConfig, Split, SplitRatios};
pub use train::Checkpoint;
pub use unet::{UNet, UNetConfig};
