//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdiff_core::ablation::Mask;
use segdiff_core::autodiff::Tensor;
use segdiff_core::phantom::{gen_sample, PhantomConfig};
use segdiff_core::unet::{UNet, UNetConfig};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// A 4-class denoiser with `base` channels and randomly initialized weights.
pub fn denoiser(base: usize) -> UNet<f32> {
    let mut cfg = UNetConfig::denoiser(4);
    cfg.base_channels = base;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    UNet::init(cfg, &mut rng).expect("valid denoiser config")
}

/// The first `n` default phantom masks.
pub fn phantom_masks(n: usize) -> Vec<Mask> {
    let cfg = PhantomConfig::default();
    (0..n as u64)
        .map(|i| gen_sample(&cfg, i).expect("default phantoms generate").mask)
        .collect()
}
