use crate::ablation::Mask;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Sinusoidal timestep encoding: `dim/2` sines followed by `dim/2` cosines
/// at geometrically spaced frequencies `10000^(-i / (dim/2))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dim must be even and positive, got {dim}"
            )));
        }
        Ok(TimeEmbedding { dim })
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect()
    }

    /// `[N, dim]` encoding of a batch of timesteps.
    pub fn encode<S: Scalar>(&self, ts: &[usize]) -> Tensor<S> {
        let freqs = self.frequencies();
        let half = freqs.len();
        let mut data = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            let t = t as f64;
            data.extend(freqs.iter().map(|w| S::of((t * w).sin())));
            data.extend(freqs.iter().map(|w| S::of((t * w).cos())));
        }
        debug_assert_eq!(data.len(), ts.len() * 2 * half);
        Tensor::new([ts.len(), self.dim], data).expect("embedding length is N * dim")
    }
}

/// Encodes a label map as the single conditioning channel: label `c` maps to
/// `c / (C - 1)`, or to 0 when there is only one class.
pub fn encode_mask<S: Scalar>(mask: &Mask) -> Result<Tensor<S>> {
    mask.validate()?;
    let c = mask.num_classes();
    let scale = if c > 1 { 1.0 / (c - 1) as f64 } else { 0.0 };
    let data = mask
        .labels()
        .iter()
        .map(|&l| S::of(l as f64 * scale))
        .collect();
    Tensor::new([1, 1, mask.height(), mask.width()], data)
}

/// Stacks the encoded masks of a batch into `[N, 1, H, W]`.
pub fn encode_masks<S: Scalar>(masks: &[Mask]) -> Result<Tensor<S>> {
    let parts = masks
        .iter()
        .map(encode_mask)
        .collect::<Result<Vec<Tensor<S>>>>()?;
    Tensor::stack_outer(&parts)
}
