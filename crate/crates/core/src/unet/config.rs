use crate::error::{Error, Result};

/// What the network is used for; decides its input/output channels and
/// whether it is conditioned on the diffusion timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// Noise predictor: image channels plus one mask channel in, image
    /// channels out, timestep conditioned.
    Denoiser,
    /// Per-pixel classifier: image channels in, one logit per class out.
    Segmenter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub kind: NetKind,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Zero disables timestep conditioning.
    pub time_embed_dim: usize,
    /// Mask classes including background.
    pub num_classes: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn denoiser(num_classes: usize) -> Self {
        UNetConfig {
            kind: NetKind::Denoiser,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 64,
            num_classes,
            image_size: 32,
            image_channels: 1,
            groups: 4,
        }
    }

    /// Segmenter backbone; with these defaults the bottleneck has 32 channels,
    /// which is also the feature dimension used for the Fréchet distance.
    pub fn segmenter(num_classes: usize) -> Self {
        UNetConfig {
            kind: NetKind::Segmenter,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 0,
            num_classes,
            image_size: 32,
            image_channels: 1,
            groups: 4,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            NetKind::Denoiser => self.image_channels + 1,
            NetKind::Segmenter => self.image_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            NetKind::Denoiser => self.image_channels,
            NetKind::Segmenter => self.num_classes,
        }
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels().last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config(
                "channel_multipliers must be a nonempty list of positive values".into(),
            ));
        }
        if self.base_channels == 0 || self.image_channels == 0 || self.image_size == 0 {
            return Err(Error::Config(
                "base_channels, image_channels and image_size must be positive".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let factor = 1usize << (levels - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.groups == 0 || self.level_channels().iter().any(|c| c % self.groups != 0) {
            return Err(Error::Config(format!(
                "every level width must be divisible by {} groups",
                self.groups
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        if self.kind == NetKind::Denoiser && self.time_embed_dim == 0 {
            return Err(Error::Config("a denoiser needs a time embedding".into()));
        }
        Ok(())
    }
}
