use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, LossRecord};
use crate::ablation::Mask;
use crate::autodiff::{lr_schedule, AdamWConfig, AdamWState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            epochs: 40,
            batch_size: 8,
            base_lr: 3e-3,
            warmup_steps: 0,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl SegmenterConfig {
    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.set("mode", "segmenter");
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("base_lr", self.base_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("seed", self.seed);
    }
}

/// An image `[1, c, H, W]` with its target label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPair {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

pub struct SegmenterRun {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    /// `(epoch, step after the epoch, validation loss)` per epoch.
    pub validation: Vec<(usize, u64, f64)>,
    pub best_epoch: usize,
}

fn targets(masks: &[&Mask]) -> Vec<usize> {
    masks
        .iter()
        .flat_map(|m| m.labels().iter().map(|&l| l as usize))
        .collect()
}

fn batch_of(pairs: &[SegPair], idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let images: Vec<Tensor<f32>> = idx.iter().map(|&i| pairs[i].image.clone()).collect();
    let masks: Vec<&Mask> = idx.iter().map(|&i| &pairs[i].mask).collect();
    Ok((Tensor::stack_outer(&images)?, targets(&masks)))
}

/// Mean per-pixel cross-entropy of `net` over `pairs`.
pub fn segmentation_loss(net: &UNet<f32>, pairs: &[SegPair], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch_of(pairs, chunk)?;
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape, false);
        let xv = tape.constant(x);
        let (logits, _) = net.forward(&mut tape, &vars, xv, None)?;
        let loss = tape.cross_entropy_per_pixel(logits, &y)?;
        total += tape.value(loss).item()? as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains a segmenter with per-pixel cross-entropy and keeps the epoch with
/// the lowest validation loss (the earliest one on ties).
pub fn train_segmenter(
    train: &[SegPair],
    validation: &[SegPair],
    config: &SegmenterConfig,
    unet: &UNetConfig,
) -> Result<SegmenterRun> {
    if validation.is_empty() {
        return Err(Error::Config(
            "segmenter training needs a non-empty validation split".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Config("segmenter training set is empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let c = unet.num_classes;
    if let Some(p) = train
        .iter()
        .chain(validation)
        .find(|p| p.mask.num_classes() != c)
    {
        return Err(Error::Config(format!(
            "mask with {} classes given to a {c}-class segmenter",
            p.mask.num_classes()
        )));
    }
    let total = (config.epochs * train.len().div_ceil(config.batch_size)) as u64;
    lr_schedule(0, total, config.warmup_steps, config.base_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = UNet::<f32>::init(unet.clone(), &mut rng)?;
    let mut opt = AdamWState::new(net.params().tensors(), config.adamw);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut val_log = Vec::new();
    let mut best: Option<(f64, usize, u64, UNet<f32>)> = None;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = lr_schedule(step, total, config.warmup_steps, config.base_lr)?;
            let (x, y) = batch_of(train, chunk)?;
            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape, true);
            let xv = tape.constant(x);
            let (logits, _) = net.forward(&mut tape, &vars, xv, None)?;
            let loss_var = tape.cross_entropy_per_pixel(logits, &y)?;
            let loss = tape.value(loss_var).item()? as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "segmenter loss is {loss} at step {step} (lr {lr:.3e})"
                )));
            }
            tape.backward(loss_var)?;
            let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
            opt.step(net.params_mut().tensors_mut(), &grads, lr)?;
            losses.push(LossRecord {
                step,
                epoch,
                lr,
                loss,
            });
            step += 1;
        }
        let v = segmentation_loss(&net, validation, 64)?;
        val_log.push((epoch, step, v));
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, epoch, step, net.clone()));
        }
    }
    let (_, best_epoch, best_step, best_net) = best.expect("at least one epoch ran");
    let mut info = KeyValues::new();
    config.to_key_values(&mut info);
    info.set("best_epoch", best_epoch);
    Ok(SegmenterRun {
        checkpoint: Checkpoint::from_net(&best_net, None, best_step, info),
        losses,
        validation: val_log,
        best_epoch,
    })
}

/// Per-pixel argmax labels for a batch of images `[N, c, H, W]`.
pub fn segment(net: &UNet<f32>, images: &Tensor<f32>) -> Result<Vec<Mask>> {
    Ok(segment_with_features(net, images)?.0)
}

/// Argmax label maps plus pooled bottleneck features `[N, d]`.
pub fn segment_with_features(
    net: &UNet<f32>,
    images: &Tensor<f32>,
) -> Result<(Vec<Mask>, Tensor<f32>)> {
    let (logits, feats) = net.segment_with_features(images)?;
    let s = logits.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let base = &logits.data()[i * c * hw..(i + 1) * c * hw];
        let labels: Vec<u8> = (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if base[k * hw + p] > base[best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        masks.push(Mask::new(w, h, c, labels)?);
    }
    Ok((masks, feats))
}
