use std::collections::HashSet;

use rand::Rng;

use super::dice::dataset_dice;
use super::fid::{feature_fid, tensor_rows};
use super::EvalReport;
use crate::ablation::Mask;
use crate::autodiff::Tensor;
use crate::diffusion::{sample_indexed, sample_rng, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::phantom::LabeledSample;
use crate::train::{
    segment_with_features, train_segmenter, Checkpoint, SegPair, SegmenterConfig, SegmenterRun,
};
use crate::unet::{UNet, UNetConfig};

/// Images scored per segmenter call.
const SEGMENT_BATCH: usize = 64;

pub const FID_NOTE: &str =
    "feature FID uses the pooled bottleneck of a segmenter trained on this dataset; \
values are not comparable to Inception-based FID or to FIDs from other encoders";

/// Produces one image per mask. `first_index` numbers the first mask so
/// that per-image randomness does not depend on how work is split.
pub trait ImageGenerator: Sync {
    fn describe(&self) -> String;
    fn generate(&self, masks: &[Mask], first_index: u64) -> Result<Tensor<f32>>;
}

/// A trained diffusion model run through a sampler.
pub struct DiffusionGenerator {
    pub net: UNet<f32>,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    /// Unconditional models are always fed all-background masks.
    pub conditioned: bool,
}

impl DiffusionGenerator {
    pub fn from_checkpoint(ckpt: &Checkpoint, sampler: SamplerConfig) -> Result<Self> {
        let schedule = ckpt.schedule.clone().ok_or_else(|| {
            Error::Config("checkpoint has no noise schedule (is it a segmenter?)".into())
        })?;
        Ok(DiffusionGenerator {
            net: ckpt.to_net()?,
            schedule,
            sampler,
            conditioned: ckpt.info.get("mode") != Some("unconditional"),
        })
    }
}

impl ImageGenerator for DiffusionGenerator {
    fn describe(&self) -> String {
        format!(
            "diffusion ({}, {} steps, {})",
            self.sampler.kind,
            self.sampler.num_inference_steps,
            if self.conditioned {
                "mask-conditioned"
            } else {
                "unconditional"
            }
        )
    }

    fn generate(&self, masks: &[Mask], first_index: u64) -> Result<Tensor<f32>> {
        if self.conditioned {
            sample_indexed(&self.net, masks, first_index, &self.schedule, &self.sampler)
        } else {
            let empty: Vec<Mask> = masks
                .iter()
                .map(|m| Mask::empty(m.width(), m.height(), m.num_classes()))
                .collect();
            sample_indexed(
                &self.net,
                &empty,
                first_index,
                &self.schedule,
                &self.sampler,
            )
        }
    }
}

/// Returns stored images by index; stands in for a perfect generator.
pub struct OracleGenerator {
    pub images: Vec<Tensor<f32>>,
}

impl ImageGenerator for OracleGenerator {
    fn describe(&self) -> String {
        "oracle (real images)".into()
    }

    fn generate(&self, masks: &[Mask], first_index: u64) -> Result<Tensor<f32>> {
        let start = first_index as usize;
        let parts = self.images.get(start..start + masks.len()).ok_or_else(|| {
            Error::Contract(format!(
                "no paired real image for indices {start}..{}",
                start + masks.len()
            ))
        })?;
        Tensor::stack_outer(parts)
    }
}

/// Uniform noise in [-1, 1], one stream per image.
pub struct NoiseGenerator {
    pub seed: u64,
}

impl ImageGenerator for NoiseGenerator {
    fn describe(&self) -> String {
        "uniform noise".into()
    }

    fn generate(&self, masks: &[Mask], first_index: u64) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = sample_rng(self.seed, first_index + i as u64);
                Tensor::from_fn([1, 1, m.height(), m.width()], |_| {
                    rng.random_range(-1.0f32..=1.0)
                })
            })
            .collect();
        Tensor::stack_outer(&parts)
    }
}

/// Images of `samples` as one `[N, c, H, W]` tensor.
pub fn stack_images(samples: &[LabeledSample]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack_outer(&parts)
}

/// Predicted label maps and pooled features for every image.
pub fn segment_all(
    segmenter: &UNet<f32>,
    images: &Tensor<f32>,
) -> Result<(Vec<Mask>, Vec<Vec<f64>>)> {
    let n = images.shape()[0];
    let mut masks = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for start in (0..n).step_by(SEGMENT_BATCH) {
        let chunk = images.slice_outer(start, (start + SEGMENT_BATCH).min(n))?;
        let (m, f) = segment_with_features(segmenter, &chunk)?;
        masks.extend(m);
        feats.extend(tensor_rows(&f)?);
    }
    Ok((masks, feats))
}

fn add_per_class(report: &mut EvalReport, name: &str, per: &[f64]) {
    for (k, v) in per.iter().enumerate() {
        report.set(format!("{name}.class{}", k + 1), *v);
    }
}

/// Generates an image from every mask, segments it, and compares the
/// prediction with the input mask and with the prediction on the paired
/// real image.
pub fn eval_faithfulness(
    generator: &dyn ImageGenerator,
    segmenter: &UNet<f32>,
    masks: &[Mask],
    real_images: &Tensor<f32>,
) -> Result<EvalReport> {
    if real_images.shape()[0] != masks.len() {
        return Err(Error::Contract(format!(
            "{} masks but {} paired real images",
            masks.len(),
            real_images.shape()[0]
        )));
    }
    let generated = generator.generate(masks, 0)?;
    let (pred_gen, _) = segment_all(segmenter, &generated)?;
    let (pred_real, _) = segment_all(segmenter, real_images)?;
    let mut r = EvalReport::new("faithfulness");
    r.set("n", masks.len() as f64);
    let (d, per) = dataset_dice(&pred_gen, masks)?;
    r.set("dice_gen_vs_mask", d);
    add_per_class(&mut r, "dice_gen_vs_mask", &per);
    let (d, per) = dataset_dice(&pred_gen, &pred_real)?;
    r.set("dice_gen_vs_real", d);
    add_per_class(&mut r, "dice_gen_vs_real", &per);
    let (d, per) = dataset_dice(&pred_real, masks)?;
    r.set("dice_real_vs_mask", d);
    add_per_class(&mut r, "dice_real_vs_mask", &per);
    r.provenance.set("generator", generator.describe());
    Ok(r)
}

fn check_disjoint(parts: &[(&str, &[LabeledSample])]) -> Result<()> {
    let mut seen: HashSet<u64> = HashSet::new();
    for (name, samples) in parts {
        for s in samples.iter() {
            if !seen.insert(s.index) {
                return Err(Error::Config(format!(
                    "split `{name}` overlaps another split at index {}",
                    s.index
                )));
            }
        }
    }
    Ok(())
}

pub struct QualityRun {
    pub report: EvalReport,
    pub real: SegmenterRun,
    pub synthetic: SegmenterRun,
}

/// Trains one segmenter on real held-out pairs and one on images generated
/// from the same masks, and compares their test Dice.
pub fn eval_quality(
    heldout: &[LabeledSample],
    generator: &dyn ImageGenerator,
    validation: &[LabeledSample],
    test: &[LabeledSample],
    config: &SegmenterConfig,
    unet: &UNetConfig,
) -> Result<QualityRun> {
    check_disjoint(&[
        ("heldout", heldout),
        ("validation", validation),
        ("test", test),
    ])?;
    let masks: Vec<Mask> = heldout.iter().map(|s| s.mask.clone()).collect();
    let generated = generator.generate(&masks, 0)?;
    let pairs = |ss: &[LabeledSample]| -> Vec<SegPair> {
        ss.iter()
            .map(|s| SegPair {
                image: s.image.clone(),
                mask: s.mask.clone(),
            })
            .collect()
    };
    let real_pairs = pairs(heldout);
    let synth_pairs: Vec<SegPair> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(SegPair {
                image: generated.slice_outer(i, i + 1)?,
                mask: m.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let val = pairs(validation);
    let real = train_segmenter(&real_pairs, &val, config, unet)?;
    let synthetic = train_segmenter(&synth_pairs, &val, config, unet)?;
    let test_images = stack_images(test)?;
    let test_masks: Vec<Mask> = test.iter().map(|s| s.mask.clone()).collect();
    let score = |run: &SegmenterRun| -> Result<(f64, Vec<f64>)> {
        let (pred, _) = segment_all(&run.checkpoint.to_net()?, &test_images)?;
        dataset_dice(&pred, &test_masks)
    };
    let (dr, pr) = score(&real)?;
    let (ds, ps) = score(&synthetic)?;
    let mut r = EvalReport::new("quality");
    r.set("n_train", heldout.len() as f64);
    r.set("n_test", test.len() as f64);
    r.set("dice_real", dr);
    r.set("dice_synthetic", ds);
    r.set("dice_gap", dr - ds);
    add_per_class(&mut r, "dice_real", &pr);
    add_per_class(&mut r, "dice_synthetic", &ps);
    r.provenance.set("generator", generator.describe());
    Ok(QualityRun {
        report: r,
        real,
        synthetic,
    })
}

/// Fraction of images in which the segmenter finds any foreground.
pub fn organ_found_fraction(predicted: &[Mask]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().filter(|m| m.has_foreground()).count() as f64 / predicted.len() as f64
}

/// Feature FID between two image sets under `encoder`.
pub fn eval_fid(encoder: &UNet<f32>, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<EvalReport> {
    let (_, fa) = segment_all(encoder, a)?;
    let (_, fb) = segment_all(encoder, b)?;
    let mut r = EvalReport::new("fid");
    r.set("n_a", fa.len() as f64);
    r.set("n_b", fb.len() as f64);
    r.set("fid", feature_fid(&fa, &fb)?);
    r.notes.push(FID_NOTE.into());
    Ok(r)
}

/// Samples `n` images from each model with all-background masks and
/// compares them with real images by feature FID and by how often the
/// segmenter finds an organ.
pub fn eval_empty_mask(
    ablated: &dyn ImageGenerator,
    unconditional: &dyn ImageGenerator,
    segmenter: &UNet<f32>,
    real_images: &Tensor<f32>,
    n: usize,
) -> Result<EvalReport> {
    let mut r = EvalReport::new("empty-mask");
    if n == 0 {
        return Ok(r);
    }
    let cfg = segmenter.config();
    let masks = vec![Mask::empty(cfg.image_size, cfg.image_size, cfg.num_classes); n];
    let (pred_real, feat_real) = segment_all(segmenter, real_images)?;
    let from_a = ablated.generate(&masks, 0)?;
    let from_u = unconditional.generate(&masks, 0)?;
    let (pred_a, feat_a) = segment_all(segmenter, &from_a)?;
    let (pred_u, feat_u) = segment_all(segmenter, &from_u)?;
    let fid_a = feature_fid(&feat_a, &feat_real)?;
    let fid_u = feature_fid(&feat_u, &feat_real)?;
    r.set("n", n as f64);
    r.set("fid_ablated", fid_a);
    r.set("fid_unconditional", fid_u);
    r.set(
        "fid_ablated_le_unconditional",
        (fid_a <= fid_u) as u8 as f64,
    );
    r.set("organ_found.ablated", organ_found_fraction(&pred_a));
    r.set("organ_found.unconditional", organ_found_fraction(&pred_u));
    r.set("organ_found.real", organ_found_fraction(&pred_real));
    r.provenance.set("ablated_generator", ablated.describe());
    r.provenance
        .set("unconditional_generator", unconditional.describe());
    r.notes.push(FID_NOTE.into());
    Ok(r)
}
