use std::fs;
use std::path::Path;

use segdiff_core::ablation::Mask;
use segdiff_core::eval::{
    eval_empty_mask, eval_faithfulness, eval_fid, eval_quality, stack_images, DiffusionGenerator,
    EvalReport, ImageGenerator, NoiseGenerator, OracleGenerator,
};
use segdiff_core::kv::KeyValues;
use segdiff_core::phantom::{Dataset, LabeledSample, Split};
use segdiff_core::train::{Checkpoint, SegmenterConfig};
use segdiff_core::unet::{UNet, UNetConfig};
use segdiff_core::{Error, Result};

use super::{missing, progress, sampler_config};
use crate::config::{read_file, Flags, RunConfig};
use crate::EvaluateArgs;

const KEYS: &[&str] = &[
    "protocol",
    "gen_ckpt",
    "seg_ckpt",
    "uncond_ckpt",
    "data",
    "n",
    "sampler",
    "steps",
    "seed",
    "batch_size",
    "seg_epochs",
    "seg_batch_size",
    "seg_lr",
    "seg_base_channels",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Faithfulness,
    Quality,
    Fid,
    EmptyMask,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithfulness" => Ok(Protocol::Faithfulness),
            "quality" => Ok(Protocol::Quality),
            "fid" => Ok(Protocol::Fid),
            "empty-mask" => Ok(Protocol::EmptyMask),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected faithfulness, quality, fid or empty-mask)"
            ))),
        }
    }
}

fn defaults() -> KeyValues {
    let seg = SegmenterConfig::default();
    let mut kv = KeyValues::new();
    for k in [
        "protocol",
        "gen_ckpt",
        "seg_ckpt",
        "uncond_ckpt",
        "data",
        "n",
        "steps",
        "batch_size",
    ] {
        kv.set(k, "");
    }
    kv.set("sampler", "ddim");
    kv.set("seed", 0);
    kv.set("seg_epochs", seg.epochs);
    kv.set("seg_batch_size", seg.batch_size);
    kv.set("seg_lr", seg.base_lr);
    kv.set("seg_base_channels", UNetConfig::segmenter(4).base_channels);
    kv
}

/// A checkpoint path, or the `oracle` (returns `real` images) and `noise`
/// stand-ins.
fn generator(
    spec: &str,
    rc: &RunConfig,
    real: &[LabeledSample],
    prov: &mut KeyValues,
    role: &str,
) -> Result<Box<dyn ImageGenerator>> {
    let g: Box<dyn ImageGenerator> = match spec {
        "oracle" => Box::new(OracleGenerator {
            images: real.iter().map(|s| s.image.clone()).collect(),
        }),
        "noise" => Box::new(NoiseGenerator {
            seed: rc.require("seed")?,
        }),
        path => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            let schedule = ckpt
                .schedule
                .clone()
                .ok_or_else(|| Error::Config(format!("{path} is not a diffusion checkpoint")))?;
            prov.set(format!("{role}_checkpoint_id"), ckpt.id()?);
            Box::new(DiffusionGenerator::from_checkpoint(
                &ckpt,
                sampler_config(rc, &schedule)?,
            )?)
        }
    };
    prov.set(format!("{role}_source"), spec);
    Ok(g)
}

fn segmenter(rc: &RunConfig, prov: &mut KeyValues) -> Result<UNet<f32>> {
    let path = rc
        .get("seg_ckpt")
        .ok_or_else(|| missing("seg-ckpt", "segmenter checkpoint"))?;
    let ckpt = Checkpoint::load(Path::new(path))?;
    prov.set("segmenter_checkpoint_id", ckpt.id()?);
    ckpt.to_net()
}

fn take(mut samples: Vec<LabeledSample>, n: Option<usize>) -> Result<Vec<LabeledSample>> {
    if let Some(n) = n {
        if n > samples.len() {
            return Err(Error::Config(format!(
                "asked for {n} test items but the split has {}",
                samples.len()
            )));
        }
        samples.truncate(n);
    }
    Ok(samples)
}

fn masks_of(samples: &[LabeledSample]) -> Vec<Mask> {
    samples.iter().map(|s| s.mask.clone()).collect()
}

pub fn run(args: &EvaluateArgs) -> anyhow::Result<()> {
    let mut flags = Flags::default();
    flags
        .put("protocol", args.protocol.as_ref())
        .put("gen_ckpt", args.gen_ckpt.as_ref())
        .put("seg_ckpt", args.seg_ckpt.as_ref().map(|p| p.display()))
        .put("uncond_ckpt", args.uncond_ckpt.as_ref())
        .put("data", args.data.as_ref().map(|p| p.display()))
        .put("n", args.n)
        .put("sampler", args.sampler.as_ref())
        .put("steps", args.steps)
        .put("seed", args.seed)
        .put("seg_epochs", args.seg_epochs);
    let file = read_file(args.config.as_deref())?;
    let mut rc = RunConfig::resolve(defaults(), file.as_ref(), &flags.into_inner(), KEYS)?;
    let protocol: Protocol = rc
        .get("protocol")
        .ok_or_else(|| missing("protocol", "faithfulness, quality, fid or empty-mask"))?
        .parse()?;
    let data = rc
        .get("data")
        .ok_or_else(|| missing("data", "dataset directory"))?;
    let gen_spec = rc
        .get("gen_ckpt")
        .ok_or_else(|| missing("gen-ckpt", "diffusion checkpoint, `oracle` or `noise`"))?
        .to_string();
    let ds = Dataset::open(Path::new(data))?;
    rc.set("data.manifest_sha256", ds.manifest_hash());
    let n: Option<usize> = rc.optional("n")?;
    let mut prov = KeyValues::new();
    prov.set("data_manifest_sha256", ds.manifest_hash());

    let report = match protocol {
        Protocol::Faithfulness => {
            let seg = segmenter(&rc, &mut prov)?;
            let test = take(ds.load_split(Split::Test)?, n)?;
            let g = generator(&gen_spec, &rc, &test, &mut prov, "generator")?;
            progress(format!(
                "faithfulness over {} test masks with {}",
                test.len(),
                g.describe()
            ));
            eval_faithfulness(g.as_ref(), &seg, &masks_of(&test), &stack_images(&test)?)?
        }
        Protocol::Quality => {
            let heldout = ds.load_split(Split::Heldout)?;
            let validation = ds.load_split(Split::Validation)?;
            let test = take(ds.load_split(Split::Test)?, n)?;
            let g = generator(&gen_spec, &rc, &heldout, &mut prov, "generator")?;
            let cfg = SegmenterConfig {
                epochs: rc.require("seg_epochs")?,
                batch_size: rc.require("seg_batch_size")?,
                base_lr: rc.require("seg_lr")?,
                seed: rc.require("seed")?,
                ..Default::default()
            };
            let mut unet = UNetConfig::segmenter(ds.num_classes());
            unet.image_size = ds.image_size();
            unet.base_channels = rc.require("seg_base_channels")?;
            progress(format!(
                "quality: two segmenters on {} held-out masks, generator {}",
                heldout.len(),
                g.describe()
            ));
            let run = eval_quality(&heldout, g.as_ref(), &validation, &test, &cfg, &unet)?;
            fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            run.real.checkpoint.save(&args.out.join("seg_real.ckpt"))?;
            run.synthetic
                .checkpoint
                .save(&args.out.join("seg_synthetic.ckpt"))?;
            run.report
        }
        Protocol::Fid => {
            let seg = segmenter(&rc, &mut prov)?;
            let test = take(ds.load_split(Split::Test)?, n)?;
            let g = generator(&gen_spec, &rc, &test, &mut prov, "generator")?;
            progress(format!(
                "feature FID over {} test masks with {}",
                test.len(),
                g.describe()
            ));
            let generated = g.generate(&masks_of(&test), 0)?;
            eval_fid(&seg, &generated, &stack_images(&test)?)?
        }
        Protocol::EmptyMask => {
            let seg = segmenter(&rc, &mut prov)?;
            let uncond_spec = rc
                .get("uncond_ckpt")
                .ok_or_else(|| missing("uncond-ckpt", "unconditional diffusion checkpoint"))?
                .to_string();
            let test = ds.load_split(Split::Test)?;
            let count = n.unwrap_or(test.len());
            let a = generator(&gen_spec, &rc, &test, &mut prov, "ablated")?;
            let u = generator(&uncond_spec, &rc, &test, &mut prov, "unconditional")?;
            progress(format!(
                "empty-mask sampling: {count} images from each model"
            ));
            eval_empty_mask(a.as_ref(), u.as_ref(), &seg, &stack_images(&test)?, count)?
        }
    };
    let mut report: EvalReport = report;
    for (k, v) in prov.iter() {
        report.provenance.set(k, v);
    }
    report.validate()?;
    report.write(&args.out)?;
    rc.write(&args.out)?;
    print!("{}", report.to_text());
    Ok(())
}
