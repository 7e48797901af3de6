use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use segdiff_core::diffusion::{linear_schedule, NoiseSchedule};
use segdiff_core::kv::KeyValues;
use segdiff_core::phantom::{Dataset, LabeledSample, Split};
use segdiff_core::train::{
    epoch_means, loss_tsv, pattern_histogram_tsv, train_diffusion, train_segmenter, Checkpoint,
    SegPair, SegmenterConfig, StepView, TrainConfig, TrainMode,
};
use segdiff_core::unet::UNetConfig;
use segdiff_core::{Error, Result};

use super::{missing, progress, write_text};
use crate::config::{read_file, Flags, RunConfig};
use crate::TrainArgs;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

const KEYS: &[&str] = &[
    "data",
    "mode",
    "epochs",
    "batch_size",
    "base_lr",
    "warmup_steps",
    "seed",
    "base_channels",
    "diffusion_steps",
    "beta_start",
    "beta_end",
];

/// What `train --mode` accepts: a diffusion mode or the auxiliary segmenter.
enum Target {
    Diffusion(TrainMode),
    Segmenter,
}

fn parse_target(s: &str) -> Result<Target> {
    match s {
        "segmenter" => Ok(Target::Segmenter),
        other => other.parse().map(Target::Diffusion).map_err(|_| {
            Error::Config(format!(
                "unknown mode {other:?} (expected guided, guided-ablated, unconditional or segmenter)"
            ))
        }),
    }
}

fn defaults(target: &Target) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("data", "");
    kv.set("seed", 0);
    match target {
        Target::Diffusion(mode) => {
            let c = TrainConfig::for_mode(*mode);
            kv.set("mode", mode);
            kv.set("epochs", c.epochs);
            kv.set("batch_size", c.batch_size);
            kv.set("base_lr", c.base_lr);
            kv.set("warmup_steps", c.warmup_steps);
            kv.set("base_channels", UNetConfig::denoiser(4).base_channels);
            kv.set("diffusion_steps", NoiseSchedule::DEFAULT_STEPS);
            kv.set("beta_start", NoiseSchedule::DEFAULT_BETA_START);
            kv.set("beta_end", NoiseSchedule::DEFAULT_BETA_END);
        }
        Target::Segmenter => {
            let c = SegmenterConfig::default();
            kv.set("mode", "segmenter");
            kv.set("epochs", c.epochs);
            kv.set("batch_size", c.batch_size);
            kv.set("base_lr", c.base_lr);
            kv.set("warmup_steps", c.warmup_steps);
            kv.set("base_channels", UNetConfig::segmenter(4).base_channels);
        }
    }
    kv
}

fn data_info(ds: &Dataset, split: Split, n: usize, info: &mut KeyValues) {
    info.set("data.manifest_sha256", ds.manifest_hash());
    info.set("data.split", split);
    info.set("data.n", n);
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let file = read_file(args.config.as_deref())?;
    let mode_text = args
        .mode
        .clone()
        .or_else(|| {
            file.as_ref()
                .and_then(|f| f.get("mode").map(str::to_string))
        })
        .unwrap_or_else(|| TrainMode::GuidedAblated.to_string());
    let target = parse_target(&mode_text)?;
    let mut flags = Flags::default();
    flags
        .put("data", args.data.as_ref().map(|p| p.display()))
        .put("mode", args.mode.as_ref())
        .put("epochs", args.epochs)
        .put("seed", args.seed)
        .put("batch_size", args.batch_size)
        .put("base_lr", args.lr)
        .put("warmup_steps", args.warmup)
        .put("base_channels", args.base_channels)
        .put("diffusion_steps", args.diffusion_steps);
    let mut rc = RunConfig::resolve(defaults(&target), file.as_ref(), &flags.into_inner(), KEYS)?;
    let data = rc
        .get("data")
        .ok_or_else(|| missing("data", "dataset directory"))?
        .to_string();
    let ds = Dataset::open(data.as_ref())?;
    rc.set("data.manifest_sha256", ds.manifest_hash());
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    rc.write(&args.out)?;
    match target {
        Target::Diffusion(mode) => train_diffusion_cmd(&rc, &ds, mode, args),
        Target::Segmenter => train_segmenter_cmd(&rc, &ds, args),
    }
}

fn train_diffusion_cmd(
    rc: &RunConfig,
    ds: &Dataset,
    mode: TrainMode,
    args: &TrainArgs,
) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.epochs = rc.require("epochs")?;
    cfg.batch_size = rc.require("batch_size")?;
    cfg.base_lr = rc.require("base_lr")?;
    cfg.warmup_steps = rc.require("warmup_steps")?;
    cfg.seed = rc.require("seed")?;
    let mut unet = UNetConfig::denoiser(ds.num_classes());
    unet.image_size = ds.image_size();
    unet.base_channels = rc.require("base_channels")?;
    let schedule = linear_schedule(
        rc.require("diffusion_steps")?,
        rc.require("beta_start")?,
        rc.require("beta_end")?,
    )?;
    let train = ds.load_split(Split::Train)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1)) as u64;
    progress(format!(
        "training {mode} on {} phantoms: {} epochs, {} steps",
        train.len(),
        cfg.epochs,
        cfg.total_steps(train.len())
    ));

    let started = Instant::now();
    let mut probe = String::from("step\tnonzero_mask_pixels\tmask_channel_max\n");
    let mut epoch_sum = 0.0;
    let mut observer = |v: &StepView<'_>| {
        let data = v.mask_channel.data();
        let nonzero = data.iter().filter(|x| **x != 0.0).count();
        let max = data.iter().fold(0.0f32, |a, x| a.max(x.abs()));
        let _ = writeln!(probe, "{}\t{nonzero}\t{max}", v.record.step);
        epoch_sum += v.record.loss;
        if (v.record.step + 1).is_multiple_of(steps_per_epoch) {
            progress(format!(
                "epoch {} mean loss {:.5} ({:.0?} elapsed)",
                v.record.epoch,
                epoch_sum / steps_per_epoch as f64,
                started.elapsed()
            ));
            epoch_sum = 0.0;
        }
    };
    let mut run = train_diffusion(&train, &cfg, &unet, &schedule, Some(&mut observer))?;
    data_info(ds, Split::Train, train.len(), &mut run.checkpoint.info);
    run.checkpoint.save(&args.out.join(CHECKPOINT_FILE))?;
    write_text(&args.out, "loss.tsv", &loss_tsv(&run.losses))?;
    write_text(&args.out, "mask_probe.tsv", &probe)?;
    if cfg.effective_ablation() {
        write_text(
            &args.out,
            "ablation_histogram.tsv",
            &pattern_histogram_tsv(unet.num_classes, &run.pattern_counts)?,
        )?;
    }
    let means = epoch_means(&run.losses);
    println!(
        "trained {mode}: first-epoch loss {:.5}, final-epoch loss {:.5}, checkpoint {}",
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN),
        args.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn pairs(samples: Vec<LabeledSample>) -> Vec<SegPair> {
    samples
        .into_iter()
        .map(|s| SegPair {
            image: s.image,
            mask: s.mask,
        })
        .collect()
}

fn train_segmenter_cmd(rc: &RunConfig, ds: &Dataset, args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = SegmenterConfig {
        epochs: rc.require("epochs")?,
        batch_size: rc.require("batch_size")?,
        base_lr: rc.require("base_lr")?,
        warmup_steps: rc.require("warmup_steps")?,
        seed: rc.require("seed")?,
        ..Default::default()
    };
    let mut unet = UNetConfig::segmenter(ds.num_classes());
    unet.image_size = ds.image_size();
    unet.base_channels = rc.require("base_channels")?;
    let train = pairs(ds.load_split(Split::Heldout)?);
    let validation = pairs(ds.load_split(Split::Validation)?);
    progress(format!(
        "training segmenter on {} held-out phantoms: {} epochs",
        train.len(),
        cfg.epochs
    ));
    let mut run = train_segmenter(&train, &validation, &cfg, &unet)?;
    data_info(ds, Split::Heldout, train.len(), &mut run.checkpoint.info);
    run.checkpoint.save(&args.out.join(CHECKPOINT_FILE))?;
    write_text(&args.out, "loss.tsv", &loss_tsv(&run.losses))?;
    let mut val = String::from("epoch\tstep\tvalidation_loss\n");
    for (epoch, step, loss) in &run.validation {
        let _ = writeln!(val, "{epoch}\t{step}\t{loss:.6}");
    }
    write_text(&args.out, "validation.tsv", &val)?;
    println!(
        "trained segmenter: best epoch {}, checkpoint {} ({})",
        run.best_epoch,
        args.out.join(CHECKPOINT_FILE).display(),
        Checkpoint::id(&run.checkpoint)?
    );
    Ok(())
}
