use std::fs;
use std::path::{Path, PathBuf};

use segdiff_core::ablation::{apply_pattern, AblationPattern, Mask};
use segdiff_core::eval::{DiffusionGenerator, ImageGenerator};
use segdiff_core::kv::KeyValues;
use segdiff_core::phantom::io::{load_mask, save_image, save_mask, write_pgm};
use segdiff_core::phantom::{Dataset, Split, MANIFEST_FILE};
use segdiff_core::train::Checkpoint;
use segdiff_core::{Error, Result};

use super::{missing, progress, sampler_config};
use crate::config::{read_file, Flags, RunConfig};
use crate::sheet::contact_sheet;
use crate::SampleArgs;

const KEYS: &[&str] = &[
    "ckpt",
    "masks",
    "pattern",
    "sampler",
    "steps",
    "n",
    "seed",
    "batch_size",
    "sheet_columns",
];
/// Masks generated from when `--masks empty` is given without `--n`.
const DEFAULT_EMPTY_COUNT: usize = 16;

fn defaults() -> KeyValues {
    let mut kv = KeyValues::new();
    for k in ["ckpt", "masks", "pattern", "steps", "n", "batch_size"] {
        kv.set(k, "");
    }
    kv.set("sampler", "ddim");
    kv.set("seed", 0);
    kv.set("sheet_columns", 8);
    kv
}

/// Parses a comma-separated class list; the empty string removes nothing.
pub fn parse_pattern(text: &str, num_classes: usize) -> Result<AblationPattern> {
    let removed: Vec<usize> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("--pattern: {s:?} is not a class number")))
        })
        .collect::<Result<_>>()?;
    AblationPattern::new(num_classes, &removed)
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("msk_") && n.ends_with(".pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Conditioning masks from `source`: `empty`, a dataset directory (its test
/// split) or a directory of `msk_*.pgm` files.
fn load_masks(source: &str, n: Option<usize>, ckpt: &Checkpoint) -> Result<Vec<Mask>> {
    let (size, classes) = (ckpt.config.image_size, ckpt.config.num_classes);
    if source == "empty" {
        return Ok(vec![
            Mask::empty(size, size, classes);
            n.unwrap_or(DEFAULT_EMPTY_COUNT)
        ]);
    }
    let dir = Path::new(source);
    let masks: Vec<Mask> = if dir.join(MANIFEST_FILE).exists() {
        let ds = Dataset::open(dir)?;
        let len = ds.len(Split::Test);
        let take = n.unwrap_or(len).min(len);
        ds.load_split(Split::Test)?
            .into_iter()
            .take(take)
            .map(|s| s.mask)
            .collect()
    } else {
        let files = mask_files(dir)?;
        let take = n.unwrap_or(files.len()).min(files.len());
        files[..take]
            .iter()
            .map(|p| load_mask(p, classes))
            .collect::<Result<_>>()?
    };
    if masks.is_empty() {
        return Err(Error::Config(format!("no masks found in {source}")));
    }
    if let Some(n) = n {
        if masks.len() < n {
            return Err(Error::Config(format!(
                "asked for {n} masks but {source} has only {}",
                masks.len()
            )));
        }
    }
    if let Some(m) = masks
        .iter()
        .find(|m| (m.width(), m.height()) != (size, size))
    {
        return Err(Error::Config(format!(
            "masks are {}x{} but the model generates {size}x{size} images",
            m.width(),
            m.height()
        )));
    }
    Ok(masks)
}

pub fn run(args: &SampleArgs) -> anyhow::Result<()> {
    let mut flags = Flags::default();
    flags
        .put("ckpt", args.ckpt.as_ref().map(|p| p.display()))
        .put("masks", args.masks.as_ref())
        .put("pattern", args.pattern.as_ref())
        .put("sampler", args.sampler.as_ref())
        .put("steps", args.steps)
        .put("n", args.n)
        .put("seed", args.seed);
    let file = read_file(args.config.as_deref())?;
    let rc = RunConfig::resolve(defaults(), file.as_ref(), &flags.into_inner(), KEYS)?;
    let ckpt_path = rc
        .get("ckpt")
        .ok_or_else(|| missing("ckpt", "diffusion checkpoint"))?;
    let source = rc
        .get("masks")
        .ok_or_else(|| missing("masks", "mask directory or `empty`"))?;
    let ckpt = Checkpoint::load(Path::new(ckpt_path))?;
    let pattern = parse_pattern(
        rc.get("pattern").unwrap_or_default(),
        ckpt.config.num_classes,
    )?;
    let schedule = ckpt
        .schedule
        .clone()
        .ok_or_else(|| Error::Config(format!("{ckpt_path} is not a diffusion checkpoint")))?;
    let sampler = sampler_config(&rc, &schedule)?;

    let masks = load_masks(source, rc.optional("n")?, &ckpt)?;
    let masks: Vec<Mask> = masks
        .iter()
        .map(|m| apply_pattern(m, &pattern))
        .collect::<Result<_>>()?;
    let generator = DiffusionGenerator::from_checkpoint(&ckpt, sampler)?;
    progress(format!(
        "sampling {} images with {}",
        masks.len(),
        generator.describe()
    ));
    let images = generator.generate(&masks, 0)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    rc.write(&args.out)?;
    for (i, m) in masks.iter().enumerate() {
        save_image(
            &args.out.join(format!("gen_{i:06}.pgm")),
            &images.slice_outer(i, i + 1)?,
        )?;
        save_mask(&args.out.join(format!("msk_{i:06}.pgm")), m)?;
    }
    let (w, h, px) = contact_sheet(&masks, &images, rc.require("sheet_columns")?)?;
    write_pgm(&args.out.join("contact_sheet.pgm"), w, h, &px)?;
    println!(
        "wrote {} samples and contact_sheet.pgm to {}",
        masks.len(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_parsing() {
        assert!(parse_pattern("", 4).unwrap().is_empty());
        assert_eq!(
            parse_pattern("1, 3", 4).unwrap().removed_classes(),
            vec![1, 3]
        );
        assert!(matches!(parse_pattern("4", 4), Err(Error::Config(_))));
        assert!(matches!(parse_pattern("0", 4), Err(Error::Config(_))));
        assert!(matches!(parse_pattern("x", 4), Err(Error::Config(_))));
    }
}
