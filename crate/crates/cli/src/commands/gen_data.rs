use segdiff_core::kv::KeyValues;
use segdiff_core::phantom::{gen_dataset, PhantomConfig, SplitRatios};
use segdiff_core::Error;

use super::progress;
use crate::config::{read_file, Flags, RunConfig};
use crate::GenDataArgs;

const KEYS: &[&str] = &[
    "n",
    "ratios",
    "image_size",
    "num_classes",
    "seed",
    "noise_sigma",
    "illumination_amplitude",
    "vessel_count",
    "blob_count",
    "organ_fraction_min",
    "organ_fraction_max",
    "band.*",
];

/// A decimal or a `p/q` fraction.
fn parse_ratio(text: &str) -> Option<f64> {
    match text.split_once('/') {
        Some((p, q)) => Some(p.trim().parse::<f64>().ok()? / q.trim().parse::<f64>().ok()?),
        None => text.trim().parse().ok(),
    }
}

fn parse_ratios(text: &str) -> segdiff_core::Result<SplitRatios> {
    let bad = || {
        Error::Config(format!(
            "ratios must be four numbers or fractions, got {text:?}"
        ))
    };
    let parts: Vec<f64> = text
        .split(',')
        .map(parse_ratio)
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    let arr: [f64; 4] = parts.try_into().map_err(|_| bad())?;
    Ok(SplitRatios(arr))
}

pub fn run(args: &GenDataArgs) -> anyhow::Result<()> {
    let mut defaults = KeyValues::new();
    PhantomConfig::default().to_key_values(&mut defaults);
    defaults.set("n", 1000);
    let r = SplitRatios::default().0.map(|v| v.to_string());
    defaults.set("ratios", r.join(","));
    let mut flags = Flags::default();
    flags
        .put("n", args.n)
        .put("seed", args.seed)
        .put("ratios", args.ratios.as_ref());
    let file = read_file(args.config.as_deref())?;
    let rc = RunConfig::resolve(defaults, file.as_ref(), &flags.into_inner(), KEYS)?;

    let config = PhantomConfig::from_key_values(rc.values())?;
    let n: usize = rc.require("n")?;
    let ratios = parse_ratios(rc.get("ratios").unwrap_or_default())?;
    ratios.sizes(n)?;
    progress(format!(
        "generating {n} phantoms into {}",
        args.out.display()
    ));
    let ds = gen_dataset(&config, n, ratios, &args.out)?;
    rc.write(&args.out)?;
    println!(
        "wrote {n} phantoms to {} (manifest sha256 {})",
        args.out.display(),
        ds.manifest_hash()
    );
    Ok(())
}
