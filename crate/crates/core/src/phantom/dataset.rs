use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::io::{load_sample, save_sample};
use super::{gen_sample, LabeledSample, PhantomConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "segdiff-phantoms-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Heldout,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Heldout, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Fractions of the dataset given to train, held-out train, validation and
/// test, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios(pub [f64; 4]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([0.7, 0.15, 0.075, 0.075])
    }
}

impl SplitRatios {
    /// Split sizes by largest remainder: floors first, then the leftover
    /// items go to the largest fractional parts (earlier split on ties).
    pub fn sizes(&self, n: usize) -> Result<[usize; 4]> {
        let r = self.0;
        if r.iter().any(|&v| v.is_nan() || v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be non-negative and sum to 1"
            )));
        }
        let quotas: Vec<f64> = r.iter().map(|v| v * n as f64).collect();
        let mut sizes = [0usize; 4];
        let mut fracs = [0f64; 4];
        for i in 0..4 {
            // tolerate representation error such as 0.7 * 100 = 69.999...
            let fl = (quotas[i] + 1e-9).floor();
            sizes[i] = fl as usize;
            fracs[i] = (quotas[i] - fl).max(0.0);
        }
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));
        let leftover = n - sizes.iter().sum::<usize>();
        for &i in order.iter().take(leftover) {
            sizes[i] += 1;
        }
        let empty: Vec<&str> = (0..4)
            .filter(|&i| sizes[i] == 0)
            .map(|i| Split::ALL[i].name())
            .collect();
        if !empty.is_empty() {
            return Err(Error::Config(format!(
                "n = {n} leaves split(s) {} empty",
                empty.join(", ")
            )));
        }
        Ok(sizes)
    }

    /// Contiguous, disjoint index ranges covering `0..n`.
    pub fn ranges(&self, n: usize) -> Result<[Range<u64>; 4]> {
        let sizes = self.sizes(n)?;
        let mut start = 0u64;
        Ok(sizes.map(|s| {
            let r = start..start + s as u64;
            start += s as u64;
            r
        }))
    }
}

/// A dataset directory: sample files plus its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    config: PhantomConfig,
    ranges: [Range<u64>; 4],
    manifest_hash: String,
}

fn range_text(r: &Range<u64>) -> String {
    format!("{}..{}", r.start, r.end)
}

fn parse_range(kv: &KeyValues, key: &str) -> Result<Range<u64>> {
    let v = kv.require(key)?;
    let bad = || Error::Config(format!("`{key}` must look like `lo..hi`, got {v:?}"));
    let (a, b) = v.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a > b {
        return Err(bad());
    }
    Ok(a..b)
}

fn manifest_text(config: &PhantomConfig, ranges: &[Range<u64>; 4]) -> String {
    let mut kv = KeyValues::new();
    kv.set("format", FORMAT_TAG);
    kv.set("source", "procedural phantoms; no clinical data");
    config.to_key_values(&mut kv);
    kv.set("n", ranges[3].end);
    for (s, r) in Split::ALL.iter().zip(ranges) {
        kv.set(format!("split.{s}"), range_text(r));
    }
    kv.to_text()
}

fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Generates `n` phantoms into `dir` (created if needed) and writes the
/// manifest last. Output bytes depend only on `(config, n, ratios)`.
pub fn gen_dataset(
    config: &PhantomConfig,
    n: usize,
    ratios: SplitRatios,
    dir: &Path,
) -> Result<Dataset> {
    config.validate()?;
    let ranges = ratios.ranges(n)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n as u64)
        .into_par_iter()
        .try_for_each(|i| save_sample(dir, &gen_sample(config, i)?))?;
    let text = manifest_text(config, &ranges);
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        config: config.clone(),
        ranges,
        manifest_hash: hash_hex(text.as_bytes()),
    })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = KeyValues::parse(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if kv.get("format") != Some(FORMAT_TAG) {
            return Err(Error::format(&path, "not a phantom dataset manifest"));
        }
        let config =
            PhantomConfig::from_key_values(&kv).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut ranges: [Range<u64>; 4] = Default::default();
        for (slot, s) in ranges.iter_mut().zip(Split::ALL) {
            *slot = parse_range(&kv, &format!("split.{s}"))
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
        if ranges.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(Error::format(&path, "split ranges overlap"));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            config,
            ranges,
            manifest_hash: hash_hex(text.as_bytes()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    /// SHA-256 of the manifest bytes, hex encoded.
    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn range(&self, split: Split) -> Range<u64> {
        self.ranges[split as usize].clone()
    }

    pub fn len(&self, split: Split) -> usize {
        let r = self.range(split);
        (r.end - r.start) as usize
    }

    pub fn load(&self, index: u64) -> Result<LabeledSample> {
        load_sample(&self.dir, index, self.config.num_classes)
    }

    /// All samples of `split` in index order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledSample>> {
        self.range(split)
            .into_par_iter()
            .map(|i| self.load(i))
            .collect()
    }
}
