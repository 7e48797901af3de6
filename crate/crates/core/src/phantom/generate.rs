use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ablation::Mask;
use crate::autodiff::Tensor;
use crate::diffusion::sample_rng;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const VESSEL: u8 = 2;
pub const DENSE: u8 = 3;

const CLASS_NAMES: [&str; 4] = ["background", "organ", "vessel", "dense"];

/// Attempts at drawing an organ of acceptable size before giving up.
pub const MAX_ORGAN_RETRIES: usize = 100;

/// Nominal intensity of one class in image units ([-1, 1]). `spread` is the
/// half-width of the band the class may occupy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub spread: f64,
}

/// Procedural phantom parameters. Classes are background, organ, vessel and
/// dense tissue, in that order; fewer classes drop the later ones. Vessel and
/// blob counts are drawn uniformly from their inclusive ranges, so with the
/// defaults each of the two inner classes is absent with probability 1/4.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub bands: Vec<Band>,
    pub noise_sigma: f64,
    pub illumination_amplitude: f64,
    pub vessel_count: (usize, usize),
    pub blob_count: (usize, usize),
    /// Accepted organ area as a fraction of the image.
    pub organ_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 32,
            num_classes: 4,
            bands: vec![
                Band {
                    mean: -0.85,
                    spread: 0.05,
                },
                Band {
                    mean: -0.2,
                    spread: 0.08,
                },
                Band {
                    mean: 0.8,
                    spread: 0.08,
                },
                Band {
                    mean: 0.3,
                    spread: 0.08,
                },
            ],
            noise_sigma: 0.03,
            illumination_amplitude: 0.1,
            vessel_count: (0, 3),
            blob_count: (0, 3),
            organ_fraction: (0.15, 0.6),
            seed: 0,
        }
    }
}

fn parse_range(kv: &KeyValues, key: &str) -> Result<Option<(usize, usize)>> {
    let Some(v) = kv.get(key) else {
        return Ok(None);
    };
    let bad = || Error::Config(format!("`{key}` must look like `lo..hi`, got {v:?}"));
    let (lo, hi) = v.split_once("..").ok_or_else(bad)?;
    Ok(Some((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    )))
}

impl PhantomConfig {
    pub fn class_name(class: usize) -> &'static str {
        CLASS_NAMES.get(class).copied().unwrap_or("unknown")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            ));
        }
        if !(2..=4).contains(&self.num_classes) {
            return bad(format!(
                "num_classes must be 2, 3 or 4, got {}",
                self.num_classes
            ));
        }
        if self.bands.len() != self.num_classes {
            return bad(format!(
                "{} intensity bands for {} classes",
                self.bands.len(),
                self.num_classes
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.illumination_amplitude >= 0.0) {
            return bad("noise_sigma and illumination_amplitude must be non-negative".into());
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.mean.abs() <= 1.0 && b.spread >= 0.0) {
                return bad(format!(
                    "band {i} must have mean in [-1, 1] and non-negative spread"
                ));
            }
            for (j, o) in self.bands.iter().enumerate().skip(i + 1) {
                let gap = (b.mean - o.mean).abs() - b.spread - o.spread;
                if gap < 2.0 * self.noise_sigma {
                    return bad(format!(
                        "bands {i} and {j} are separated by {gap:.4}, need at least 2 * noise_sigma"
                    ));
                }
            }
        }
        if self.vessel_count.0 > self.vessel_count.1 || self.blob_count.0 > self.blob_count.1 {
            return bad("count ranges must have lo <= hi".into());
        }
        let (lo, hi) = self.organ_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "organ_fraction range ({lo}, {hi}) is not inside (0, 1]"
            ));
        }
        Ok(())
    }

    /// Writes every field as flat keys (see [`PhantomConfig::from_key_values`]).
    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.set("image_size", self.image_size);
        kv.set("num_classes", self.num_classes);
        kv.set("seed", self.seed);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("illumination_amplitude", self.illumination_amplitude);
        kv.set(
            "vessel_count",
            format!("{}..{}", self.vessel_count.0, self.vessel_count.1),
        );
        kv.set(
            "blob_count",
            format!("{}..{}", self.blob_count.0, self.blob_count.1),
        );
        kv.set("organ_fraction_min", self.organ_fraction.0);
        kv.set("organ_fraction_max", self.organ_fraction.1);
        for (i, b) in self.bands.iter().enumerate() {
            kv.set(format!("band.{i}.mean"), b.mean);
            kv.set(format!("band.{i}.spread"), b.spread);
        }
    }

    /// Starts from the defaults and overrides whatever keys are present.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = PhantomConfig::default();
        if let Some(v) = kv.parse_opt("image_size")? {
            c.image_size = v;
        }
        if let Some(v) = kv.parse_opt::<usize>("num_classes")? {
            c.num_classes = v;
            c.bands.truncate(v);
        }
        if let Some(v) = kv.parse_opt("seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.parse_opt("noise_sigma")? {
            c.noise_sigma = v;
        }
        if let Some(v) = kv.parse_opt("illumination_amplitude")? {
            c.illumination_amplitude = v;
        }
        if let Some(v) = parse_range(kv, "vessel_count")? {
            c.vessel_count = v;
        }
        if let Some(v) = parse_range(kv, "blob_count")? {
            c.blob_count = v;
        }
        if let Some(v) = kv.parse_opt("organ_fraction_min")? {
            c.organ_fraction.0 = v;
        }
        if let Some(v) = kv.parse_opt("organ_fraction_max")? {
            c.organ_fraction.1 = v;
        }
        for (i, b) in c.bands.iter_mut().enumerate() {
            if let Some(v) = kv.parse_opt(&format!("band.{i}.mean"))? {
                b.mean = v;
            }
            if let Some(v) = kv.parse_opt(&format!("band.{i}.spread"))? {
                b.spread = v;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One phantom: image `[1, 1, H, W]` in [-1, 1] and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub index: u64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: (f64, f64)) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cx,
            cy,
            a: rng.random_range(r.0..r.1),
            b: rng.random_range(r.0..r.1),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }
}

fn draw_organ(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let s = config.image_size as f64;
    let area = (config.image_size * config.image_size) as f64;
    for _ in 0..MAX_ORGAN_RETRIES {
        let cx = rng.random_range(0.35 * s..0.65 * s);
        let cy = rng.random_range(0.35 * s..0.65 * s);
        let e = Ellipse::random(rng, cx, cy, (0.2 * s, 0.45 * s));
        let inside: Vec<bool> = (0..config.image_size * config.image_size)
            .map(|p| {
                let (x, y) = (
                    (p % config.image_size) as f64 + 0.5,
                    (p / config.image_size) as f64 + 0.5,
                );
                e.contains(x, y)
            })
            .collect();
        let frac = inside.iter().filter(|&&v| v).count() as f64 / area;
        if frac >= config.organ_fraction.0 && frac <= config.organ_fraction.1 {
            return Ok(inside);
        }
    }
    Err(Error::Numerical(format!(
        "no organ with area fraction in [{}, {}] after {MAX_ORGAN_RETRIES} attempts",
        config.organ_fraction.0, config.organ_fraction.1
    )))
}

fn random_organ_pixel(organ: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let count = organ.iter().filter(|&&v| v).count();
    let k = rng.random_range(0..count);
    organ
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k < number of organ pixels")
}

fn draw_vessels(config: &PhantomConfig, organ: &[bool], rng: &mut ChaCha8Rng, out: &mut [bool]) {
    let n = config.image_size;
    let count = rng.random_range(config.vessel_count.0..=config.vessel_count.1);
    for _ in 0..count {
        let start = random_organ_pixel(organ, rng);
        let (mut x, mut y) = ((start % n) as f64 + 0.5, (start / n) as f64 + 0.5);
        let mut dir = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = rng.random_range(8..=20);
        let radius = rng.random_range(0.6..1.1);
        for _ in 0..steps {
            let r = radius + 0.5;
            let (x0, x1) = (
                (x - r).floor().max(0.0) as usize,
                ((x + r).ceil() as usize).min(n),
            );
            let (y0, y1) = (
                (y - r).floor().max(0.0) as usize,
                ((y + r).ceil() as usize).min(n),
            );
            for py in y0..y1 {
                for px in x0..x1 {
                    let (dx, dy) = (px as f64 + 0.5 - x, py as f64 + 0.5 - y);
                    let p = py * n + px;
                    if dx * dx + dy * dy <= radius * radius && organ[p] {
                        out[p] = true;
                    }
                }
            }
            dir += 0.35 * rng.sample::<f64, _>(StandardNormal);
            x += 1.5 * dir.cos();
            y += 1.5 * dir.sin();
        }
    }
}

fn draw_blobs(config: &PhantomConfig, organ: &[bool], rng: &mut ChaCha8Rng, out: &mut [bool]) {
    let n = config.image_size;
    let s = n as f64;
    let count = rng.random_range(config.blob_count.0..=config.blob_count.1);
    for _ in 0..count {
        let c = random_organ_pixel(organ, rng);
        let e = Ellipse::random(
            rng,
            (c % n) as f64 + 0.5,
            (c / n) as f64 + 0.5,
            (0.05 * s, 0.13 * s),
        );
        for (p, o) in out.iter_mut().enumerate() {
            if organ[p] && e.contains((p % n) as f64 + 0.5, (p / n) as f64 + 0.5) {
                *o = true;
            }
        }
    }
}

/// Deterministic phantom number `index` for `config`.
pub fn gen_sample(config: &PhantomConfig, index: u64) -> Result<LabeledSample> {
    config.validate()?;
    let n = config.image_size;
    let mut rng = sample_rng(config.seed, index);
    let organ = draw_organ(config, &mut rng)?;
    let mut vessel = vec![false; n * n];
    let mut dense = vec![false; n * n];
    if config.num_classes > VESSEL as usize {
        draw_vessels(config, &organ, &mut rng, &mut vessel);
    }
    if config.num_classes > DENSE as usize {
        draw_blobs(config, &organ, &mut rng, &mut dense);
    }
    let labels: Vec<u8> = (0..n * n)
        .map(|p| {
            if dense[p] {
                DENSE
            } else if vessel[p] {
                VESSEL
            } else if organ[p] {
                ORGAN
            } else {
                BACKGROUND
            }
        })
        .collect();

    // smooth field u*c1 + v*c2 + u*v*c3 over u, v in [-1, 1], bounded by the amplitude
    let c: [f64; 3] = [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ];
    let amp = config.illumination_amplitude / 3.0;
    let image: Vec<f32> = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            let u = 2.0 * ((p % n) as f64 + 0.5) / n as f64 - 1.0;
            let v = 2.0 * ((p / n) as f64 + 0.5) / n as f64 - 1.0;
            let light = amp * (c[0] * u + c[1] * v + c[2] * u * v);
            let noise = config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            (config.bands[l as usize].mean + light + noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(LabeledSample {
        image: Tensor::new([1, 1, n, n], image)?,
        mask: Mask::new(n, n, config.num_classes, labels)?,
        index,
    })
}
