use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::diffusion::{linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::unet::{NetKind, ParamSet, UNet, UNetConfig};

pub const MAGIC: &[u8; 4] = b"SGDF";
pub const FORMAT_VERSION: u32 = 1;
/// Names of rank-0 entries that carry metadata as `meta/<key>=<value>`.
const META_PREFIX: &str = "meta/";

/// Trained network parameters with everything needed to rebuild and run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    /// Present for denoisers.
    pub schedule: Option<NoiseSchedule>,
    pub step: u64,
    /// Free-form provenance (training mode, seed, dataset hash, ...).
    pub info: KeyValues,
    pub params: ParamSet<f32>,
}

fn config_to_kv(c: &UNetConfig, kv: &mut KeyValues) {
    kv.set(
        "net.kind",
        match c.kind {
            NetKind::Denoiser => "denoiser",
            NetKind::Segmenter => "segmenter",
        },
    );
    kv.set("net.base_channels", c.base_channels);
    let mults: Vec<String> = c
        .channel_multipliers
        .iter()
        .map(|m| m.to_string())
        .collect();
    kv.set("net.channel_multipliers", mults.join(","));
    kv.set("net.time_embed_dim", c.time_embed_dim);
    kv.set("net.num_classes", c.num_classes);
    kv.set("net.image_size", c.image_size);
    kv.set("net.image_channels", c.image_channels);
    kv.set("net.groups", c.groups);
}

fn config_from_kv(kv: &KeyValues) -> Result<UNetConfig> {
    let kind = match kv.require("net.kind")? {
        "denoiser" => NetKind::Denoiser,
        "segmenter" => NetKind::Segmenter,
        other => return Err(Error::Config(format!("unknown network kind {other:?}"))),
    };
    let channel_multipliers = kv
        .require("net.channel_multipliers")?
        .split(',')
        .map(|m| {
            m.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad channel multiplier {m:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(UNetConfig {
        kind,
        base_channels: kv.parse_req("net.base_channels")?,
        channel_multipliers,
        time_embed_dim: kv.parse_req("net.time_embed_dim")?,
        num_classes: kv.parse_req("net.num_classes")?,
        image_size: kv.parse_req("net.image_size")?,
        image_channels: kv.parse_req("net.image_channels")?,
        groups: kv.parse_req("net.groups")?,
    })
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Contract(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn from_net(
        net: &UNet<f32>,
        schedule: Option<&NoiseSchedule>,
        step: u64,
        info: KeyValues,
    ) -> Self {
        Checkpoint {
            config: net.config().clone(),
            schedule: schedule.cloned(),
            step,
            info,
            params: net.params().clone(),
        }
    }

    pub fn to_net(&self) -> Result<UNet<f32>> {
        UNet::from_params(self.config.clone(), self.params.clone())
    }

    fn metadata(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        config_to_kv(&self.config, &mut kv);
        if let Some(s) = &self.schedule {
            kv.set("schedule.steps", s.num_steps());
            kv.set("schedule.beta_start", s.beta_start());
            kv.set("schedule.beta_end", s.beta_end());
        }
        kv.set("train.step", self.step);
        for (k, v) in self.info.iter() {
            kv.set(format!("info.{k}"), v);
        }
        kv
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.metadata();
        for (k, v) in meta.iter() {
            if k.contains('=') || v.contains('\n') {
                return Err(Error::Contract(format!(
                    "metadata entry {k:?} cannot be stored"
                )));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut out, meta.iter().count() + self.params.len())?;
        for (k, v) in meta.iter() {
            let name = format!("{META_PREFIX}{k}={v}");
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, 0)?;
            out.extend_from_slice(&0f32.to_le_bytes());
        }
        for (name, t) in self.params.iter() {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                push_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = out.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64));
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 + 4 + 4 {
            return Err(Error::format(path, "file too short for a checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let sum = body.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64));
        if &body[..4] != MAGIC {
            return Err(Error::format(path, "missing SGDF magic"));
        }
        if stored != sum {
            return Err(Error::format(path, "checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::format(
                path,
                format!("unsupported format version {version}"),
            ));
        }
        let count = r.u32()?;
        let mut meta = KeyValues::new();
        let mut params = ParamSet::default();
        for _ in 0..count {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(entry) = name.strip_prefix(META_PREFIX) {
                let (k, v) = entry
                    .split_once('=')
                    .ok_or_else(|| Error::format(path, format!("bad metadata entry {name:?}")))?;
                meta.set(k, v);
            } else {
                let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
                params.push(name, t);
            }
        }
        if r.pos != body.len() {
            return Err(Error::format(path, "trailing bytes before checksum"));
        }
        let bad = |e: Error| Error::format(path, e.to_string());
        let config = config_from_kv(&meta).map_err(bad)?;
        let schedule = match meta.get("schedule.steps") {
            Some(_) => Some(
                linear_schedule(
                    meta.parse_req("schedule.steps").map_err(bad)?,
                    meta.parse_req("schedule.beta_start").map_err(bad)?,
                    meta.parse_req("schedule.beta_end").map_err(bad)?,
                )
                .map_err(bad)?,
            ),
            None => None,
        };
        let mut info = KeyValues::new();
        for (k, v) in meta.iter() {
            if let Some(k) = k.strip_prefix("info.") {
                info.set(k, v);
            }
        }
        let ckpt = Checkpoint {
            config,
            schedule,
            step: meta.parse_req("train.step").map_err(bad)?,
            info,
            params,
        };
        // parameter names and shapes must fit the declared architecture
        ckpt.to_net().map_err(bad)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// First 16 hex digits of the SHA-256 of the serialized checkpoint.
    pub fn id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
