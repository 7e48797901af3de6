use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledSample;
use crate::ablation::Mask;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// 8-bit grey level for an intensity in [-1, 1].
pub fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Binary 8-bit PGM bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM with maxval 255, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(
            path,
            format!("expected P5 magic, found {:?}", fields[0]),
        ));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad {what} {s:?}")))
    };
    let (w, h, maxval) = (
        num(&fields[1], "width")?,
        num(&fields[2], "height")?,
        num(&fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("maxval must be 255, found {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(Error::format(
            path,
            format!(
                "expected {need} pixel bytes, found {}",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn image_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("img_{index:06}.pgm"))
}

pub fn mask_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("msk_{index:06}.pgm"))
}

/// Writes a single-channel `[.., H, W]` image in [-1, 1] as PGM.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if image.numel() != h * w {
        return Err(Error::shape(
            "save_image (single channel)",
            shape,
            &[1, 1, h, w],
        ));
    }
    let px: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    write_pgm(path, w, h, &px)
}

/// Reads a PGM as a `[1, 1, H, W]` image in [-1, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, px) = read_pgm(path)?;
    Tensor::new([1, 1, h, w], px.into_iter().map(from_byte).collect())
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, mask.width(), mask.height(), mask.labels())
}

pub fn load_mask(path: &Path, num_classes: usize) -> Result<Mask> {
    let (w, h, px) = read_pgm(path)?;
    Mask::new(w, h, num_classes, px).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_sample(dir: &Path, sample: &LabeledSample) -> Result<()> {
    save_image(&image_path(dir, sample.index), &sample.image)?;
    save_mask(&mask_path(dir, sample.index), &sample.mask)
}

/// Loads both files of sample `index`; either file failing fails the load.
pub fn load_sample(dir: &Path, index: u64, num_classes: usize) -> Result<LabeledSample> {
    let image = load_image(&image_path(dir, index))?;
    let mpath = mask_path(dir, index);
    let mask = load_mask(&mpath, num_classes)?;
    if image.shape()[2..] != [mask.height(), mask.width()] {
        return Err(Error::format(mpath, "mask size differs from its image"));
    }
    Ok(LabeledSample { image, mask, index })
}
