//! Contact sheets: each column shows a conditioning mask above the image
//! generated from it.

use segdiff_core::ablation::Mask;
use segdiff_core::autodiff::Tensor;
use segdiff_core::phantom::io::to_byte;
use segdiff_core::{Error, Result};

const GAP: usize = 2;
const GAP_LEVEL: u8 = 128;

/// Display level of a mask label, spreading classes over 0..=255.
fn label_level(label: u8, num_classes: usize) -> u8 {
    if num_classes <= 1 {
        return 0;
    }
    (label as usize * 255 / (num_classes - 1)) as u8
}

/// Tiles `(mask, image)` pairs into a grey raster `(width, height, pixels)`,
/// `columns` pairs per band.
pub fn contact_sheet(
    masks: &[Mask],
    images: &Tensor<f32>,
    columns: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let n = masks.len();
    if images.shape().len() != 4 || images.shape()[0] != n || images.shape()[1] != 1 {
        return Err(Error::Contract(format!(
            "contact sheet needs {n} single-channel images, got {:?}",
            images.shape()
        )));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    if n == 0 {
        return Ok((0, 0, Vec::new()));
    }
    let cols = columns.clamp(1, n);
    let bands = n.div_ceil(cols);
    let width = cols * w + (cols + 1) * GAP;
    let band_h = 2 * h + 3 * GAP;
    let height = bands * band_h + GAP;
    let mut px = vec![GAP_LEVEL; width * height];
    let mut blit = |x0: usize, y0: usize, values: &mut dyn Iterator<Item = u8>| {
        for y in 0..h {
            for x in 0..w {
                px[(y0 + y) * width + x0 + x] = values.next().unwrap_or(0);
            }
        }
    };
    for (i, m) in masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Contract(format!(
                "mask {i} is {}x{}, images are {w}x{h}",
                m.width(),
                m.height()
            )));
        }
        let x0 = GAP + (i % cols) * (w + GAP);
        let y0 = GAP + (i / cols) * band_h;
        let c = m.num_classes();
        blit(x0, y0, &mut m.labels().iter().map(|&l| label_level(l, c)));
        let img = &images.data()[i * h * w..(i + 1) * h * w];
        blit(x0, y0 + h + GAP, &mut img.iter().map(|&v| to_byte(v)));
    }
    Ok((width, height, px))
}
