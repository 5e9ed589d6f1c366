//! Color-coded overlay strips: input, ground truth, prediction.

use std::path::Path;

use crate::dataset::{read_png, write_png, Sample};
use crate::error::{Error, Result};
use crate::eval::{center_crop, predict_sample};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::segnet::UNet;
use crate::tensor::IntMask;

/// Class colors; ids past the table wrap around.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

/// Inverse of [`class_color`] for the first `PALETTE.len()` classes.
pub fn decode_color(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|&c| c == rgb).map(|i| i as u8)
}

/// RGB bytes of a strip `[input | truth | prediction]` and its size (w, h).
pub fn overlay_strip<T: Scalar>(
    net: &UNet,
    params: &ParamSet<T>,
    task: &str,
    sample: &Sample<T>,
) -> Result<(Vec<u8>, usize, usize)> {
    let (image, _) = center_crop(sample, net.config.size_multiple())?;
    let (pred, truth) = predict_sample(net, params, task, sample)?;
    let (h, w) = (truth.shape()[0], truth.shape()[1]);
    let channels = image.shape()[0];
    let plane = h * w;
    let img = image.data();
    let mut out = vec![0u8; 3 * w * 3 * h];
    let stride = 3 * w * 3;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let base = y * stride + x * 3;
            for ch in 0..3 {
                let v = img[ch.min(channels - 1) * plane + p].as_f64().clamp(0.0, 1.0);
                out[base + ch] = (v * 255.0).round() as u8;
            }
            out[base + 3 * w..base + 3 * w + 3].copy_from_slice(&class_color(truth.data()[p]));
            out[base + 6 * w..base + 6 * w + 3].copy_from_slice(&class_color(pred.data()[p]));
        }
    }
    Ok((out, 3 * w, h))
}

pub fn write_overlay<T: Scalar>(
    path: &Path,
    net: &UNet,
    params: &ParamSet<T>,
    task: &str,
    sample: &Sample<T>,
) -> Result<()> {
    let (rgb, w, h) = overlay_strip(net, params, task, sample)?;
    write_png(path, w, h, 3, &rgb)
}

/// Reads back the prediction panel of a strip written by [`write_overlay`].
pub fn read_prediction_panel(path: &Path) -> Result<IntMask> {
    let px = read_png(path)?;
    if px.channels != 3 || px.width % 3 != 0 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            detail: "not an overlay strip".into(),
        });
    }
    let w = px.width / 3;
    let mut mask = Vec::with_capacity(w * px.height);
    for y in 0..px.height {
        for x in 0..w {
            let i = (y * px.width + 2 * w + x) * 3;
            let rgb = [px.data[i], px.data[i + 1], px.data[i + 2]];
            mask.push(decode_color(rgb).ok_or_else(|| Error::Ingest {
                path: path.to_path_buf(),
                detail: format!("pixel ({x},{y}) is not a palette color"),
            })?);
        }
    }
    IntMask::new(vec![px.height, w], mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct() {
        for (i, a) in PALETTE.iter().enumerate() {
            for b in &PALETTE[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(decode_color(class_color(5)), Some(5));
        assert_eq!(class_color(16), class_color(0));
    }
}
