//! Label construction from centroid annotations and from several annotators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IntMask;

/// A point annotation: pixel column `x`, row `y`, and its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub class: u8,
}

/// Paints a disk of `radius` around every centroid.
///
/// A pixel `(r, c)` is covered by a centroid when `(r−y)² + (c−x)² ≤ radius²`;
/// among covering centroids the nearest wins, ties going to the lower list
/// index. Uncovered pixels get `background`.
pub fn rasterize_centroids(
    centroids: &[Centroid],
    radius: f64,
    height: usize,
    width: usize,
    background: u8,
    num_classes: usize,
) -> Result<IntMask> {
    if !(radius >= 1.0) {
        return Err(Error::Config(format!("centroid radius must be >= 1, got {radius}")));
    }
    if background as usize >= num_classes {
        return Err(Error::LabelRange {
            detail: format!("background class {background} but only {num_classes} classes"),
        });
    }
    if let Some((i, c)) = centroids
        .iter()
        .enumerate()
        .find(|(_, c)| c.class as usize >= num_classes)
    {
        return Err(Error::LabelRange {
            detail: format!("centroid {i} has class {} but only {num_classes} classes", c.class),
        });
    }
    let mut labels = vec![background; height * width];
    let mut best = vec![f64::INFINITY; height * width];
    let r2 = radius * radius;
    for c in centroids {
        let y_lo = (c.y - radius).floor().max(0.0) as usize;
        let y_hi = ((c.y + radius).ceil().max(-1.0) as isize).min(height as isize - 1);
        let x_lo = (c.x - radius).floor().max(0.0) as usize;
        let x_hi = ((c.x + radius).ceil().max(-1.0) as isize).min(width as isize - 1);
        if y_hi < 0 || x_hi < 0 {
            continue;
        }
        for r in y_lo..=y_hi as usize {
            for col in x_lo..=x_hi as usize {
                let d = (r as f64 - c.y).powi(2) + (col as f64 - c.x).powi(2);
                // strict < keeps the earlier centroid on ties
                if d <= r2 && d < best[r * width + col] {
                    best[r * width + col] = d;
                    labels[r * width + col] = c.class;
                }
            }
        }
    }
    IntMask::new(vec![height, width], labels)
}

/// Per-pixel majority vote over annotators; ties go to the lowest class id.
pub fn fuse_annotations(masks: &[IntMask], num_classes: usize) -> Result<IntMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("fuse_annotations needs at least one mask".into()))?;
    for (i, m) in masks.iter().enumerate() {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "fuse_annotations",
                format!("annotator {i} has shape {:?}, expected {:?}", m.shape(), first.shape()),
            ));
        }
        if let Some(&v) = m.data().iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelRange {
                detail: format!("annotator {i} uses class {v} but only {num_classes} classes"),
            });
        }
    }
    let mut votes = vec![0u32; num_classes];
    let data = (0..first.len())
        .map(|p| {
            votes.fill(0);
            for m in masks {
                votes[m.data()[p] as usize] += 1;
            }
            let mut winner = 0;
            for c in 1..num_classes {
                if votes[c] > votes[winner] {
                    winner = c;
                }
            }
            winner as u8
        })
        .collect();
    IntMask::new(first.shape().to_vec(), data)
}
