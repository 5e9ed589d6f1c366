//! Synthetic segmentation sources: Voronoi blobs over noisy per-class colors.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Sample, TaskSource};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{IntMask, Tensor};

pub const NOISE_SIGMA: f64 = 0.05;
const MIN_COLOR_DISTANCE: f64 = 0.35;

/// Random, well-separated RGB base colors for `k` classes.
fn palette(r: &mut rng::Rng, k: usize) -> Vec<[f64; 3]> {
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(k);
    let mut min_dist = MIN_COLOR_DISTANCE;
    let mut attempts = 0;
    while colors.len() < k {
        let c = [0; 3].map(|_| r.random_range(0.1..0.9));
        let ok = colors.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            colors.push(c);
        }
        attempts += 1;
        if attempts % 1000 == 0 {
            min_dist *= 0.8;
        }
    }
    colors
}

/// Deterministic synthetic task source.
///
/// Each sample is a Voronoi partition of `K' ∈ [2, K]` random sites, each
/// site carrying a distinct class; sample `i` always contains class `i mod K`
/// so every class shows up somewhere in the source. The image is the class
/// color plus Gaussian noise, clamped and quantized to 8 bits so that PNG
/// export is lossless.
pub fn generate_synthetic_source<T: Scalar>(
    id: &str,
    seed: u64,
    num_classes: usize,
    n_samples: usize,
    height: usize,
    width: usize,
) -> Result<TaskSource<T>> {
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic K must be in 2..=255, got {num_classes}")));
    }
    if n_samples < 2 {
        return Err(Error::Config(format!("synthetic source needs >= 2 samples, got {n_samples}")));
    }
    if height * width < num_classes {
        return Err(Error::Config("image too small for the class count".into()));
    }
    let mut pr = rng::stream(seed, &[rng::key_of(id), 0]);
    let colors = palette(&mut pr, num_classes);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut r = rng::stream(seed, &[rng::key_of(id), 1, i as u64]);
        let n_sites = r.random_range(2..=num_classes);
        // distinct classes with `i mod K` guaranteed
        let forced = i % num_classes;
        let mut others: Vec<usize> = (0..num_classes).filter(|&c| c != forced).collect();
        others.shuffle(&mut r);
        let mut classes = vec![forced];
        classes.extend_from_slice(&others[..n_sites - 1]);
        classes.shuffle(&mut r);

        let mut sites: Vec<(usize, usize)> = Vec::with_capacity(n_sites);
        while sites.len() < n_sites {
            let s = (r.random_range(0..height), r.random_range(0..width));
            if !sites.contains(&s) {
                sites.push(s);
            }
        }

        let mut labels = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                let mut best = 0;
                let mut best_d = usize::MAX;
                for (j, &(sy, sx)) in sites.iter().enumerate() {
                    let d = sy.abs_diff(y).pow(2) + sx.abs_diff(x).pow(2);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                labels[y * width + x] = classes[best] as u8;
            }
        }

        let plane = height * width;
        let mut pixels = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            let base = colors[labels[p] as usize];
            for ch in 0..3 {
                let v = (base[ch] + noise.sample(&mut r)).clamp(0.0, 1.0);
                let q = (v * 255.0).round() / 255.0;
                pixels[ch * plane + p] = T::from_f64_lossy(q);
            }
        }
        samples.push(Sample {
            name: format!("{id}_{i:04}"),
            image: Tensor::new(vec![3, height, width], pixels)?,
            mask: IntMask::new(vec![height, width], labels)?,
            source_id: id.to_string(),
        });
    }

    TaskSource::new(
        id.to_string(),
        format!("synthetic-{id}"),
        (0..num_classes).map(|c| format!("class{c}")).collect(),
        samples,
    )
}
