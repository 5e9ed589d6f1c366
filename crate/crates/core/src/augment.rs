//! Joint image/mask augmentation: scale, color jitter, flips, rotation, crop.
//!
//! Geometric steps map every output pixel back into the source with one
//! coordinate transform; the image is sampled bilinearly and the mask by the
//! nearest source pixel, both with reflect-101 borders. Steps whose drawn
//! parameter is neutral are skipped, so an identity configuration passes the
//! sample through untouched.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{IntMask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
    pub saturation: f64,
    pub flip_prob: f64,
    /// Angles are drawn from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    /// `[height, width]` of the output.
    pub crop: [usize; 2],
}

pub const DEFAULT_CROP: usize = 768;

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: [0.8, 1.2],
            brightness: 0.2,
            contrast: 0.2,
            hue: 0.1,
            saturation: 0.1,
            flip_prob: 0.5,
            rotation_degrees: 15.0,
            crop: [DEFAULT_CROP, DEFAULT_CROP],
        }
    }
}

impl AugmentConfig {
    /// No-op pipeline producing `[h, w]` outputs.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentConfig {
            scale_range: [1.0, 1.0],
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            saturation: 0.0,
            flip_prob: 0.0,
            rotation_degrees: 0.0,
            crop: [h, w],
        }
    }

    pub fn with_crop(mut self, h: usize, w: usize) -> Self {
        self.crop = [h, w];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let bad = |what: &str| Err(Error::Config(format!("augment: {what}")));
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range must satisfy 0 < low <= high");
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must be in [0, 1)"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad("hue must be in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 1]");
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return bad("rotation_degrees must be in [0, 180]");
        }
        if self.crop.contains(&0) {
            return bad("crop dims must be >= 1");
        }
        Ok(())
    }
}

/// One draw of every stochastic quantity in the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub hue_shift: f64,
    pub saturation: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    /// Crop offset as fractions of the available slack, in `[0, 1)`.
    pub crop_offset: (f64, f64),
}

fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

/// Always consumes the same number of draws regardless of `cfg`.
pub fn jitter_params(cfg: &AugmentConfig, r: &mut rng::Rng) -> AugmentParams {
    let scale = uniform(r, cfg.scale_range[0], cfg.scale_range[1]);
    let brightness = uniform(r, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
    let contrast = uniform(r, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let hue_shift = uniform(r, -cfg.hue, cfg.hue);
    let saturation = uniform(r, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
    let flip_h = r.random::<f64>() < cfg.flip_prob;
    let flip_v = r.random::<f64>() < cfg.flip_prob;
    let angle_deg = uniform(r, -cfg.rotation_degrees, cfg.rotation_degrees);
    let crop_offset = (r.random::<f64>(), r.random::<f64>());
    AugmentParams {
        scale,
        brightness,
        contrast,
        hue_shift,
        saturation,
        flip_h,
        flip_v,
        angle_deg,
        crop_offset,
    }
}

pub fn augment<T: Scalar>(sample: &Sample<T>, cfg: &AugmentConfig, r: &mut rng::Rng) -> Result<Sample<T>> {
    let p = jitter_params(cfg, r);
    apply(sample, cfg, &p)
}

/// Runs the pipeline with fixed parameters.
pub fn apply<T: Scalar>(sample: &Sample<T>, cfg: &AugmentConfig, p: &AugmentParams) -> Result<Sample<T>> {
    cfg.validate()?;
    sample.check_dims()?;
    let (h, w) = (sample.height(), sample.width());
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "augment",
            format!("{}: sample is {h}x{w}, need at least 2x2", sample.name),
        ));
    }
    let mut img = Planes::from_tensor(&sample.image);
    let mut mask = sample.mask.clone();
    let mut touched_image = false;

    if p.scale != 1.0 {
        let nh = ((h as f64 * p.scale).round() as usize).max(2);
        let nw = ((w as f64 * p.scale).round() as usize).max(2);
        let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
        let map = |y: usize, x: usize| ((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
        img = img.resample(nh, nw, map);
        mask = resample_mask(&mask, nh, nw, map);
        touched_image = true;
    }

    if p.brightness != 1.0 || p.contrast != 1.0 || p.hue_shift != 0.0 || p.saturation != 1.0 {
        img.color_jitter(p);
        touched_image = true;
    }

    if p.flip_h || p.flip_v {
        let (ch, cw) = (img.h, img.w);
        let (fh, fv) = (p.flip_h, p.flip_v);
        let map = move |y: usize, x: usize| {
            let sx = if fh { cw - 1 - x } else { x };
            let sy = if fv { ch - 1 - y } else { y };
            (sy as f64, sx as f64)
        };
        img = img.resample(ch, cw, map);
        mask = resample_mask(&mask, ch, cw, map);
        touched_image = true;
    }

    if p.angle_deg != 0.0 {
        let (ch, cw) = (img.h, img.w);
        let (cy, cx) = ((ch as f64 - 1.0) / 2.0, (cw as f64 - 1.0) / 2.0);
        let (sin, cos) = p.angle_deg.to_radians().sin_cos();
        // inverse rotation of the output coordinate about the center
        let map = move |y: usize, x: usize| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
        };
        img = img.resample(ch, cw, map);
        mask = resample_mask(&mask, ch, cw, map);
        touched_image = true;
    }

    let [th, tw] = cfg.crop;
    if (img.h, img.w) != (th, tw) {
        let oy = crop_start(img.h, th, p.crop_offset.0);
        let ox = crop_start(img.w, tw, p.crop_offset.1);
        let map = move |y: usize, x: usize| ((oy + y as i64) as f64, (ox + x as i64) as f64);
        img = img.resample(th, tw, map);
        mask = resample_mask(&mask, th, tw, map);
        touched_image = true;
    }

    let image = if touched_image {
        img.into_tensor()
    } else {
        sample.image.clone()
    };
    Sample::new(sample.name.clone(), image, mask, sample.source_id.clone())
}

/// Top-left of the crop window; negative when the source is smaller than the
/// crop (the overhang is filled by reflection).
fn crop_start(len: usize, crop: usize, frac: f64) -> i64 {
    if len >= crop {
        ((len - crop + 1) as f64 * frac).floor().min((len - crop) as f64) as i64
    } else {
        -(((crop - len + 1) as f64 * frac).floor().min((crop - len) as f64) as i64)
    }
}

/// Reflect-101 index into `0..n` (`n >= 2`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn resample_mask(mask: &IntMask, nh: usize, nw: usize, map: impl Fn(usize, usize) -> (f64, f64)) -> IntMask {
    let (h, w) = mask.hw().expect("2-D mask");
    let src = mask.data();
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let (sy, sx) = map(y, x);
            let (ry, rx) = (reflect(sy.round() as i64, h), reflect(sx.round() as i64, w));
            out.push(src[ry * w + rx]);
        }
    }
    IntMask::new(vec![nh, nw], out).expect("shape matches")
}

/// f64 working copy of a `[C,H,W]` image.
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        Planes {
            c: s[0],
            h: s[1],
            w: s[2],
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        let data = self.data.into_iter().map(T::from_f64_lossy).collect();
        Tensor::new(vec![self.c, self.h, self.w], data).expect("shape matches")
    }

    fn at(&self, c: usize, y: i64, x: i64) -> f64 {
        self.data[(c * self.h + reflect(y, self.h)) * self.w + reflect(x, self.w)]
    }

    fn resample(&self, nh: usize, nw: usize, map: impl Fn(usize, usize) -> (f64, f64)) -> Planes {
        let mut data = vec![0.0; self.c * nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                let (sy, sx) = map(y, x);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                for c in 0..self.c {
                    let v = if fy == 0.0 && fx == 0.0 {
                        self.at(c, y0, x0)
                    } else {
                        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x0 + 1) * fx;
                        let bot = self.at(c, y0 + 1, x0) * (1.0 - fx) + self.at(c, y0 + 1, x0 + 1) * fx;
                        top * (1.0 - fy) + bot * fy
                    };
                    data[(c * nh + y) * nw + x] = v;
                }
            }
        }
        Planes {
            c: self.c,
            h: nh,
            w: nw,
            data,
        }
    }

    fn color_jitter(&mut self, p: &AugmentParams) {
        for v in &mut self.data {
            *v = (*v * p.brightness).clamp(0.0, 1.0);
        }
        if p.contrast != 1.0 {
            let mean = self.data.iter().sum::<f64>() / self.data.len() as f64;
            for v in &mut self.data {
                *v = (mean + p.contrast * (*v - mean)).clamp(0.0, 1.0);
            }
        }
        if self.c == 3 && (p.hue_shift != 0.0 || p.saturation != 1.0) {
            let plane = self.h * self.w;
            for i in 0..plane {
                let rgb = [self.data[i], self.data[plane + i], self.data[2 * plane + i]];
                let (hh, s, v) = rgb_to_hsv(rgb);
                let hh = (hh + p.hue_shift).rem_euclid(1.0);
                let s = (s * p.saturation).clamp(0.0, 1.0);
                let [r, g, b] = hsv_to_rgb(hh, s, v);
                self.data[i] = r.clamp(0.0, 1.0);
                self.data[plane + i] = g.clamp(0.0, 1.0);
                self.data[2 * plane + i] = b.clamp(0.0, 1.0);
            }
        }
    }
}

/// Hue in `[0,1)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, seed: u64) -> Sample<f64> {
        let mut r = rng::stream(seed, &[]);
        let image = Tensor::from_fn(&[3, h, w], |_| r.random::<f64>());
        let mask = IntMask::new(vec![h, w], (0..h * w).map(|_| r.random_range(0..3u8) * 2).collect()).unwrap();
        Sample::new("s".into(), image, mask, "src".into()).unwrap()
    }

    #[test]
    fn identity_is_bitwise() {
        let s = sample(9, 7, 1);
        let cfg = AugmentConfig::identity(9, 7);
        let out = augment(&s, &cfg, &mut rng::stream(5, &[])).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn default_crop_size() {
        let s = sample(40, 50, 2);
        let cfg = AugmentConfig::default().with_crop(32, 24);
        for seed in 0..10 {
            let out = augment(&s, &cfg, &mut rng::stream(seed, &[])).unwrap();
            assert_eq!(out.image.shape(), &[3, 32, 24]);
            assert_eq!(out.mask.shape(), &[32, 24]);
        }
    }

    #[test]
    fn small_crop_source_reflects() {
        let s = sample(4, 4, 3);
        let cfg = AugmentConfig::identity(10, 10);
        let out = augment(&s, &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(out.mask.shape(), &[10, 10]);
        assert!(out.mask.label_set().iter().all(|v| s.mask.label_set().contains(v)));
    }

    #[test]
    fn tiny_sample_rejected() {
        let s = sample(1, 5, 0);
        let err = augment(&s, &AugmentConfig::identity(1, 5), &mut rng::stream(0, &[])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn hsv_round_trip() {
        let mut r = rng::stream(9, &[]);
        for _ in 0..1000 {
            let c = [r.random(), r.random(), r.random()];
            let (h, s, v) = rgb_to_hsv(c);
            let back = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flips_move_pixels_and_labels_together() {
        let (h, w) = (6, 8);
        let image = Tensor::<f64>::from_fn(&[3, h, w], |i| (i % (h * w)) as f64 / 64.0);
        let mask = IntMask::new(vec![h, w], (0..(h * w) as u8).collect()).unwrap();
        let s = Sample::new("g".into(), image, mask, "src".into()).unwrap();
        let cfg = AugmentConfig::identity(h, w);
        let p = AugmentParams {
            scale: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            hue_shift: 0.0,
            saturation: 1.0,
            flip_h: true,
            flip_v: true,
            angle_deg: 0.0,
            crop_offset: (0.0, 0.0),
        };
        let out = apply(&s, &cfg, &p).unwrap();
        for i in 0..h * w {
            assert_eq!(out.image.data()[i] * 64.0, out.mask.data()[i] as f64);
        }
        assert_eq!(out.mask.data()[0] as usize, h * w - 1);
    }
}
