//! The unified sample format, on-disk task sources, and train/val/test splits.

mod png_io;
mod raster;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use png_io::{read_png, write_png, Pixels};
pub use raster::{fuse_annotations, rasterize_centroids, Centroid};
pub use synth::{generate_synthetic_source, NOISE_SIGMA};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{IntMask, Tensor};

/// One image `[C,H,W]` in `[0,1]` with its per-pixel class mask `[H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub name: String,
    pub image: Tensor<T>,
    pub mask: IntMask,
    pub source_id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn new(name: String, image: Tensor<T>, mask: IntMask, source_id: String) -> Result<Self> {
        let s = Sample {
            name,
            image,
            mask,
            source_id,
        };
        s.check_dims()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn check_dims(&self) -> Result<()> {
        let (mh, mw) = self.mask.hw()?;
        match self.image.shape() {
            &[_, h, w] if (h, w) == (mh, mw) => Ok(()),
            s => Err(Error::shape(
                "sample",
                format!("{}: image {s:?} does not match mask {:?}", self.name, self.mask.shape()),
            )),
        }
    }
}

/// A named segmentation task with its own class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSource<T> {
    pub id: String,
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> TaskSource<T> {
    pub fn new(id: String, name: String, class_names: Vec<String>, samples: Vec<Sample<T>>) -> Result<Self> {
        let source = TaskSource {
            id,
            name,
            num_classes: class_names.len(),
            class_names,
            samples,
        };
        source.validate()?;
        Ok(source)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "source {}: num_classes must be in 2..=255, got {}",
                self.id, self.num_classes
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "source {}: {} class names for {} classes",
                self.id,
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::Config(format!("source {} has no samples", self.id)));
        }
        for s in &self.samples {
            if s.source_id != self.id {
                return Err(Error::Config(format!(
                    "sample {} carries source id {} inside source {}",
                    s.name, s.source_id, self.id
                )));
            }
            s.check_dims()?;
            let bad = s
                .mask
                .data()
                .iter()
                .filter(|&&v| v as usize >= self.num_classes)
                .count();
            if bad > 0 {
                return Err(Error::LabelRange {
                    detail: format!(
                        "sample {}: {bad} pixels with class >= {}",
                        s.name, self.num_classes
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Sample indices of one source, by role.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
    /// Every sample, in source order.
    All,
}

impl Split {
    pub fn indices(&self, role: SplitRole, n: usize) -> Vec<usize> {
        match role {
            SplitRole::Train => self.train.clone(),
            SplitRole::Val => self.val.clone(),
            SplitRole::Test => self.test.clone(),
            SplitRole::All => (0..n).collect(),
        }
    }
}

/// Train/val/test fractions and the shuffle seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.75,
            val: 0.0,
            test: 0.25,
            seed: 0,
        }
    }
}

/// Deterministic shuffled partition of `0..n` by `fractions`.
///
/// Counts are `floor(f·n)` with the remainder handed out by largest
/// fractional part (lower index first on ties).
pub fn split_source(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let mut rem = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = fractions[a] * n as f64 - counts[a] as f64;
        let fb = fractions[b] * n as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            rem -= 1;
        }
    }
    for (i, (&c, &f)) in counts.iter().zip(fractions).enumerate() {
        if f > 0.0 && c == 0 {
            return Err(Error::Config(format!(
                "split {i} (fraction {f}) is empty for a source of {n} samples"
            )));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5e17]));
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for c in counts {
        let mut part = idx[start..start + c].to_vec();
        part.sort_unstable();
        out.push(part);
        start += c;
    }
    Ok(out)
}

impl SplitConfig {
    pub fn apply(&self, source_id: &str, n: usize) -> Result<Split> {
        let seed = rng::mix(self.seed, &[rng::key_of(source_id)]);
        let mut parts = split_source(n, &[self.train, self.val, self.test], seed)?.into_iter();
        Ok(Split {
            train: parts.next().unwrap_or_default(),
            val: parts.next().unwrap_or_default(),
            test: parts.next().unwrap_or_default(),
        })
    }
}

/// A collection of task sources plus their splits.
#[derive(Clone, Debug)]
pub struct MetaDataset<T> {
    pub sources: Vec<TaskSource<T>>,
    pub splits: BTreeMap<String, Split>,
}

impl<T: Scalar> MetaDataset<T> {
    pub fn new(sources: Vec<TaskSource<T>>, split: &SplitConfig) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut splits = BTreeMap::new();
        for s in &sources {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Config(format!("duplicate source id {}", s.id)));
            }
            splits.insert(s.id.clone(), split.apply(&s.id, s.samples.len())?);
        }
        Ok(MetaDataset { sources, splits })
    }

    /// Uses explicit splits (indices are validated).
    pub fn with_splits(sources: Vec<TaskSource<T>>, splits: BTreeMap<String, Split>) -> Result<Self> {
        for s in &sources {
            let sp = splits
                .get(&s.id)
                .ok_or_else(|| Error::Config(format!("no split for source {}", s.id)))?;
            let mut seen = BTreeSet::new();
            for &i in sp.train.iter().chain(&sp.val).chain(&sp.test) {
                if i >= s.samples.len() || !seen.insert(i) {
                    return Err(Error::Config(format!("source {}: bad or repeated split index {i}", s.id)));
                }
            }
        }
        Ok(MetaDataset { sources, splits })
    }

    /// Every sample of each source in the train split.
    pub fn all_train(sources: Vec<TaskSource<T>>) -> Result<Self> {
        let splits = sources
            .iter()
            .map(|s| {
                (
                    s.id.clone(),
                    Split {
                        train: (0..s.samples.len()).collect(),
                        ..Split::default()
                    },
                )
            })
            .collect();
        Self::with_splits(sources, splits)
    }

    pub fn source(&self, id: &str) -> Result<&TaskSource<T>> {
        self.sources
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown source {id:?}")))
    }

    pub fn split(&self, id: &str) -> Result<&Split> {
        self.splits
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown source {id:?}")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.id.clone()).collect()
    }

    /// A dataset restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let mut sources = Vec::with_capacity(ids.len());
        let mut splits = BTreeMap::new();
        for id in ids {
            sources.push(self.source(id)?.clone());
            splits.insert(id.clone(), self.split(id)?.clone());
        }
        Ok(MetaDataset { sources, splits })
    }
}

/// `manifest.json` of one source directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestSample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centroids: Vec<CentroidRecord>,
}

/// One image with either a class-id mask, several annotator masks to be fused
/// by majority vote, or (via a matching [`CentroidRecord`]) point annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidRecord {
    pub image: String,
    pub points: Vec<Centroid>,
    pub radius: f64,
    #[serde(default)]
    pub background: u8,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sample_name(image: &str) -> String {
    Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

fn read_mask(path: &Path) -> Result<IntMask> {
    let px = read_png(path)?;
    if px.channels != 1 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            detail: format!("mask must be single-channel, got {} channels", px.channels),
        });
    }
    IntMask::new(vec![px.height, px.width], px.data)
}

fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let px = read_png(path)?;
    if px.channels != 3 && px.channels != 4 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            detail: format!("image must be RGB, got {} channels", px.channels),
        });
    }
    let plane = px.height * px.width;
    let scale = T::from_f64_lossy(255.0);
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = T::from_u8(px.data[p * px.channels + ch]).expect("u8 fits") / scale;
        }
    }
    Tensor::new(vec![3, px.height, px.width], data)
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Ingest {
            path: p,
            detail: "missing file".into(),
        })
    }
}

/// Reads `dir/manifest.json` and every referenced PNG.
pub fn ingest_source<T: Scalar>(dir: &Path) -> Result<TaskSource<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Ingest {
        path: manifest_path.clone(),
        detail: format!("cannot read manifest: {e}"),
    })?;
    let manifest: SourceManifest = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: manifest_path.clone(),
        detail: format!("invalid manifest: {e}"),
    })?;
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::Ingest {
            path: manifest_path,
            detail: format!(
                "{} class names for num_classes = {}",
                manifest.class_names.len(),
                manifest.num_classes
            ),
        });
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest.name.clone());
    let k = manifest.num_classes;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image_path = resolve(dir, &entry.image)?;
        let image = read_image::<T>(&image_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let name = sample_name(&entry.image);

        let mask = if let Some(m) = &entry.mask {
            read_mask(&resolve(dir, m)?)?
        } else if !entry.annotations.is_empty() {
            let masks = entry
                .annotations
                .iter()
                .map(|a| read_mask(&resolve(dir, a)?))
                .collect::<Result<Vec<_>>>()?;
            fuse_annotations(&masks, k)?
        } else if let Some(rec) = manifest.centroids.iter().find(|c| c.image == entry.image) {
            rasterize_centroids(&rec.points, rec.radius, h, w, rec.background, k)?
        } else {
            return Err(Error::Ingest {
                path: image_path,
                detail: "sample has neither mask, annotations nor centroids".into(),
            });
        };

        if mask.hw()? != (h, w) {
            return Err(Error::Ingest {
                path: image_path,
                detail: format!("image is {h}x{w} but mask is {:?}", mask.shape()),
            });
        }
        let bad = mask.data().iter().filter(|&&v| v as usize >= k).count();
        if bad > 0 {
            return Err(Error::LabelRange {
                detail: format!("sample {name}: {bad} pixels with class >= {k}"),
            });
        }
        samples.push(Sample::new(name, image, mask, id.clone())?);
    }
    TaskSource::new(id, manifest.name, manifest.class_names, samples)
}

/// Writes a source in the on-disk layout (`manifest.json`, `images/`,
/// `masks/`). Image values are quantized to 8 bits.
pub fn export_source<T: Scalar>(source: &TaskSource<T>, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(source.samples.len());
    for s in &source.samples {
        let (h, w) = (s.height(), s.width());
        let plane = h * w;
        let img = s.image.data();
        let mut rgb = vec![0u8; 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                let v = img[ch * plane + p].as_f64().clamp(0.0, 1.0);
                rgb[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        let image_rel = format!("images/{}.png", s.name);
        let mask_rel = format!("masks/{}.png", s.name);
        write_png(&dir.join(&image_rel), w, h, 3, &rgb)?;
        write_png(&dir.join(&mask_rel), w, h, 1, s.mask.data())?;
        entries.push(ManifestSample {
            image: image_rel,
            mask: Some(mask_rel),
            annotations: Vec::new(),
        });
    }
    let manifest = SourceManifest {
        name: source.name.clone(),
        num_classes: source.num_classes,
        class_names: source.class_names.clone(),
        samples: entries,
        centroids: Vec::new(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Ingests every subdirectory of `root` that holds a manifest, sorted by name.
pub fn ingest_dataset<T: Scalar>(root: &Path) -> Result<Vec<TaskSource<T>>> {
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingest {
            path: root.to_path_buf(),
            detail: "no source directories with a manifest.json".into(),
        });
    }
    dirs.iter().map(|d| ingest_source(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_eighty_twenty() {
        let parts = split_source(10, &[0.8, 0.2], 3).unwrap();
        assert_eq!(parts[0].len(), 8);
        assert_eq!(parts[1].len(), 2);
        assert!(parts[0].iter().all(|i| !parts[1].contains(i)));
        assert_eq!(parts, split_source(10, &[0.8, 0.2], 3).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_source(10, &[0.5, 0.4], 0), Err(Error::Config(_))));
        assert!(matches!(split_source(2, &[0.9, 0.05, 0.05], 0), Err(Error::Config(_))));
        assert!(split_source(3, &[0.5, 0.0, 0.5], 0).unwrap()[1].is_empty());
    }

    #[test]
    fn split_union_is_complete() {
        for case in 0..50u64 {
            let n = 3 + (case as usize * 7) % 60;
            let a = 0.2 + (case % 5) as f64 * 0.1;
            let fr = [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0];
            let parts = split_source(n, &fr, case).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "case {case}");
        }
    }

    #[test]
    fn source_rejects_out_of_range_masks() {
        let img = Tensor::<f32>::zeros(&[3, 2, 2]);
        let mask = IntMask::new(vec![2, 2], vec![0, 1, 7, 0]).unwrap();
        let s = Sample::new("x".into(), img, mask, "src".into()).unwrap();
        let names = (0..6).map(|i| i.to_string()).collect();
        let err = TaskSource::new("src".into(), "src".into(), names, vec![s]).unwrap_err();
        assert!(matches!(err, Error::LabelRange { .. }));
        assert!(err.to_string().contains("x"));
    }
}
