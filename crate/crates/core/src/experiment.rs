//! Run manifests and the single-run driver behind `train`, `eval` and the
//! matrix runner.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::checkpoint;
use crate::dataset::{ingest_dataset, MetaDataset, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_accumulator;
use crate::metatrain::{
    refine_on_new_task, train_maml, train_transfer, MamlConfig, RefineConfig, TrainSetup, TransferConfig,
};
use crate::params::ParamSet;
use crate::rng;
use crate::sampler::{SamplerConfig, TaskDistribution};
use crate::scalar::Scalar;
use crate::segnet::{heads, InitSpec, UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Maml,
    Transfer,
    Refine,
    Eval,
}

/// Crop used when a manifest does not set one.
pub const DESK_CROP: usize = 64;

pub fn desk_augment() -> AugmentConfig {
    AugmentConfig::default().with_crop(DESK_CROP, DESK_CROP)
}

/// Reads a partial augment block, filling missing fields from [`desk_augment`].
pub fn desk_augment_patch<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<AugmentConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(desk_augment()).map_err(D::Error::custom)?;
    match (base.as_object_mut(), patch) {
        (Some(b), serde_json::Value::Object(p)) => b.extend(p),
        _ => return Err(D::Error::custom("augment must be an object")),
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

fn one() -> usize {
    1
}

/// Complete description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub mode: Mode,
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitConfig,
    /// Pretraining sources; empty means every source except `task`.
    #[serde(default)]
    pub train_sources: Vec<String>,
    /// Held-out task for `refine` and `eval`.
    #[serde(default)]
    pub task: Option<String>,
    /// Checkpoint to refine or evaluate; `refine` without one starts from a
    /// random backbone.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "desk_augment", deserialize_with = "desk_augment_patch")]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub maml: MamlConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default = "one")]
    pub workers: usize,
    /// Also write the checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunManifest {
    pub fn new(mode: Mode, dataset_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            mode,
            dataset_root: dataset_root.into(),
            out_dir: out_dir.into(),
            seed: 0,
            split: SplitConfig::default(),
            train_sources: Vec::new(),
            task: None,
            pretrained: None,
            sampler: SamplerConfig::default(),
            augment: desk_augment(),
            unet: UNetConfig::default(),
            maml: MamlConfig::default(),
            transfer: TransferConfig::default(),
            refine: RefineConfig::default(),
            workers: 1,
            checkpoint_every: 0,
        }
    }

    /// Parses a manifest; relative paths are taken relative to `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut m: RunManifest =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run manifest: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.dataset_root);
        fix(&mut m.out_dir);
        if let Some(p) = m.pretrained.as_mut() {
            fix(p);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Compact JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.maml.validate()?;
        let m = self.unet.size_multiple();
        if self.augment.crop.iter().any(|c| c % m != 0) {
            return Err(Error::Config(format!(
                "augment.crop {:?} must be divisible by {m} for depth {}",
                self.augment.crop, self.unet.depth
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        match self.mode {
            Mode::Maml | Mode::Transfer => {
                if self.pretrained.is_some() {
                    return Err(Error::Config("pretrained is only used by refine and eval".into()));
                }
            }
            Mode::Refine => {
                if self.task.is_none() {
                    return Err(Error::Config("refine needs a task".into()));
                }
            }
            Mode::Eval => {
                if self.task.is_none() || self.pretrained.is_none() {
                    return Err(Error::Config("eval needs a task and a pretrained checkpoint".into()));
                }
            }
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const RESULT_FILE: &str = "result.json";

/// What a finished run reports (also written to `result.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub manifest_hash: String,
    pub precision: String,
    pub iters: usize,
    pub final_loss: Option<f64>,
    pub task: Option<String>,
    pub miou: Option<f64>,
    pub class_iou: Option<Vec<Option<f64>>>,
}

impl RunResult {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

const INIT_KEY: u64 = 0x1417;

fn pretty_sorted<S: Serialize>(v: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::to_value(v)?)? + "\n")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss stream: deterministic `metrics.tsv` plus wall-clock `timing.tsv`.
struct MetricsSink {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    metrics_path: PathBuf,
    start: Instant,
}

impl MetricsSink {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(MetricsSink {
            metrics: open(METRICS_FILE, "iter\tloss")?,
            timing: open(TIMING_FILE, "iter\twall_ms")?,
            metrics_path: dir.join(METRICS_FILE),
            start: Instant::now(),
        })
    }

    fn record(&mut self, iter: usize, loss: f64) -> Result<()> {
        let ms = self.start.elapsed().as_millis();
        let p = &self.metrics_path;
        writeln!(self.metrics, "{iter}\t{loss}").map_err(|e| Error::io(p, e))?;
        writeln!(self.timing, "{iter}\t{ms}").map_err(|e| Error::io(p, e))?;
        self.metrics.flush().map_err(|e| Error::io(p, e))
    }

    fn finish(mut self) -> Result<()> {
        let p = self.metrics_path.clone();
        self.metrics.flush().map_err(|e| Error::io(&p, e))?;
        self.timing.flush().map_err(|e| Error::io(&p, e))
    }
}

pub fn load_meta<T: Scalar>(m: &RunManifest) -> Result<MetaDataset<T>> {
    MetaDataset::new(ingest_dataset(&m.dataset_root)?, &m.split)
}

fn resolve_train_sources<T: Scalar>(m: &RunManifest, meta: &MetaDataset<T>) -> Result<Vec<String>> {
    let ids = if m.train_sources.is_empty() {
        meta.ids()
            .into_iter()
            .filter(|id| Some(id) != m.task.as_ref())
            .collect()
    } else {
        m.train_sources.clone()
    };
    if ids.is_empty() {
        return Err(Error::Config("no training sources".into()));
    }
    for id in &ids {
        meta.source(id)?;
        if Some(id) == m.task.as_ref() {
            return Err(Error::Config(format!("task {id} is also a training source")));
        }
    }
    Ok(ids)
}

fn load_pretrained<T: Scalar>(m: &RunManifest) -> Result<ParamSet<T>> {
    let path = m
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::Config("no pretrained checkpoint given".into()))?;
    let ck = checkpoint::load::<T>(path)?;
    if ck.unet != m.unet {
        return Err(Error::Config(format!(
            "checkpoint U-Net {:?} differs from the manifest's {:?}",
            ck.unet, m.unet
        )));
    }
    Ok(ck.params)
}

/// Executes `m`, writing its artifacts under `m.out_dir`.
pub fn run<T: Scalar>(m: &RunManifest) -> Result<RunResult> {
    m.validate()?;
    let meta = load_meta::<T>(m)?;
    run_on::<T>(m, &meta)
}

/// Like [`run`] with the dataset already loaded (it must match the manifest).
pub fn run_on<T: Scalar>(m: &RunManifest, meta: &MetaDataset<T>) -> Result<RunResult> {
    m.validate()?;
    let out = &m.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(MANIFEST_FILE), &pretty_sorted(m)?)?;
    let net = UNet::new(m.unet)?;
    let setup = TrainSetup {
        net,
        meta,
        sampler: m.sampler.clone(),
        augment: m.augment.clone(),
        seed: m.seed,
        workers: m.workers,
    };
    let mut result = RunResult {
        mode: m.mode,
        manifest_hash: m.hash()?,
        precision: T::DTYPE.into(),
        iters: 0,
        final_loss: None,
        task: m.task.clone(),
        miou: None,
        class_iou: None,
    };
    let ckpt = out.join(CHECKPOINT_FILE);

    match m.mode {
        Mode::Maml | Mode::Transfer => {
            let ids = resolve_train_sources(m, meta)?;
            let sub = meta.subset(&ids)?;
            let tasks: Vec<(String, usize)> = sub.sources.iter().map(|s| (s.id.clone(), s.num_classes)).collect();
            let mut params: ParamSet<T> = net.build(&tasks, &InitSpec::new(rng::mix(m.seed, &[INIT_KEY])))?;
            let setup = TrainSetup { meta: &sub, ..setup };
            let mut sink = MetricsSink::create(out)?;
            let mut last = None;
            let on_step = |it: usize, loss: f64, p: &ParamSet<T>| -> Result<()> {
                sink.record(it, loss)?;
                last = Some(loss);
                if m.checkpoint_every > 0 && (it + 1) % m.checkpoint_every == 0 {
                    checkpoint::save(&ckpt, &m.unet, p)?;
                }
                Ok(())
            };
            if m.mode == Mode::Maml {
                let dist = TaskDistribution::uniform(&ids)?;
                train_maml(&setup, &mut params, dist, &m.maml, on_step)?;
                result.iters = m.maml.max_iters;
            } else {
                train_transfer(&setup, &mut params, &m.transfer, on_step)?;
                result.iters = m.transfer.max_iters;
            }
            sink.finish()?;
            checkpoint::save(&ckpt, &m.unet, &params)?;
            result.final_loss = last;
        }
        Mode::Refine => {
            let task_id = m.task.as_deref().expect("validated");
            let task = meta.source(task_id)?;
            let pretrained: ParamSet<T> = match &m.pretrained {
                Some(_) => load_pretrained(m)?,
                None => net.build(&[], &InitSpec::new(rng::mix(m.seed, &[INIT_KEY])))?,
            };
            if heads(&pretrained).contains_key(task_id) {
                return Err(Error::Config(format!("pretrained model already has a head for {task_id}")));
            }
            let outcome = refine_on_new_task(&setup, &pretrained, task, &m.refine)?;
            let mut sink = MetricsSink::create(out)?;
            for (it, &l) in outcome.losses.iter().enumerate() {
                sink.record(it, l)?;
            }
            sink.finish()?;
            checkpoint::save(&ckpt, &m.unet, &outcome.params)?;
            let acc = evaluate_accumulator(&net, &outcome.params, task, &meta.split(task_id)?.test)?;
            result.iters = m.refine.iters;
            result.final_loss = outcome.losses.last().copied();
            result.miou = Some(outcome.miou);
            result.class_iou = Some(acc.ious());
        }
        Mode::Eval => {
            let task_id = m.task.as_deref().expect("validated");
            let task = meta.source(task_id)?;
            let params: ParamSet<T> = load_pretrained(m)?;
            let acc = evaluate_accumulator(&net, &params, task, &meta.split(task_id)?.test)?;
            result.miou = Some(acc.miou()?);
            result.class_iou = Some(acc.ious());
        }
    }
    write_file(&out.join(RESULT_FILE), &pretty_sorted(&result)?)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_keys_are_sorted() {
        let m = RunManifest::new(Mode::Maml, "/data", "/out");
        let text = m.canonical_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.find("\"augment\"").unwrap() < text.find("\"checkpoint_every\"").unwrap());
        assert_eq!(m.hash().unwrap().len(), 64);
    }

    #[test]
    fn manifest_json_round_trip_and_defaults() {
        let m = RunManifest::from_json(
            r#"{"mode":"transfer","dataset_root":"d","out_dir":"o","seed":3}"#,
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(m.dataset_root, PathBuf::from("/base/d"));
        assert_eq!(m.augment.crop, [64, 64]);
        let p = RunManifest::from_json(
            r#"{"mode":"maml","dataset_root":"d","out_dir":"o","augment":{"flip_prob":0.0},"refine":{"lr":0.5}}"#,
            Path::new("."),
        )
        .unwrap();
        assert_eq!((p.augment.crop, p.augment.flip_prob), ([64, 64], 0.0));
        assert_eq!((p.refine.lr, p.refine.iters), (0.5, RefineConfig::default().iters));
        assert_eq!(m.unet, UNetConfig::default());
        let again = RunManifest::from_json(&m.canonical_json().unwrap(), Path::new("/x")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn validation() {
        assert!(RunManifest::from_json(r#"{"mode":"maml","dataset_root":"d","out_dir":"o","bogus":1}"#, Path::new("."))
            .is_err());
        let mut m = RunManifest::new(Mode::Refine, "d", "o");
        assert!(m.validate().is_err());
        m.task = Some("a".into());
        m.validate().unwrap();
        m.augment.crop = [60, 64];
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }
}
