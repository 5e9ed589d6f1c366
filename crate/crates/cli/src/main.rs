use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metaseg::checkpoint;
use metaseg::dataset::{export_source, generate_synthetic_source, ingest_dataset, MetaDataset, SplitConfig};
use metaseg::eval::evaluate_accumulator;
use metaseg::experiment::{self, RunManifest, MANIFEST_FILE};
use metaseg::gradsuite::{self, Check};
use metaseg::matrix::{run_matrix, MatrixConfig};
use metaseg::report::write_overlay;
use metaseg::segnet::UNet;
use metaseg::{Error, Scalar};

const PRECISION_VAR: &str = "METASEG_PRECISION";

#[derive(Parser)]
#[command(name = "metaseg", version, about = "Meta-learning for multi-task semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic meta-dataset, one source per K:n entry.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class-count:sample-count pairs, e.g. 2:40,3:40.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run one manifest (maml, transfer, refine or eval).
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Held-out-task grid over every source.
    Matrix {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU of a checkpoint on a task's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Input / truth / prediction strip for one sample.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Sample index within the task's source.
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; defaults to the one in the run manifest next to the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and the U-Net.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

#[derive(Clone, Copy)]
enum Precision {
    F32,
    F64,
}

fn precision() -> Result<Precision, Error> {
    match std::env::var(PRECISION_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(Precision::F32),
        Ok(v) if v == "f32" => Ok(Precision::F32),
        Ok(v) if v == "f64" => Ok(Precision::F64),
        Ok(v) => Err(Error::Config(format!("{PRECISION_VAR} must be f32 or f64, got {v:?}"))),
        Err(e) => Err(Error::Config(format!("{PRECISION_VAR}: {e}"))),
    }
}

fn parse_spec(spec: &str) -> Result<Vec<(usize, usize)>, Error> {
    spec.split(',')
        .map(|part| {
            let bad = || Error::Config(format!("bad --spec entry {part:?}, expected K:n"));
            let (k, n) = part.trim().split_once(':').ok_or_else(bad)?;
            Ok((k.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn synth(seed: u64, spec: &str, out: &Path, size: usize) -> Result<(), Error> {
    let entries = parse_spec(spec)?;
    if entries.is_empty() || size == 0 {
        return Err(Error::Config("synth needs at least one K:n entry and a positive size".into()));
    }
    for (i, &(k, n)) in entries.iter().enumerate() {
        let id = format!("s{i}_k{k}");
        let src = generate_synthetic_source::<f64>(&id, seed, k, n, size, size)?;
        export_source(&src, &out.join(&id))?;
        println!("{id}\tK={k}\tn={n}");
    }
    Ok(())
}

fn train<T: Scalar>(manifest: &Path) -> Result<(), Error> {
    let m = RunManifest::load(manifest)?;
    let t0 = Instant::now();
    let r = experiment::run::<T>(&m)?;
    println!("{}", serde_json::to_string(&r)?);
    eprintln!("done in {:.1}s, artifacts in {}", t0.elapsed().as_secs_f64(), m.out_dir.display());
    Ok(())
}

/// Split used with a checkpoint: the one of its run manifest when present.
fn split_for(ckpt: &Path) -> Result<SplitConfig, Error> {
    match sibling_manifest(ckpt) {
        Some(p) => Ok(RunManifest::load(&p)?.split),
        None => Ok(SplitConfig::default()),
    }
}

fn sibling_manifest(ckpt: &Path) -> Option<PathBuf> {
    let p = ckpt.parent()?.join(MANIFEST_FILE);
    p.is_file().then_some(p)
}

fn eval<T: Scalar>(ckpt: &Path, dataset: &Path, task: &str) -> Result<(), Error> {
    let ck = checkpoint::load::<T>(ckpt)?;
    let meta = MetaDataset::<T>::new(ingest_dataset(dataset)?, &split_for(ckpt)?)?;
    let source = meta.source(task)?;
    let net = UNet::new(ck.unet)?;
    let acc = evaluate_accumulator(&net, &ck.params, source, &meta.split(task)?.test)?;
    let out = serde_json::json!({ "task": task, "miou": acc.miou()?, "class_iou": acc.ious() });
    println!("{out}");
    Ok(())
}

fn overlay<T: Scalar>(ckpt: &Path, task: &str, index: usize, out: &Path, dataset: Option<&Path>) -> Result<(), Error> {
    let dataset = match dataset {
        Some(d) => d.to_path_buf(),
        None => {
            let m = sibling_manifest(ckpt)
                .ok_or_else(|| Error::Config("no --dataset and no run manifest next to the checkpoint".into()))?;
            RunManifest::load(&m)?.dataset_root
        }
    };
    let ck = checkpoint::load::<T>(ckpt)?;
    let sources = ingest_dataset::<T>(&dataset)?;
    let source = sources
        .iter()
        .find(|s| s.id == task)
        .ok_or_else(|| Error::Config(format!("no source {task:?} in {}", dataset.display())))?;
    let sample = source
        .samples
        .get(index)
        .ok_or_else(|| Error::Config(format!("source {task} has {} samples, no index {index}", source.samples.len())))?;
    write_overlay(out, &UNet::new(ck.unet)?, &ck.params, task, sample)
}

fn matrix<T: Scalar>(dataset: &Path, config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = MatrixConfig::load(config)?;
    let grid = run_matrix::<T>(dataset, &cfg, out, |c| match c.miou {
        Some(v) => eprintln!("{}\t{}\t{}\t{v:.4}", c.task, c.column.label(), c.method.label()),
        None => eprintln!("{}\t{}\t{}\tNA", c.task, c.column.label(), c.method.label()),
    })?;
    print!("{}", grid.to_text());
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<bool, Error> {
    let t0 = Instant::now();
    let outcomes = gradsuite::run(&Check::ALL, 0..seeds)?;
    let mut ok = true;
    for check in Check::ALL {
        let worst = outcomes
            .iter()
            .filter(|o| o.check == check)
            .map(|o| o.report.max_rel_error)
            .fold(0.0, f64::max);
        let pass = worst < gradsuite::TOLERANCE;
        ok &= pass;
        println!("{:<24} max rel err {worst:.3e}  {}", check.name(), if pass { "ok" } else { "FAIL" });
    }
    println!("{} checks x {seeds} seeds in {:.1}s", Check::ALL.len(), t0.elapsed().as_secs_f64());
    Ok(ok)
}

fn dispatch(cmd: Cmd) -> Result<bool, Error> {
    let p = precision()?;
    macro_rules! typed {
        ($f:ident ( $($a:expr),* )) => {
            match p {
                Precision::F32 => $f::<f32>($($a),*),
                Precision::F64 => $f::<f64>($($a),*),
            }
        };
    }
    match cmd {
        Cmd::Synth { seed, spec, out, size } => synth(seed, &spec, &out, size)?,
        Cmd::Train { manifest } => typed!(train(&manifest))?,
        Cmd::Matrix { dataset, config, out } => typed!(matrix(&dataset, &config, &out))?,
        Cmd::Eval {
            checkpoint,
            dataset,
            task,
        } => typed!(eval(&checkpoint, &dataset, &task))?,
        Cmd::Overlay {
            checkpoint,
            task,
            index,
            out,
            dataset,
        } => typed!(overlay(&checkpoint, &task, index, &out, dataset.as_deref()))?,
        Cmd::Gradcheck { seeds } => return gradcheck(seeds),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
