//! Held-out-task grid: every source is refined from models pretrained on
//! each other single source and on all other sources, with both trainers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{MetaDataset, SplitConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, Mode, RunManifest, RunResult, CHECKPOINT_FILE, RESULT_FILE};
use crate::metatrain::{MamlConfig, RefineConfig, TransferConfig};
use crate::sampler::SamplerConfig;
use crate::scalar::Scalar;
use crate::segnet::UNetConfig;

pub const ALL_OTHERS: &str = "All others";
const ALL_KEY: &str = "_all";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MAML")]
    Maml,
    #[serde(rename = "TransferL")]
    Transfer,
}

impl Method {
    pub const BOTH: [Method; 2] = [Method::Maml, Method::Transfer];

    pub fn label(self) -> &'static str {
        match self {
            Method::Maml => "MAML",
            Method::Transfer => "TransferL",
        }
    }

    fn mode(self) -> Mode {
        match self {
            Method::Maml => Mode::Maml,
            Method::Transfer => Mode::Transfer,
        }
    }
}

/// Pretraining set of one column.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pretrain {
    AllOthers,
    Single(String),
}

impl Pretrain {
    pub fn label(&self) -> &str {
        match self {
            Pretrain::AllOthers => ALL_OTHERS,
            Pretrain::Single(id) => id,
        }
    }

    fn dir_key(&self) -> &str {
        match self {
            Pretrain::AllOthers => ALL_KEY,
            Pretrain::Single(id) => id,
        }
    }
}

fn one() -> usize {
    1
}

/// Shared hyperparameters of every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "experiment::desk_augment", deserialize_with = "experiment::desk_augment_patch")]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub maml: MamlConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    /// Threads inside each training run.
    #[serde(default = "one")]
    pub workers: usize,
    /// Restrict the rows to these held-out sources (empty: all).
    #[serde(default)]
    pub tasks: Vec<String>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            seed: 0,
            split: SplitConfig::default(),
            sampler: SamplerConfig::default(),
            augment: experiment::desk_augment(),
            unet: UNetConfig::default(),
            maml: MamlConfig::default(),
            transfer: TransferConfig::default(),
            refine: RefineConfig::default(),
            workers: 1,
            tasks: Vec::new(),
        }
    }
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid matrix config: {e}")))
    }

    fn base(&self, mode: Mode, dataset: &Path, out: PathBuf) -> RunManifest {
        RunManifest {
            seed: self.seed,
            split: self.split.clone(),
            sampler: self.sampler.clone(),
            augment: self.augment.clone(),
            unet: self.unet,
            maml: self.maml.clone(),
            transfer: self.transfer.clone(),
            refine: self.refine.clone(),
            workers: self.workers,
            ..RunManifest::new(mode, dataset, out)
        }
    }

    /// Manifest that pretrains `column` (for held-out `task`) with `method`.
    pub fn pretrain_manifest(
        &self,
        dataset: &Path,
        out: &Path,
        task: &str,
        column: &Pretrain,
        method: Method,
    ) -> RunManifest {
        let (dir, sources) = match column {
            Pretrain::AllOthers => (out.join("pretrain").join(ALL_KEY).join(task), Vec::new()),
            Pretrain::Single(id) => (out.join("pretrain").join(id), vec![id.clone()]),
        };
        let mut m = self.base(method.mode(), dataset, dir.join(method.label()));
        m.train_sources = sources;
        if *column == Pretrain::AllOthers {
            m.task = Some(task.to_string());
        }
        m
    }

    /// Manifest that refines the pretrained model of a cell on `task`.
    pub fn cell_manifest(&self, dataset: &Path, out: &Path, task: &str, column: &Pretrain, method: Method) -> RunManifest {
        let pre = self.pretrain_manifest(dataset, out, task, column, method);
        let dir = out.join("cells").join(task).join(column.dir_key()).join(method.label());
        let mut m = self.base(Mode::Refine, dataset, dir);
        m.task = Some(task.to_string());
        m.pretrained = Some(pre.out_dir.join(CHECKPOINT_FILE));
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub task: String,
    pub column: Pretrain,
    pub method: Method,
    /// `None` on the diagonal.
    pub miou: Option<f64>,
}

/// Rows are held-out tasks; columns are `All others` then every source, each
/// with both methods.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultGrid {
    pub rows: Vec<String>,
    pub columns: Vec<Pretrain>,
    pub cells: Vec<Cell>,
}

impl ResultGrid {
    pub fn get(&self, task: &str, column: &Pretrain, method: Method) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.task == task && &c.column == column && c.method == method)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("task");
        for c in &self.columns {
            for m in Method::BOTH {
                let _ = write!(s, "\t{}/{}", c.label(), m.label());
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            for c in &self.columns {
                for m in Method::BOTH {
                    match self.get(r, c, m).and_then(|c| c.miou) {
                        Some(v) => {
                            let _ = write!(s, "\t{v:.6}");
                        }
                        None => s.push_str("\tNA"),
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// Aligned table; `*` marks the better method of each column pair.
    pub fn to_text(&self) -> String {
        let mut header = vec!["task".to_string()];
        for c in &self.columns {
            for m in Method::BOTH {
                header.push(format!("{}/{}", c.label(), m.label()));
            }
        }
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![r.clone()];
            for c in &self.columns {
                let vals: Vec<Option<f64>> = Method::BOTH
                    .iter()
                    .map(|&m| self.get(r, c, m).and_then(|c| c.miou))
                    .collect();
                let best = match (vals[0], vals[1]) {
                    (Some(a), Some(b)) if a > b => Some(0),
                    (Some(a), Some(b)) if b > a => Some(1),
                    _ => None,
                };
                for (i, v) in vals.iter().enumerate() {
                    line.push(match v {
                        Some(v) if best == Some(i) => format!("{v:.4}*"),
                        Some(v) => format!("{v:.4} "),
                        None => "NA ".into(),
                    });
                }
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|j| table.iter().map(|row| row[j].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, v)| if j == 0 { format!("{v:<w$}", w = widths[j]) } else { format!("{v:>w$}", w = widths[j]) })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Reuses a finished run when its recorded manifest hash matches.
fn run_cached<T: Scalar>(m: &RunManifest, meta: &MetaDataset<T>) -> Result<RunResult> {
    let result_path = m.out_dir.join(RESULT_FILE);
    if result_path.is_file() && m.out_dir.join(CHECKPOINT_FILE).is_file() {
        if let Ok(r) = RunResult::load(&result_path) {
            if r.manifest_hash == m.hash()? && r.precision == T::DTYPE {
                return Ok(r);
            }
        }
    }
    // a stale result must not survive a rerun that fails halfway
    let _ = fs::remove_file(&result_path);
    experiment::run_on::<T>(m, meta)
}

pub const GRID_TSV: &str = "grid.tsv";
pub const GRID_TXT: &str = "grid.txt";

/// Runs (or resumes) the whole grid and writes `grid.tsv` and `grid.txt`.
pub fn run_matrix<T: Scalar>(
    dataset: &Path,
    cfg: &MatrixConfig,
    out: &Path,
    mut progress: impl FnMut(&Cell),
) -> Result<ResultGrid> {
    let meta = MetaDataset::<T>::new(crate::dataset::ingest_dataset(dataset)?, &cfg.split)?;
    let ids = meta.ids();
    if ids.len() < 3 {
        return Err(Error::Config(format!("the matrix needs >= 3 sources, found {}", ids.len())));
    }
    let rows = if cfg.tasks.is_empty() {
        ids.clone()
    } else {
        for t in &cfg.tasks {
            meta.source(t)?;
        }
        cfg.tasks.clone()
    };
    let columns: Vec<Pretrain> = std::iter::once(Pretrain::AllOthers)
        .chain(ids.iter().cloned().map(Pretrain::Single))
        .collect();
    // fail on bad hyperparameters before any training
    cfg.base(Mode::Maml, dataset, out.to_path_buf()).validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("matrix.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&serde_json::to_value(cfg)?)? + "\n")
        .map_err(|e| Error::io(&cfg_path, e))?;

    let mut cells = Vec::new();
    for task in &rows {
        for column in &columns {
            for method in Method::BOTH {
                let miou = if column.label() == task {
                    None
                } else {
                    run_cached::<T>(&cfg.pretrain_manifest(dataset, out, task, column, method), &meta)?;
                    run_cached::<T>(&cfg.cell_manifest(dataset, out, task, column, method), &meta)?.miou
                };
                let cell = Cell {
                    task: task.clone(),
                    column: column.clone(),
                    method,
                    miou,
                };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    let grid = ResultGrid { rows, columns, cells };
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(GRID_TSV, grid.to_tsv())?;
    write(GRID_TXT, grid.to_text())?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ResultGrid {
        let rows = vec!["a".to_string(), "b".to_string()];
        let columns = vec![Pretrain::AllOthers, Pretrain::Single("a".into()), Pretrain::Single("b".into())];
        let mut cells = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for c in &columns {
                for m in Method::BOTH {
                    let miou = (c.label() != r).then(|| 0.1 * (i + 1) as f64 + if m == Method::Maml { 0.05 } else { 0.0 });
                    cells.push(Cell {
                        task: r.clone(),
                        column: c.clone(),
                        method: m,
                        miou,
                    });
                }
            }
        }
        ResultGrid { rows, columns, cells }
    }

    #[test]
    fn tsv_layout() {
        let tsv = toy().to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split('\t').count(), 7);
        assert!(lines[0].starts_with("task\tAll others/MAML\tAll others/TransferL\ta/MAML"));
        assert_eq!(lines[1], "a\t0.150000\t0.100000\tNA\tNA\t0.150000\t0.100000");
    }

    #[test]
    fn text_marks_better_method() {
        let txt = toy().to_text();
        assert!(txt.contains("0.1500*"));
        assert!(!txt.contains("0.1000*"));
        assert!(txt.contains("NA"));
    }

    #[test]
    fn cell_paths_share_single_source_pretraining() {
        let cfg = MatrixConfig::default();
        let d = Path::new("/d");
        let o = Path::new("/o");
        let col = Pretrain::Single("c".into());
        let a = cfg.pretrain_manifest(d, o, "a", &col, Method::Maml);
        let b = cfg.pretrain_manifest(d, o, "b", &col, Method::Maml);
        assert_eq!(a, b);
        let a = cfg.pretrain_manifest(d, o, "a", &Pretrain::AllOthers, Method::Transfer);
        let b = cfg.pretrain_manifest(d, o, "b", &Pretrain::AllOthers, Method::Transfer);
        assert_ne!(a.out_dir, b.out_dir);
        let cell = cfg.cell_manifest(d, o, "a", &col, Method::Maml);
        assert_eq!(cell.pretrained.unwrap(), Path::new("/o/pretrain/c/MAML/checkpoint.bin"));
    }
}
