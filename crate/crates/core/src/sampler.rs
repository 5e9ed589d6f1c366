//! Episodic (task-level) and truncation-balanced (instance-level) batch
//! construction.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{MetaDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

const EPISODE_KEY: u64 = 0xe915;
const EPOCH_KEY: u64 = 0xe90c;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Instances per episode.
    pub episode_size: usize,
    pub support_size: usize,
    /// Episodes per meta-batch.
    pub batch_episodes: usize,
    pub instance_batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            episode_size: 16,
            support_size: 8,
            batch_episodes: 4,
            instance_batch_size: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size == 0 || self.support_size >= self.episode_size {
            return Err(Error::Config(format!(
                "sampler: need 0 < support_size < episode_size, got {} and {}",
                self.support_size, self.episode_size
            )));
        }
        if self.batch_episodes == 0 || self.instance_batch_size == 0 {
            return Err(Error::Config("sampler: batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Probability of drawing each source as an episode's task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistribution {
    entries: Vec<(String, f64)>,
}

impl TaskDistribution {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("task distribution is empty".into()));
        }
        let mut total = 0.0;
        for (id, p) in &entries {
            if !(*p >= 0.0) {
                return Err(Error::Config(format!("task distribution: P({id}) = {p} is negative")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task distribution sums to {total}, not 1")));
        }
        for (i, (id, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(o, _)| o == id) {
                return Err(Error::Config(format!("task distribution lists {id} twice")));
            }
        }
        Ok(TaskDistribution { entries })
    }

    pub fn uniform(ids: &[String]) -> Result<Self> {
        let p = 1.0 / ids.len().max(1) as f64;
        Self::new(ids.iter().map(|id| (id.clone(), p)).collect())
    }

    pub fn point(id: &str) -> Self {
        TaskDistribution {
            entries: vec![(id.to_string(), 1.0)],
        }
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn draw(&self, r: &mut rng::Rng) -> &str {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (id, p) in &self.entries {
            acc += p;
            if u < acc {
                return id;
            }
        }
        // rounding left a sliver above the last cumulative value
        let last = self.entries.iter().rev().find(|(_, p)| *p > 0.0);
        &last.unwrap_or(&self.entries[0]).0
    }
}

/// One homogeneous episode. Indices point into the task's `samples`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub task_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_samples<'a, T: Scalar>(&self, meta: &'a MetaDataset<T>) -> Result<Vec<&'a Sample<T>>> {
        let src = meta.source(&self.task_id)?;
        Ok(self.support.iter().map(|&i| &src.samples[i]).collect())
    }

    pub fn query_samples<'a, T: Scalar>(&self, meta: &'a MetaDataset<T>) -> Result<Vec<&'a Sample<T>>> {
        let src = meta.source(&self.task_id)?;
        Ok(self.query.iter().map(|&i| &src.samples[i]).collect())
    }
}

pub type EpisodeBatch = Vec<Episode>;

/// Order-preserving prefix/suffix split.
pub fn split_support_query<I: Clone>(instances: &[I], support_size: usize) -> Result<(Vec<I>, Vec<I>)> {
    if support_size >= instances.len() {
        return Err(Error::Config(format!(
            "support_size {support_size} must be smaller than the {} instances",
            instances.len()
        )));
    }
    let (s, q) = instances.split_at(support_size);
    Ok((s.to_vec(), q.to_vec()))
}

/// Infinite, seed-determined stream of episode batches. Batch `i` depends
/// only on `(seed, i)`, so a stream can be resumed at any index.
pub struct EpisodeLoader<'a, T> {
    meta: &'a MetaDataset<T>,
    dist: TaskDistribution,
    cfg: SamplerConfig,
    next: u64,
}

pub fn episode_loader<'a, T: Scalar>(
    meta: &'a MetaDataset<T>,
    dist: TaskDistribution,
    cfg: &SamplerConfig,
) -> Result<EpisodeLoader<'a, T>> {
    cfg.validate()?;
    for (id, p) in dist.entries() {
        let split = meta.split(id)?;
        if *p > 0.0 && split.train.is_empty() {
            return Err(Error::Config(format!("source {id} has an empty train split")));
        }
    }
    Ok(EpisodeLoader {
        meta,
        dist,
        cfg: cfg.clone(),
        next: 0,
    })
}

impl<T: Scalar> EpisodeLoader<'_, T> {
    pub fn batch(&self, index: u64) -> Result<EpisodeBatch> {
        let mut r = rng::stream(self.cfg.seed, &[EPISODE_KEY, index]);
        let n = self.cfg.episode_size;
        (0..self.cfg.batch_episodes)
            .map(|_| {
                let task = self.dist.draw(&mut r).to_string();
                let mut pool = self.meta.split(&task)?.train.clone();
                let draw: Vec<usize> = if pool.len() >= n {
                    pool.partial_shuffle(&mut r, n).0.to_vec()
                } else {
                    (0..n).map(|_| pool[r.random_range(0..pool.len())]).collect()
                };
                let (support, query) = split_support_query(&draw, self.cfg.support_size)?;
                Ok(Episode {
                    task_id: task,
                    support,
                    query,
                })
            })
            .collect()
    }

    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }
}

impl<T: Scalar> Iterator for EpisodeLoader<'_, T> {
    type Item = Result<EpisodeBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

/// `(source position in the dataset, sample index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceRef {
    pub source: usize,
    pub sample: usize,
}

impl InstanceRef {
    pub fn resolve<'a, T>(&self, meta: &'a MetaDataset<T>) -> &'a Sample<T> {
        &meta.sources[self.source].samples[self.sample]
    }
}

/// Instance-level batches over all sources, each truncated per epoch to the
/// smallest train split. Epoch `e` depends only on `(seed, e)`.
pub struct BatchLoader<'a, T> {
    meta: &'a MetaDataset<T>,
    cfg: SamplerConfig,
    epoch: u64,
    pending: std::collections::VecDeque<Vec<InstanceRef>>,
}

pub fn batch_loader<'a, T: Scalar>(meta: &'a MetaDataset<T>, cfg: &SamplerConfig) -> Result<BatchLoader<'a, T>> {
    if cfg.instance_batch_size == 0 {
        return Err(Error::Config("sampler: instance_batch_size must be >= 1".into()));
    }
    if meta.sources.is_empty() {
        return Err(Error::Config("batch loader needs at least one source".into()));
    }
    for s in &meta.sources {
        if meta.split(&s.id)?.train.is_empty() {
            return Err(Error::Config(format!("source {} has an empty train split", s.id)));
        }
    }
    Ok(BatchLoader {
        meta,
        cfg: cfg.clone(),
        epoch: 0,
        pending: Default::default(),
    })
}

impl<T: Scalar> BatchLoader<'_, T> {
    /// Every instance of epoch `e`, in emission order.
    pub fn epoch_instances(&self, e: u64) -> Vec<InstanceRef> {
        let mut r = rng::stream(self.cfg.seed, &[EPOCH_KEY, e]);
        let splits: Vec<&Vec<usize>> = self
            .meta
            .sources
            .iter()
            .map(|s| &self.meta.splits[&s.id].train)
            .collect();
        let m = splits.iter().map(|s| s.len()).min().unwrap_or(0);
        let mut pool = Vec::with_capacity(m * splits.len());
        for (si, train) in splits.into_iter().enumerate() {
            let mut idx = train.clone();
            let kept = idx.partial_shuffle(&mut r, m).0;
            pool.extend(kept.iter().map(|&sample| InstanceRef { source: si, sample }));
        }
        pool.shuffle(&mut r);
        pool
    }

    pub fn epoch_batches(&self, e: u64) -> Vec<Vec<InstanceRef>> {
        self.epoch_instances(e)
            .chunks(self.cfg.instance_batch_size)
            .map(<[_]>::to_vec)
            .collect()
    }
}

impl<T: Scalar> Iterator for BatchLoader<'_, T> {
    type Item = Vec<InstanceRef>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending.is_empty() {
            self.pending.extend(self.epoch_batches(self.epoch));
            self.epoch += 1;
        }
        self.pending.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_source, SplitConfig};

    fn meta(sizes: &[usize]) -> MetaDataset<f32> {
        let sources = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| generate_synthetic_source(&format!("s{i}"), i as u64, 2, n, 4, 4).unwrap())
            .collect();
        MetaDataset::all_train(sources).unwrap()
    }

    #[test]
    fn support_query_split() {
        let v: Vec<usize> = (0..16).collect();
        let (s, q) = split_support_query(&v, 8).unwrap();
        assert_eq!((s.len(), q.len()), (8, 8));
        assert_eq!([s, q].concat(), v);
        assert_eq!(split_support_query(&[1, 2], 1).unwrap(), (vec![1], vec![2]));
        assert!(matches!(split_support_query(&[1, 2], 2), Err(Error::Config(_))));
    }

    #[test]
    fn point_mass_and_sizes() {
        let m = meta(&[20, 20]);
        let cfg = SamplerConfig::default();
        let loader = episode_loader(&m, TaskDistribution::point("s1"), &cfg).unwrap();
        for batch in loader.take(20) {
            let batch = batch.unwrap();
            assert_eq!(batch.len(), 4);
            for e in batch {
                assert_eq!(e.task_id, "s1");
                assert_eq!((e.support.len(), e.query.len()), (8, 8));
                assert!(e.support.iter().all(|i| !e.query.contains(i)));
            }
        }
    }

    #[test]
    fn small_split_falls_back_to_replacement() {
        let m = meta(&[5]);
        let cfg = SamplerConfig::default();
        let loader = episode_loader(&m, TaskDistribution::point("s0"), &cfg).unwrap();
        let e = &loader.batch(0).unwrap()[0];
        assert_eq!(e.support.len() + e.query.len(), 16);
        assert!(e.support.iter().chain(&e.query).all(|&i| i < 5));
    }

    #[test]
    fn config_errors() {
        let m = meta(&[20]);
        let bad = SamplerConfig {
            support_size: 16,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            episode_loader(&m, TaskDistribution::point("s0"), &bad).err(),
            Some(Error::Config(_))
        ));
        assert!(matches!(
            episode_loader(&m, TaskDistribution::point("zz"), &SamplerConfig::default()).err(),
            Some(Error::Config(_))
        ));
        assert!(TaskDistribution::new(vec![("a".into(), 0.5), ("b".into(), 0.6)]).is_err());
    }

    #[test]
    fn single_source_epoch_is_a_shuffle() {
        let m = meta(&[12]);
        let loader = batch_loader(&m, &SamplerConfig::default()).unwrap();
        let mut got: Vec<usize> = loader.epoch_instances(0).iter().map(|r| r.sample).collect();
        got.sort_unstable();
        assert_eq!(got, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_replay_and_refresh() {
        let m = meta(&[6, 10]);
        let cfg = SamplerConfig::default();
        let a: Vec<_> = batch_loader(&m, &cfg).unwrap().take(6).collect();
        let b: Vec<_> = batch_loader(&m, &cfg).unwrap().take(6).collect();
        assert_eq!(a, b);
        let l = batch_loader(&m, &cfg).unwrap();
        let kept = |e| {
            let mut v: Vec<usize> = l.epoch_instances(e).iter().filter(|r| r.source == 1).map(|r| r.sample).collect();
            v.sort_unstable();
            v
        };
        assert!((0..5).any(|e| kept(e) != kept(e + 1)));
    }

    #[test]
    fn split_aware() {
        let src = generate_synthetic_source::<f32>("a", 0, 2, 20, 4, 4).unwrap();
        let m = MetaDataset::new(vec![src], &SplitConfig::default()).unwrap();
        let train = m.split("a").unwrap().train.clone();
        let loader = episode_loader(&m, TaskDistribution::point("a"), &SamplerConfig::default()).unwrap();
        for b in loader.take(10) {
            for e in b.unwrap() {
                assert!(e.support.iter().chain(&e.query).all(|i| train.contains(i)));
            }
        }
    }
}
