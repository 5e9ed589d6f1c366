//! First-order MAML, instance-level transfer training, and refinement of a
//! pretrained model on an unseen task.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::dataset::{MetaDataset, Sample, TaskSource};
use crate::error::{Error, Result};
use crate::eval::evaluate_task;
use crate::optim::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::rng;
use crate::sampler::{batch_loader, episode_loader, SamplerConfig, TaskDistribution};
use crate::scalar::Scalar;
use crate::segnet::{is_head_param, InitSpec, UNet};
use crate::tensor::{GradMap, Graph, IntMask, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradOrder {
    #[default]
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    #[serde(default)]
    pub order: GradOrder,
    pub max_iters: usize,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 0.01,
            inner_steps: 1,
            outer_lr: 1e-4,
            order: GradOrder::First,
            max_iters: 500,
        }
    }
}

fn check_rate(what: &str, lr: f64) -> Result<()> {
    if lr >= 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be finite and >= 0, got {lr}")))
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate("maml.inner_lr", self.inner_lr)?;
        check_rate("maml.outer_lr", self.outer_lr)?;
        if self.inner_steps == 0 {
            return Err(Error::Config("maml.inner_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub lr: f64,
    pub max_iters: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lr: 1e-4,
            max_iters: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhichParams {
    #[default]
    All,
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub lr: f64,
    pub iters: usize,
    #[serde(default)]
    pub which_params: WhichParams,
    /// Mixed with the run seed to initialize the fresh head.
    pub init_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lr: 1e-4,
            iters: 200,
            which_params: WhichParams::All,
            init_seed: 0,
        }
    }
}

/// A model trainable by the procedures in this module.
pub trait Learner<T: Scalar>: Sync {
    type Item: Sync;

    /// Mean loss over `items` for `task`, with its gradient.
    fn loss_and_grad(&self, params: &ParamSet<T>, task: &str, items: &[Self::Item]) -> Result<(T, GradMap<T>)>;
}

fn stack_samples<T: Scalar>(task: &str, samples: &[Sample<T>]) -> Result<(Tensor<T>, IntMask)> {
    if samples.is_empty() {
        return Err(Error::Config(format!("no samples for task {task}")));
    }
    if let Some(s) = samples.iter().find(|s| s.source_id != task) {
        return Err(Error::Config(format!(
            "sample {} belongs to {}, not to task {task}",
            s.name, s.source_id
        )));
    }
    let images: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&IntMask> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, IntMask::stack(&masks)?))
}

impl<T: Scalar> Learner<T> for UNet {
    type Item = Sample<T>;

    fn loss_and_grad(&self, params: &ParamSet<T>, task: &str, items: &[Sample<T>]) -> Result<(T, GradMap<T>)> {
        let (images, masks) = stack_samples(task, items)?;
        let mut g = Graph::new();
        let logits = self.forward(&mut g, params, task, images)?;
        let loss = g.softmax_ce(logits, &masks)?;
        Ok((g.value(loss).item()?, g.backward_all(loss)?))
    }
}

/// Mean pixelwise cross-entropy of `task` on `samples`.
pub fn loss_on<T: Scalar>(net: &UNet, params: &ParamSet<T>, task: &str, samples: &[Sample<T>]) -> Result<T> {
    let (images, masks) = stack_samples(task, samples)?;
    let mut g = Graph::new();
    let logits = net.forward(&mut g, params, task, images)?;
    let loss = g.softmax_ce(logits, &masks)?;
    g.value(loss).item()
}

/// `inner_steps` plain gradient steps on the support set; `params` is left
/// untouched.
pub fn inner_adapt<T: Scalar, L: Learner<T>>(
    learner: &L,
    params: &ParamSet<T>,
    task: &str,
    support: &[L::Item],
    cfg: &MamlConfig,
) -> Result<ParamSet<T>> {
    if support.is_empty() {
        return Err(Error::Config(format!("episode for {task} has an empty support set")));
    }
    let lr = T::from_f64_lossy(cfg.inner_lr);
    let mut adapted = params.clone();
    for _ in 0..cfg.inner_steps {
        let (_, g) = learner.loss_and_grad(&adapted, task, support)?;
        adapted.sgd_step(&g, lr)?;
    }
    Ok(adapted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpisode<I> {
    pub task: String,
    pub support: Vec<I>,
    pub query: Vec<I>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
}

fn add_scaled<T: Scalar>(acc: &mut GradMap<T>, g: GradMap<T>, w: T) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, &y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += w * y;
                }
            }
            None => {
                acc.insert(name, if w == T::one() { t } else { t.map(|y| w * y) });
            }
        }
    }
}

/// Runs `f` over `items`, on `pool` when given; results keep input order.
fn ordered_map<I: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[I],
    f: impl Fn(&I) -> R + Sync + Send,
) -> Vec<R> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// One first-order MAML meta-update. Each episode's query gradient is taken
/// at its adapted weights and applied to the base weights; episode
/// gradients are averaged in episode order, then one Adam step is taken.
pub fn maml_outer_step<T: Scalar, L: Learner<T>>(
    learner: &L,
    params: &mut ParamSet<T>,
    adam: &mut AdamState<T>,
    episodes: &[TaskEpisode<L::Item>],
    cfg: &MamlConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepMetrics> {
    if episodes.is_empty() {
        return Err(Error::Config("maml step needs at least one episode".into()));
    }
    let base: &ParamSet<T> = params;
    let results = ordered_map(pool, episodes, |e| {
        let adapted = inner_adapt(learner, base, &e.task, &e.support, cfg)?;
        learner.loss_and_grad(&adapted, &e.task, &e.query)
    });

    let mut total = GradMap::new();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l.as_f64();
        add_scaled(&mut total, g, T::one());
    }
    let n = T::from_usize(episodes.len()).expect("episode count fits");
    for g in total.values_mut() {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    adam_step(params, &total, adam, cfg.outer_lr)?;
    Ok(StepMetrics {
        loss: loss / episodes.len() as f64,
    })
}

/// Mixed-source loss (mean over instances, each through its own head) and
/// its gradient. Groups are `(task, items)`.
pub fn mixed_loss_and_grad<T: Scalar, L: Learner<T>>(
    learner: &L,
    params: &ParamSet<T>,
    groups: &[(String, Vec<L::Item>)],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, GradMap<T>)> {
    let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return Err(Error::Config("transfer step needs at least one instance".into()));
    }
    let results = ordered_map(pool, groups, |(task, items)| learner.loss_and_grad(params, task, items));
    let mut grad = GradMap::new();
    let mut loss = 0.0;
    for ((_, items), r) in groups.iter().zip(results) {
        let (l, g) = r?;
        let w = items.len() as f64 / total as f64;
        loss += w * l.as_f64();
        add_scaled(&mut grad, g, T::from_f64_lossy(w));
    }
    Ok((loss, grad))
}

/// One Adam step on the mixed-source loss.
pub fn transfer_train_step<T: Scalar, L: Learner<T>>(
    learner: &L,
    params: &mut ParamSet<T>,
    adam: &mut AdamState<T>,
    groups: &[(String, Vec<L::Item>)],
    lr: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepMetrics> {
    let (loss, grad) = mixed_loss_and_grad(learner, params, groups, pool)?;
    adam_step(params, &grad, adam, lr)?;
    Ok(StepMetrics { loss })
}

const AUG_KEY: u64 = 0xa06;
const SAMPLER_KEY: u64 = 0x5a3;
const HEAD_KEY: u64 = 0x4ead;

/// Everything a training loop needs besides its own hyperparameters.
pub struct TrainSetup<'a, T> {
    pub net: UNet,
    pub meta: &'a MetaDataset<T>,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub workers: usize,
}

impl<T: Scalar> TrainSetup<'_, T> {
    fn pool(&self) -> Result<Option<rayon::ThreadPool>> {
        if self.workers <= 1 {
            return Ok(None);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map(Some)
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))
    }

    fn sampler_cfg(&self) -> SamplerConfig {
        SamplerConfig {
            seed: rng::mix(self.seed, &[SAMPLER_KEY, self.sampler.seed]),
            ..self.sampler.clone()
        }
    }

    /// Augmented copies of `indices` of `task`; slot `k` uses its own stream.
    fn materialize(&self, task: &str, indices: &[usize], keys: &[u64]) -> Result<Vec<Sample<T>>> {
        let src = self.meta.source(task)?;
        indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut path = vec![AUG_KEY];
                path.extend_from_slice(keys);
                path.push(k as u64);
                augment(&src.samples[i], &self.augment, &mut rng::stream(self.seed, &path))
            })
            .collect()
    }
}

/// Meta-trains `params` with first-order MAML; `on_step(iter, loss, params)`
/// runs after every update.
pub fn train_maml<T: Scalar>(
    setup: &TrainSetup<'_, T>,
    params: &mut ParamSet<T>,
    dist: TaskDistribution,
    cfg: &MamlConfig,
    mut on_step: impl FnMut(usize, f64, &ParamSet<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    setup.augment.validate()?;
    let pool = setup.pool()?;
    let loader = episode_loader(setup.meta, dist, &setup.sampler_cfg())?;
    let mut adam = AdamState::new();
    for it in 0..cfg.max_iters {
        let batch = loader.batch(it as u64)?;
        let episodes = batch
            .iter()
            .enumerate()
            .map(|(e, ep)| {
                let key = [it as u64, e as u64];
                Ok(TaskEpisode {
                    task: ep.task_id.clone(),
                    support: setup.materialize(&ep.task_id, &ep.support, &[key[0], key[1], 0])?,
                    query: setup.materialize(&ep.task_id, &ep.query, &[key[0], key[1], 1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = maml_outer_step(&setup.net, params, &mut adam, &episodes, cfg, pool.as_ref())?;
        on_step(it, m.loss, params)?;
    }
    Ok(())
}

/// Instance-level training over truncation-balanced mixed batches.
pub fn train_transfer<T: Scalar>(
    setup: &TrainSetup<'_, T>,
    params: &mut ParamSet<T>,
    cfg: &TransferConfig,
    mut on_step: impl FnMut(usize, f64, &ParamSet<T>) -> Result<()>,
) -> Result<()> {
    check_rate("transfer.lr", cfg.lr)?;
    setup.augment.validate()?;
    let pool = setup.pool()?;
    let mut loader = batch_loader(setup.meta, &setup.sampler_cfg())?;
    let mut adam = AdamState::new();
    for it in 0..cfg.max_iters {
        let batch = loader.next().expect("batch loader is infinite");
        let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for r in &batch {
            by_source.entry(r.source).or_default().push(r.sample);
        }
        let groups = by_source
            .into_iter()
            .map(|(si, idx)| {
                let id = setup.meta.sources[si].id.clone();
                let items = setup.materialize(&id, &idx, &[it as u64, si as u64])?;
                Ok((id, items))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = transfer_train_step(&setup.net, params, &mut adam, &groups, cfg.lr, pool.as_ref())?;
        on_step(it, m.loss, params)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RefineOutcome<T> {
    pub params: ParamSet<T>,
    pub miou: f64,
    pub losses: Vec<f64>,
}

/// Attaches a fresh head for `task`, fine-tunes on its train split and
/// scores mIoU on its test split. `setup.meta` must contain `task`.
pub fn refine_on_new_task<T: Scalar>(
    setup: &TrainSetup<'_, T>,
    pretrained: &ParamSet<T>,
    task: &TaskSource<T>,
    cfg: &RefineConfig,
) -> Result<RefineOutcome<T>> {
    check_rate("refine.lr", cfg.lr)?;
    setup.augment.validate()?;
    let mut params = setup
        .net
        .attach_head(pretrained, &task.id, task.num_classes, &InitSpec::new(rng::mix(setup.seed, &[HEAD_KEY, cfg.init_seed])))?;
    let single = setup.meta.subset(std::slice::from_ref(&task.id))?;
    let sub = TrainSetup {
        net: setup.net,
        meta: &single,
        sampler: setup.sampler.clone(),
        augment: setup.augment.clone(),
        seed: setup.seed,
        workers: 1,
    };
    let mut loader = batch_loader(&single, &sub.sampler_cfg())?;
    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let batch = loader.next().expect("batch loader is infinite");
        let idx: Vec<usize> = batch.iter().map(|r| r.sample).collect();
        let items = sub.materialize(&task.id, &idx, &[it as u64])?;
        let (loss, mut grad) = setup.net.loss_and_grad(&params, &task.id, &items)?;
        if cfg.which_params == WhichParams::HeadOnly {
            grad.retain(|name, _| is_head_param(name, &task.id));
        }
        adam_step(&mut params, &grad, &mut adam, cfg.lr)?;
        losses.push(loss.as_f64());
    }
    let test = &single.split(&task.id)?.test;
    let miou = evaluate_task(&setup.net, &params, task, test)?;
    Ok(RefineOutcome { params, miou, losses })
}
