//! Mini U-Net backbone with one 1×1-convolution head per task.
//!
//! The forward pass is functional: parameters come in as a [`ParamSet`]
//! argument, so base weights and any number of adapted copies can be
//! evaluated side by side.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax_classes, Graph, IntMask, NodeId, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of 2× downsampling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "depth, base_channels and in_channels must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count of the features the heads read.
    pub fn feature_channels(&self) -> usize {
        self.base_channels
    }
}

/// Fan-in scaled uniform weights (`±sqrt(6 / fan_in)`), zero biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        InitSpec { seed }
    }

    /// Each tensor draws from its own stream keyed by name, so adding a head
    /// never perturbs the initialization of anything else.
    fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        if shape.len() == 1 {
            return Tensor::zeros(shape);
        }
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(self.seed, &[rng::key_of(name)]);
        Tensor::from_fn(shape, |_| T::from_f64_lossy(r.random_range(-bound..bound)))
    }
}

fn conv_names(prefix: &str) -> [(String, String); 2] {
    [1, 2].map(|i| {
        (
            format!("{BACKBONE_PREFIX}{prefix}.conv{i}.weight"),
            format!("{BACKBONE_PREFIX}{prefix}.conv{i}.bias"),
        )
    })
}

pub fn head_weight_name(task: &str) -> String {
    format!("{HEAD_PREFIX}{task}.weight")
}

pub fn head_bias_name(task: &str) -> String {
    format!("{HEAD_PREFIX}{task}.bias")
}

pub fn is_head_param(name: &str, task: &str) -> bool {
    name == head_weight_name(task) || name == head_bias_name(task)
}

/// Registered heads and their class counts.
pub fn heads<T: Scalar>(params: &ParamSet<T>) -> BTreeMap<String, usize> {
    params
        .iter()
        .filter_map(|(name, t)| {
            let task = name.strip_prefix(HEAD_PREFIX)?.strip_suffix(".weight")?;
            Some((task.to_string(), t.shape()[0]))
        })
        .collect()
}

fn validate_task_id(task: &str) -> Result<()> {
    if task.is_empty() || task.chars().any(|c| c.is_whitespace() || c == '/') {
        return Err(Error::Config(format!("invalid task id {task:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNet {
    pub config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(UNet { config })
    }

    /// `(prefix, in_channels, out_channels)` of every two-conv block, in
    /// forward order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let c = &self.config;
        let mut out = Vec::new();
        let mut cin = c.in_channels;
        for level in 0..c.depth {
            out.push((format!("enc{level}"), cin, c.channels_at(level)));
            cin = c.channels_at(level);
        }
        out.push(("mid".to_string(), cin, c.channels_at(c.depth)));
        for level in (0..c.depth).rev() {
            let up = c.channels_at(level + 1);
            let skip = c.channels_at(level);
            out.push((format!("dec{level}"), up + skip, skip));
        }
        out
    }

    /// Fresh parameters with one head per `(task_id, num_classes)`.
    pub fn build<T: Scalar>(&self, tasks: &[(String, usize)], init: &InitSpec) -> Result<ParamSet<T>> {
        let mut params = ParamSet::new();
        for (prefix, cin, cout) in self.blocks() {
            let [(w1, b1), (w2, b2)] = conv_names(&prefix);
            params.insert(w1.clone(), init.tensor(&w1, &[cout, cin, 3, 3]));
            params.insert(b1.clone(), init.tensor(&b1, &[cout]));
            params.insert(w2.clone(), init.tensor(&w2, &[cout, cout, 3, 3]));
            params.insert(b2.clone(), init.tensor(&b2, &[cout]));
        }
        for (task, k) in tasks {
            self.add_head(&mut params, task, *k, init)?;
        }
        Ok(params)
    }

    fn add_head<T: Scalar>(&self, params: &mut ParamSet<T>, task: &str, k: usize, init: &InitSpec) -> Result<()> {
        validate_task_id(task)?;
        if !(2..=256).contains(&k) {
            return Err(Error::Config(format!("task {task}: class count {k} outside 2..=256")));
        }
        let wn = head_weight_name(task);
        if params.contains(&wn) {
            return Err(Error::Config(format!("duplicate task id {task:?}")));
        }
        let bn = head_bias_name(task);
        let feat = self.config.feature_channels();
        params.insert(wn.clone(), init.tensor(&wn, &[k, feat, 1, 1]));
        params.insert(bn.clone(), init.tensor(&bn, &[k]));
        Ok(())
    }

    /// A copy of `params` with a freshly initialized head for `task`.
    pub fn attach_head<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        task: &str,
        k: usize,
        init: &InitSpec,
    ) -> Result<ParamSet<T>> {
        let mut out = params.clone();
        self.add_head(&mut out, task, k, init)?;
        Ok(out)
    }

    /// Names of the backbone parameters plus the given task's head.
    pub fn routed_params<'a, T: Scalar>(&self, params: &'a ParamSet<T>, task: &str) -> impl Iterator<Item = &'a str> {
        let task = task.to_string();
        params
            .names()
            .filter(move |n| n.starts_with(BACKBONE_PREFIX) || is_head_param(n, &task))
    }

    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("H={h}, W={w} must be divisible by {m} for depth {}", self.config.depth),
            ));
        }
        Ok(())
    }

    fn block<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (wn, bn) in conv_names(prefix) {
            let w = g.param_from(params, &wn)?;
            let b = g.param_from(params, &bn)?;
            let c = g.conv2d(h, w, b)?;
            h = g.relu(c)?;
        }
        Ok(h)
    }

    /// Records the forward pass for `task` on `[B,C,H,W]` images and returns
    /// the logits node `[B,K_task,H,W]`. Only the backbone and this task's
    /// head enter the graph.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        task: &str,
        images: Tensor<T>,
    ) -> Result<NodeId> {
        let wn = head_weight_name(task);
        if !params.contains(&wn) {
            return Err(Error::Routing(task.to_string()));
        }
        let [_, c, h, w] = images.dims4("model_forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "model_forward",
                format!("expected {} input channels, got {c}", self.config.in_channels),
            ));
        }
        self.check_input_dims(h, w)?;

        let mut x = g.input(images);
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in 0..self.config.depth {
            let f = self.block(g, params, &format!("enc{level}"), x)?;
            skips.push(f);
            x = g.maxpool2(f)?;
        }
        x = self.block(g, params, "mid", x)?;
        for level in (0..self.config.depth).rev() {
            let up = g.upsample2(x)?;
            let cat = g.concat_channels(up, skips[level])?;
            x = self.block(g, params, &format!("dec{level}"), cat)?;
        }
        let hw = g.param_from(params, &wn)?;
        let hb = g.param_from(params, &head_bias_name(task))?;
        g.conv2d(x, hw, hb)
    }

    /// Logits without keeping a graph around.
    pub fn logits<T: Scalar>(&self, params: &ParamSet<T>, task: &str, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, task, images)?;
        Ok(g.value(out).clone())
    }

    /// Per-pixel argmax predictions `[B,H,W]`.
    pub fn predict<T: Scalar>(&self, params: &ParamSet<T>, task: &str, images: Tensor<T>) -> Result<IntMask> {
        argmax_classes(&self.logits(params, task, images)?)
    }
}

/// Logits of `task` for `[B,C,H,W]` images.
pub fn model_forward<T: Scalar>(
    cfg: &UNetConfig,
    params: &ParamSet<T>,
    task: &str,
    images: Tensor<T>,
) -> Result<Tensor<T>> {
    UNet::new(*cfg)?.logits(params, task, images)
}
