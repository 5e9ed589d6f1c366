use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use super::kernels::{self, ConvGeom};
use super::{IntMask, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    SoftmaxCe {
        logits: NodeId,
        target: IntMask,
        probs: Vec<T>,
    },
    Sum(NodeId),
    /// `Σ cᵢ·xᵢ` against a constant tensor of the same shape.
    WeightedSum(NodeId, Tensor<T>),
    /// Weighted sum of scalar nodes.
    Combine(Vec<(NodeId, T)>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// True when some parameter is upstream of this node.
    tracks_params: bool,
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Record of one forward evaluation. Nodes are appended in evaluation order,
/// so ids are already a topological order; backward walks them in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, tracks_params: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            tracks_params,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Contract(format!("node {} not in graph", id.0)))
    }

    fn tracks(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracks_params)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of every parameter registered in this evaluation.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// A named leaf that receives a gradient. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param, value.clone(), true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Looks a parameter up in `params` and registers it.
    pub fn param_from(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        let t = params.get(name)?;
        Ok(self.param(name, t))
    }

    /// Stride-1 "same" cross-correlation with odd kernels.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let geom = {
            let x = &self.node(input)?.value;
            let wt = &self.node(weight)?.value;
            let bs = &self.node(bias)?.value;
            conv_geom(x, wt, bs)?
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(vec![geom.batch, geom.cout, geom.h, geom.w], out)?;
        out.ensure_finite("conv2d")?;
        let tracks = self.tracks(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            out,
            tracks,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.node(x)?.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let tracks = self.tracks(&[x]);
        Ok(self.push(Op::Relu(x), out, tracks))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.node(x)?.value;
        let [b, c, h, w] = v.dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial dims must be even, got H={h} W={w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward([b, c, h, w], v.data());
        let out = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        let tracks = self.tracks(&[x]);
        Ok(self.push(Op::MaxPool2 { input: x, argmax }, out, tracks))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.node(x)?.value;
        let [b, c, h, w] = v.dims4("upsample2")?;
        let out = Tensor::new(
            vec![b, c, 2 * h, 2 * w],
            kernels::upsample2_forward([b, c, h, w], v.data()),
        )?;
        let tracks = self.tracks(&[x]);
        Ok(self.push(Op::Upsample2(x), out, tracks))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, c1, ha, wa] = self.node(a)?.value.dims4("concat_channels")?;
        let [bb, c2, hb, wb] = self.node(b)?.value.dims4("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("(B,H,W) mismatch: ({ba},{ha},{wa}) vs ({bb},{hb},{wb})"),
            ));
        }
        let out = kernels::concat_forward(
            ba,
            ha * wa,
            c1,
            self.value(a).data(),
            c2,
            self.value(b).data(),
        );
        let out = Tensor::new(vec![ba, c1 + c2, ha, wa], out)?;
        let tracks = self.tracks(&[a, b]);
        Ok(self.push(Op::Concat(a, b), out, tracks))
    }

    /// Mean pixelwise softmax cross-entropy of `[B,K,H,W]` logits against a
    /// `[B,H,W]` class mask.
    pub fn softmax_ce(&mut self, logits: NodeId, target: &IntMask) -> Result<NodeId> {
        let v = &self.node(logits)?.value;
        let [b, k, h, w] = v.dims4("softmax_ce")?;
        if target.shape() != [b, h, w] {
            return Err(Error::shape(
                "softmax_ce",
                format!(
                    "target shape {:?} does not match logits (B,H,W)=({b},{h},{w})",
                    target.shape()
                ),
            ));
        }
        if let Some(pos) = target.data().iter().position(|&t| t as usize >= k) {
            let (bi, rem) = (pos / (h * w), pos % (h * w));
            return Err(Error::LabelRange {
                detail: format!(
                    "target {} at (b={bi}, y={}, x={}) but only {k} classes",
                    target.data()[pos],
                    rem / w,
                    rem % w
                ),
            });
        }
        let (loss, probs) = kernels::softmax_ce_forward([b, k, h, w], v.data(), target.data());
        let out = Tensor::scalar(loss);
        out.ensure_finite("softmax_ce")?;
        let tracks = self.tracks(&[logits]);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                target: target.clone(),
                probs,
            },
            out,
            tracks,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self
            .node(x)?
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        let out = Tensor::scalar(s);
        out.ensure_finite("sum")?;
        let tracks = self.tracks(&[x]);
        Ok(self.push(Op::Sum(x), out, tracks))
    }

    /// Scalar `Σ cᵢ·xᵢ` for a constant `c` shaped like `x`.
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Tensor<T>) -> Result<NodeId> {
        let v = &self.node(x)?.value;
        if v.shape() != coeffs.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs coefficients {:?}", v.shape(), coeffs.shape()),
            ));
        }
        let s = v
            .data()
            .iter()
            .zip(coeffs.data())
            .fold(T::zero(), |a, (&p, &q)| a + p * q);
        let out = Tensor::scalar(s);
        out.ensure_finite("weighted_sum")?;
        let tracks = self.tracks(&[x]);
        Ok(self.push(Op::WeightedSum(x, coeffs), out, tracks))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, in the given order.
    pub fn combine(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Contract("combine of zero terms".into()));
        }
        let mut acc = T::zero();
        for &(id, wt) in terms {
            acc += self.node(id)?.value.item()? * wt;
        }
        let out = Tensor::scalar(acc);
        out.ensure_finite("combine")?;
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let tracks = self.tracks(&ids);
        Ok(self.push(Op::Combine(terms.to_vec()), out, tracks))
    }

    /// Gradients of the scalar `root` with respect to every registered
    /// parameter.
    pub fn backward_all(&self, root: NodeId) -> Result<GradMap<T>> {
        let names: BTreeSet<String> = self.params.keys().cloned().collect();
        self.backward(root, &names)
    }

    /// Reverse-mode gradients of the scalar `root` for the parameters in `wrt`.
    pub fn backward(&self, root: NodeId, wrt: &BTreeSet<String>) -> Result<GradMap<T>> {
        let root_val = &self.node(root)?.value;
        if !root_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        for name in wrt {
            if !self.params.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracks_params {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let wt = self.value(*weight);
                    let geom = conv_geom(x, wt, self.value(*bias))?;
                    let want_input = self.nodes[input.0].tracks_params;
                    let cg = kernels::conv2d_backward(&geom, x.data(), wt.data(), &g, want_input);
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gi = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, gi);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut gi = vec![T::zero(); self.value(*input).numel()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gi[src] += gv;
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Upsample2(x) => {
                    let dims = self.value(*x).dims4("upsample2")?;
                    accumulate(&mut grads, *x, kernels::upsample2_backward(dims, &g));
                }
                Op::Concat(a, b) => {
                    let [bsz, c1, h, w] = self.value(*a).dims4("concat_channels")?;
                    let c2 = self.value(*b).shape()[1];
                    let (ga, gb) = kernels::concat_backward(bsz, h * w, c1, c2, &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let dims = self.value(*logits).dims4("softmax_ce")?;
                    let gi = kernels::softmax_ce_backward(dims, probs, target.data(), g[0]);
                    accumulate(&mut grads, *logits, gi);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::WeightedSum(x, coeffs) => {
                    let gi = coeffs.data().iter().map(|&c| c * g[0]).collect();
                    accumulate(&mut grads, *x, gi);
                }
                Op::Combine(terms) => {
                    for &(id, wt) in terms {
                        accumulate(&mut grads, id, vec![g[0] * wt]);
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for name in wrt {
            let id = self.params[name];
            let shape = self.value(id).shape().to_vec();
            let data = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); self.value(id).numel()]);
            let t = Tensor::new(shape, data)?;
            t.ensure_finite("backward")?;
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    /// Fingerprint of every piecewise-linear branch taken during the forward
    /// pass (relu signs, maxpool winners). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        h.write_u8((v > T::zero()) as u8);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    for &a in argmax {
                        h.write_usize(a);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<ConvGeom> {
    let [batch, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has Cin={cin} but weight expects Cin={wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be odd, got kh={kh} kw={kw}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} but Cout={cout}", b.shape()),
        ));
    }
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        h,
        w: wd,
        kh,
        kw,
    })
}
