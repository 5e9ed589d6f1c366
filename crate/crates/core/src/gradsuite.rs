//! Finite-difference checks for every differentiable operation and for a
//! small end-to-end U-Net. Shared by the test suite and `metaseg gradcheck`.

use rand::Rng as _;

use crate::error::Result;
use crate::params::ParamSet;
use crate::rng;
use crate::segnet::{InitSpec, UNet, UNetConfig};
use crate::tensor::{grad_check, GradCheckReport, Graph, IntMask, NodeId, Probe, Tensor};

pub const EPS: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Conv3x3,
    Conv1x1,
    Relu,
    MaxPool2,
    Upsample2,
    Concat,
    SoftmaxCe,
    ConvReluPoolCe,
    UNetDepth2,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::Conv3x3,
        Check::Conv1x1,
        Check::Relu,
        Check::MaxPool2,
        Check::Upsample2,
        Check::Concat,
        Check::SoftmaxCe,
        Check::ConvReluPoolCe,
        Check::UNetDepth2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv3x3 => "conv2d_3x3",
            Check::Conv1x1 => "conv2d_1x1",
            Check::Relu => "relu",
            Check::MaxPool2 => "maxpool2",
            Check::Upsample2 => "upsample2",
            Check::Concat => "concat_channels",
            Check::SoftmaxCe => "softmax_ce",
            Check::ConvReluPoolCe => "conv_relu_pool_ce",
            Check::UNetDepth2 => "unet_depth2_base4_8x8",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub check: Check,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn uniform(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn random_mask(r: &mut rng::Rng, shape: &[usize], k: usize) -> IntMask {
    let n = shape.iter().product();
    IntMask::new(shape.to_vec(), (0..n).map(|_| r.random_range(0..k) as u8).collect())
        .expect("shape matches")
}

/// Builds the point and evaluates the check's scalar function on it.
fn run_one(check: Check, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, &[rng::key_of(check.name())]);
    let mut point = ParamSet::<f64>::new();

    // Reads a weighted sum of `out` with fixed random coefficients.
    let probe_coeffs = |r: &mut rng::Rng, shape: &[usize]| uniform(r, shape, -1.0, 1.0);

    match check {
        Check::Conv3x3 | Check::Conv1x1 => {
            let k = if check == Check::Conv3x3 { 3 } else { 1 };
            point.insert("x", uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0));
            point.insert("w", uniform(&mut r, &[4, 3, k, k], -0.5, 0.5));
            point.insert("b", uniform(&mut r, &[4], -0.5, 0.5));
            let c = probe_coeffs(&mut r, &[2, 4, 5, 6]);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let x = g.param_from(p, "x")?;
                        let w = g.param_from(p, "w")?;
                        let b = g.param_from(p, "b")?;
                        let y = g.conv2d(x, w, b)?;
                        g.weighted_sum(y, c.clone())
                    })
                },
                &point,
                EPS,
            )
        }
        Check::Relu => {
            point.insert("x", uniform(&mut r, &[3, 7], -1.0, 1.0));
            let c = probe_coeffs(&mut r, &[3, 7]);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let x = g.param_from(p, "x")?;
                        let y = g.relu(x)?;
                        g.weighted_sum(y, c.clone())
                    })
                },
                &point,
                EPS,
            )
        }
        Check::MaxPool2 => {
            point.insert("x", uniform(&mut r, &[2, 2, 4, 6], -1.0, 1.0));
            let c = probe_coeffs(&mut r, &[2, 2, 2, 3]);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let x = g.param_from(p, "x")?;
                        let y = g.maxpool2(x)?;
                        g.weighted_sum(y, c.clone())
                    })
                },
                &point,
                EPS,
            )
        }
        Check::Upsample2 => {
            point.insert("x", uniform(&mut r, &[2, 2, 3, 2], -1.0, 1.0));
            let c = probe_coeffs(&mut r, &[2, 2, 6, 4]);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let x = g.param_from(p, "x")?;
                        let y = g.upsample2(x)?;
                        g.weighted_sum(y, c.clone())
                    })
                },
                &point,
                EPS,
            )
        }
        Check::Concat => {
            point.insert("a", uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0));
            point.insert("b", uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0));
            let c = probe_coeffs(&mut r, &[2, 5, 3, 3]);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let a = g.param_from(p, "a")?;
                        let b = g.param_from(p, "b")?;
                        let y = g.concat_channels(a, b)?;
                        g.weighted_sum(y, c.clone())
                    })
                },
                &point,
                EPS,
            )
        }
        Check::SoftmaxCe => {
            point.insert("z", uniform(&mut r, &[2, 4, 3, 3], -3.0, 3.0));
            let t = random_mask(&mut r, &[2, 3, 3], 4);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let z = g.param_from(p, "z")?;
                        g.softmax_ce(z, &t)
                    })
                },
                &point,
                EPS,
            )
        }
        Check::ConvReluPoolCe => {
            point.insert("w", uniform(&mut r, &[3, 2, 3, 3], -0.8, 0.8));
            point.insert("b", uniform(&mut r, &[3], -0.2, 0.2));
            let x = uniform(&mut r, &[2, 2, 4, 4], 0.0, 1.0);
            let t = random_mask(&mut r, &[2, 2, 2], 3);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let xi = g.input(x.clone());
                        let w = g.param_from(p, "w")?;
                        let b = g.param_from(p, "b")?;
                        let c = g.conv2d(xi, w, b)?;
                        let a = g.relu(c)?;
                        let m = g.maxpool2(a)?;
                        g.softmax_ce(m, &t)
                    })
                },
                &point,
                EPS,
            )
        }
        Check::UNetDepth2 => {
            let net = UNet::new(UNetConfig {
                depth: 2,
                base_channels: 4,
                in_channels: 3,
            })?;
            let point: ParamSet<f64> = net.build(&[("t".to_string(), 3)], &InitSpec::new(seed))?;
            let x = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
            let t = random_mask(&mut r, &[1, 8, 8], 3);
            grad_check(
                |p, want| {
                    evaluate(p, want, |g, p| {
                        let logits = net.forward(g, p, "t", x.clone())?;
                        g.softmax_ce(logits, &t)
                    })
                },
                &point,
                EPS,
            )
        }
    }
}

fn evaluate(
    p: &ParamSet<f64>,
    want: bool,
    build: impl FnOnce(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
) -> Result<Probe<f64>> {
    let mut g = Graph::new();
    let root = build(&mut g, p)?;
    Ok(Probe {
        value: g.value(root).item()?,
        signature: g.branch_signature(),
        grads: if want { Some(g.backward_all(root)?) } else { None },
    })
}

/// Runs `checks` over `seeds`.
pub fn run(checks: &[Check], seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for &check in checks {
        for seed in seeds.clone() {
            out.push(Outcome {
                check,
                seed,
                report: run_one(check, seed)?,
            });
        }
    }
    Ok(out)
}
