//! Meta-learning and instance-based transfer learning for multi-task semantic
//! segmentation.
//!
//! The crate is generic over the floating-point type (see [`Scalar`]); the
//! aliases at the bottom of this file pin the two supported precisions.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod matrix;
pub mod metatrain;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod segnet;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::{GradMap, Graph, IntMask, NodeId, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
