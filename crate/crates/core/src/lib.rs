//! Multimodal multi-task learning on a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up: [`graph`] and [`params`] form the
//! differentiation core, [`attention`], [`encoders`] and [`dbscme`] build the
//! network, [`afd`] holds the adaptive feature-decoupled loss, [`synth`] the
//! synthetic benchmark, and [`train`] ties them into a training loop.

pub mod afd;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dbscme;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
