//! Slice-wise dynamic inference for volumetric segmentation.
//!
//! The pipeline routes each 2D slice of a multi-modal volume through one of
//! three paths — skip, crop, or whole-image — then segments it with a small
//! U-Net whose stages are dynamically quantized to per-slice bit widths.
//! Routing, crop placement, and bit selection are trained jointly against a
//! Dice + compute-cost objective; everything runs on a self-contained
//! reverse-mode autodiff core over synthetic volumes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod driver;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use tensor::{Scalar, Tensor};
