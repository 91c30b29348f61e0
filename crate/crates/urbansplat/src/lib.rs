//! Desk-scale urban scene reconstruction from posed RGB and estimated depth.
//!
//! The pieces, bottom up: [`geom`] holds cameras and image-grid types,
//! [`splat`] renders anisotropic Gaussians with analytic gradients, and
//! everything above combines them into dense initialization with progressive
//! pruning, joint scene/depth optimization with a confidence-gated depth
//! refiner, planar road regularization, and the evaluation stack.
//!
//! Start with the `examples/` directory; each example exercises one major
//! capability end to end on synthetic scenes.

pub mod dataset;
pub mod enhancer;
pub mod error;
pub mod evaluate;
pub mod geom;
pub mod init;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod synth;
pub mod train;
pub mod splat;

pub use error::{Error, Result};
