//! colorgs: a desk-scale differentiable colored-Gaussian-splatting engine
//! that reconstructs deforming 3D scenes from posed color+depth+mask frame
//! sequences.
//!
//! The pipeline: a canonical Gaussian scene ([`scene`]) is deformed to a
//! timestamp by a per-attribute basis-function field ([`deform`]), projected
//! through a pinhole camera ([`camera`]), and alpha-composited front to back
//! with spatially adaptive anchor colors ([`color`], [`render`]). Analytic
//! reverse-mode gradients ([`grad`]) drive an Adam trainer with
//! densification ([`train`]); [`dataset`] handles frame I/O and synthetic
//! scenes and [`metrics`] the masked PSNR/SSIM evaluation.
//!
//! See the crate examples for runnable entry points per capability; the
//! `colorgs` binary wraps the same calls behind `synth`, `train`, `render`,
//! `eval` and `gradcheck` subcommands.

pub mod camera;
pub mod color;
pub mod dataset;
pub mod deform;
pub mod error;
pub mod grad;
pub mod img;
pub mod io;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

/// Engine version recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
