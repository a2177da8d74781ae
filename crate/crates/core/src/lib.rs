//! Feature-similarity adversarial attacks on semantic segmentation models.
//!
//! The crate is organized around five subsystems:
//!
//! - [`featsim`]: pure numeric kernels for feature-similarity losses — pixel
//!   normalization, cosine Gram matrices, binarized similarity masks, the
//!   external/internal similarity losses and their analytic gradients.
//! - [`attack`]: the iterative attack engine (FGSM, PGD, FSPGD) with random
//!   initialization, sign-gradient steps and L∞-ball projection.
//! - [`adapter`]: a uniform model interface (forward, intermediate-feature
//!   capture, input gradients), a layer registry, and two bundled desk-scale
//!   CNN segmentation models.
//! - [`eval`]: confusion/mIoU metrics, source→target transfer matrices,
//!   ablation sweeps and feature-similarity maps.
//! - [`data`]: dataset manifests, a deterministic synthetic-shapes generator
//!   and a trainer for the bundled models.
//!
//! All randomness is derived from explicit seeds; identical inputs produce
//! identical outputs regardless of worker count.

pub mod adapter;
pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod featsim;
pub mod render;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, LabelMap};
pub use util::derive_seed;
