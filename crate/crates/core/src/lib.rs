//! C-DLinkNet human parsing at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense NCHW tensors, a recording tape for reverse-mode
//!   differentiation and the primitive operations the network is built from.
//! - [`model`]: the encoder / ASPP / decoder / Smooth / Refiner graph and its
//!   deep-supervision loss.
//! - [`data`]: netpbm I/O, the synthetic humanoid generator, the LIP-style
//!   directory index and the augmentation pipeline.
//! - [`trainer`]: poly learning-rate schedule, momentum SGD, the training loop
//!   and the checkpoint format.
//! - [`evaluator`]: confusion matrices, segmentation metrics, flip test-time
//!   augmentation and the ablation runner.
//! - [`gradsuite`]: finite-difference checks of every primitive and of the
//!   whole network.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradsuite;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
