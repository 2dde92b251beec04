//! Boundary-weighted domain adaptation for volumetric segmentation.
//!
//! This crate implements the full desk-scale stack for adapting a 3-D
//! segmentation network from a source imaging domain to a target domain:
//!
//! - [`volume`] / [`metaimage`] — volume geometry, resampling, normalization
//!   and MetaImage I/O,
//! - [`boundary`] — boundary extraction, contour weight maps and exact
//!   Euclidean distance maps,
//! - [`losses`] — boundary-weighted segmentation and adversarial losses with
//!   analytic gradients,
//! - [`tensor`] / [`net`] — a reverse-mode tape over dense 5-D tensors and the
//!   segmentation / discriminator networks built on it,
//! - [`pipeline`] — cropping, augmentation and sliding-window inference,
//! - [`trainer`] — SGD, the adversarial adaptation protocol and the strategy
//!   harness,
//! - [`metrics`] — overlap / surface-distance metrics and the paired t-test,
//! - [`phantom`] — the synthetic two-domain phantom generator.
//!
//! Everything is deterministic: a run is a pure function of its experiment
//! spec and seed, and repeated runs produce byte-identical artifacts.

pub mod boundary;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metaimage;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
