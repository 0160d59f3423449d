//! Few-shot class-incremental learning on top of a frozen feature extractor.
//!
//! The pipeline calibrates few-shot novel-class prototypes by retrieving
//! attribute knowledge from base classes ([`mpc`]), replays every seen class
//! through Gaussian prototype augmentation ([`augment`]), re-synthesizes a
//! simplex equiangular target structure every session with minimal change
//! to the previous one ([`geometry`]), and trains a small projector to align
//! features with that structure ([`projector`]). [`session`] drives the base
//! and incremental sessions; [`eval`] scores them.

pub mod attributes;
pub mod augment;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mpc;
pub mod optim;
pub mod projector;
pub mod rng;
pub mod session;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
