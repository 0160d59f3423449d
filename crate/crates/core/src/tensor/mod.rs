//! Dense linear algebra, compact SVD and a small reverse-mode tape.

mod matrix;
pub mod svd;
pub mod tape;

pub use matrix::{cosine, dot, norm, normalized, Matrix};
pub use svd::{svd_compact, Svd};
pub use tape::{grad_check, sigmoid, softplus, Gradients, NodeId, Tape};
