//! Dense-tensor engine with reverse-mode automatic differentiation,
//! optimizer math, and checkpoint serialization.
//!
//! The graph is an append-only tape of 2-D nodes (scalars are 1x1, vectors
//! 1xN). Values are computed eagerly as ops are appended; `backward` walks
//! the tape once in reverse. Exactly the operations the models need are
//! provided, nothing more.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: ({},{}) vs ({},{})", lhs.0, lhs.1, rhs.0, rhs.1)]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub use graph::{Graph, Shape, TensorId};
pub use optim::{clip_global_norm, cosine_lr, AdamW, EmaState};
pub use params::{GradStore, Init, ParamId, ParamStore};
