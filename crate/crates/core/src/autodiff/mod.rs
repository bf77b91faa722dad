//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything runs in `f64`. Models register their weights in a
//! [`ParamStore`], record each forward pass on a fresh [`Tape`], call
//! [`Tape::backward`] and hand the resulting [`ParamGrads`] to
//! [`AdamState::step`].

mod checkpoint;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{
    apply_checkpoint, checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, CheckpointError,
};
pub use optim::{AdamConfig, AdamState};
pub use params::{Init, ParamGrads, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of bounds for length {bound}")]
    IndexOutOfBounds { index: usize, bound: usize },
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
}
