//! What the trainer and evaluator need from a forecasting model.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{ParamStore, SeededRng, Tape, Tensor, TensorError, Var};
use crate::config::{ConfigError, KvConfig};
use crate::graph::{ForecastPair, StructuralTargets, WindowGraph};
use crate::preprocess::{OheSchema, Window};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask selected no rows during training")]
    EmptyMask,
    #[error("kernel {kernel} exceeds sequence length {length}")]
    KernelTooLarge { kernel: usize, length: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("input does not fit the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gnn,
    DLinear,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [Self::Gnn, Self::DLinear, Self::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gnn => "gnn",
            Self::DLinear => "dlinear",
            Self::Lstm => "lstm",
        }
    }

    /// Micro-batches per optimizer step.
    pub fn default_grad_accumulation(self) -> usize {
        match self {
            Self::Gnn => 2,
            Self::DLinear | Self::Lstm => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gnn" => Ok(Self::Gnn),
            "dlinear" => Ok(Self::DLinear),
            "lstm" => Ok(Self::Lstm),
            other => Err(ModelError::InvalidHyper(format!("unknown model `{other}`"))),
        }
    }
}

/// One forecasting example: the current window (as graph and as raw flows)
/// and the next window whose flows are to be predicted.
#[derive(Debug, Clone)]
pub struct Example {
    pub current: Arc<WindowGraph>,
    pub next: Arc<WindowGraph>,
    pub current_window: Arc<Window>,
    pub targets: Arc<StructuralTargets>,
}

impl Example {
    pub fn new(current: Arc<WindowGraph>, next: Arc<WindowGraph>, current_window: Arc<Window>) -> Self {
        let targets = Arc::new(crate::graph::graph_targets(&next));
        Self {
            current,
            next,
            current_window,
            targets,
        }
    }

    pub fn pair(&self) -> ForecastPair {
        ForecastPair {
            current: Arc::clone(&self.current),
            next: Arc::clone(&self.next),
        }
    }

    pub fn len(&self) -> usize {
        self.next.n_conns()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_numerics(&self) -> usize {
        self.next.conn_width() - OheSchema::N_PROTOCOL
    }

    /// Normalized numerics of the next window (`L × F`).
    pub fn next_numerics(&self) -> Tensor {
        numeric_columns(&self.next.conn_features, self.n_numerics())
    }
}

/// First `f` columns of a matrix.
pub fn numeric_columns(t: &Tensor, f: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.rows() * f);
    for r in 0..t.rows() {
        data.extend_from_slice(&t.row(r)[..f]);
    }
    Tensor::matrix(t.rows(), f, data)
}

/// Model output for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Predicted normalized numerics, `L × F`.
    pub numerics: Tensor,
    /// Logits per relation: `L × |V|` for IP relations, `L × 8` for ports.
    pub scores: [Tensor; 4],
}

impl Prediction {
    /// Argmax attachment per relation.
    pub fn attachments(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|r| self.scores[r].argmax_rows())
    }
}

pub trait Forecaster: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn learning_rate(&self) -> f64;
    /// Training loss of one example, with masking and any stochastic corruption.
    fn loss<'t>(&self, tape: &'t Tape, ex: &Example, rng: &mut SeededRng) -> Result<Var<'t>, ModelError>;
    /// Deterministic inference.
    fn predict(&self, ex: &Example) -> Result<Prediction, ModelError>;
    /// Everything needed to rebuild the model shell before loading weights.
    fn sidecar(&self) -> KvConfig;
}

impl<F: Forecaster + ?Sized> Forecaster for Box<F> {
    fn kind(&self) -> ModelKind {
        (**self).kind()
    }
    fn store(&self) -> &ParamStore {
        (**self).store()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        (**self).store_mut()
    }
    fn learning_rate(&self) -> f64 {
        (**self).learning_rate()
    }
    fn loss<'t>(&self, tape: &'t Tape, ex: &Example, rng: &mut SeededRng) -> Result<Var<'t>, ModelError> {
        (**self).loss(tape, ex, rng)
    }
    fn predict(&self, ex: &Example) -> Result<Prediction, ModelError> {
        (**self).predict(ex)
    }
    fn sidecar(&self) -> KvConfig {
        (**self).sidecar()
    }
}

/// Data-dependent sizes shared by every model kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub window_length: usize,
    pub n_numerics: usize,
    pub conn_width: usize,
    pub placeholder_width: usize,
    pub vocab_size: usize,
}

/// Hyperparameter keys accepted for `kind`.
pub fn hyper_keys(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Gnn => &[
            "hidden_dim",
            "latent_dim",
            "n_layers",
            "mask_ratio",
            "edge_drop_p",
            "alpha",
            "dropout_p",
            "learning_rate",
        ],
        ModelKind::DLinear | ModelKind::Lstm => &[
            "octet_dim",
            "port_dim",
            "hidden_dim",
            "kernel",
            "mask_ratio",
            "alpha",
            "learning_rate",
        ],
    }
}

/// A fresh model of `kind`; hyperparameters absent from `hyper` take their defaults.
pub fn build_model(
    kind: ModelKind,
    hyper: &KvConfig,
    dims: DataDims,
    seed: u64,
) -> Result<Box<dyn Forecaster>, ModelError> {
    use crate::baseline::{BackboneKind, BaselineDims, BaselineHyper, BaselineModel};
    use crate::gnn::{GnnDims, GnnHyper, GnnModel};
    Ok(match kind {
        ModelKind::Gnn => Box::new(GnnModel::new(
            GnnHyper::default().read_from(hyper)?,
            GnnDims {
                conn_width: dims.conn_width,
                placeholder_width: dims.placeholder_width,
                vocab_size: dims.vocab_size,
            },
            seed,
        )?),
        ModelKind::DLinear | ModelKind::Lstm => {
            let backbone = if kind == ModelKind::Lstm {
                BackboneKind::Lstm
            } else {
                BackboneKind::DLinear
            };
            Box::new(BaselineModel::new(
                BaselineHyper::new(backbone).read_from(hyper)?,
                BaselineDims {
                    window_length: dims.window_length,
                    n_numerics: dims.n_numerics,
                    vocab_size: dims.vocab_size,
                },
                seed,
            )?)
        }
    })
}

/// Rebuilds an untrained model shell from a sidecar written by [`Forecaster::sidecar`].
pub fn model_from_sidecar(c: &KvConfig) -> Result<Box<dyn Forecaster>, ModelError> {
    let kind: ModelKind = c.require::<String>("model")?.parse()?;
    Ok(match kind {
        ModelKind::Gnn => Box::new(crate::gnn::GnnModel::from_sidecar(c, 0)?),
        ModelKind::DLinear | ModelKind::Lstm => Box::new(crate::baseline::BaselineModel::from_sidecar(c, 0)?),
    })
}
