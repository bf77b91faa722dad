//! Sequence baselines trained as masked autoencoders.
//!
//! A window is read as a sequence of flow tokens. Each token concatenates
//! eight octet embeddings (one shared table plus a learned offset per octet
//! slot), two port-category embeddings, the protocol one-hot and the
//! normalized numerics. A DLinear or LSTM backbone mixes the sequence and
//! two row-wise MLP heads predict the next window's attachments and
//! numerics at each position.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Init, ParamId, ParamStore, SeededRng, Tape, Tensor, TensorError, Var};
use crate::config::KvConfig;
use crate::gnn::{feat_loss, select_mask, struct_loss, total_loss};
use crate::graph::{StructuralTargets, N_PORT_NODES};
use crate::model::{numeric_columns, Example, Forecaster, ModelError, ModelKind, Prediction};
use crate::nn::{Linear, Mlp2};
use crate::preprocess::{OheSchema, PortCategory, Window};

/// Row of the octet table used for masked positions.
pub const OCTET_MASK_ROW: usize = 256;
/// Row of the port table used for masked positions.
pub const PORT_MASK_ROW: usize = N_PORT_NODES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    DLinear,
    Lstm,
}

impl BackboneKind {
    pub fn model_kind(self) -> ModelKind {
        match self {
            Self::DLinear => ModelKind::DLinear,
            Self::Lstm => ModelKind::Lstm,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.model_kind().name())
    }
}

impl FromStr for BackboneKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.parse::<ModelKind>()? {
            ModelKind::DLinear => Ok(Self::DLinear),
            ModelKind::Lstm => Ok(Self::Lstm),
            ModelKind::Gnn => Err(ModelError::InvalidHyper("gnn is not a sequence backbone".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHyper {
    pub backbone: BackboneKind,
    pub octet_dim: usize,
    pub port_dim: usize,
    pub hidden_dim: usize,
    /// DLinear moving-average kernel, odd.
    pub kernel: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub learning_rate: f64,
}

impl BaselineHyper {
    pub fn new(backbone: BackboneKind) -> Self {
        Self {
            backbone,
            octet_dim: 8,
            port_dim: 4,
            hidden_dim: 64,
            kernel: 25,
            mask_ratio: 0.5,
            alpha: 0.5,
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyper(m.into()));
        if self.octet_dim == 0 || self.port_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.alpha) {
            return bad("mask_ratio and alpha must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn write_into(&self, c: &mut KvConfig) {
        c.set("backbone", self.backbone);
        c.set("octet_dim", self.octet_dim);
        c.set("port_dim", self.port_dim);
        c.set("hidden_dim", self.hidden_dim);
        c.set("kernel", self.kernel);
        c.set("mask_ratio", self.mask_ratio);
        c.set("alpha", self.alpha);
        c.set("learning_rate", self.learning_rate);
    }

    pub fn read_from(&self, c: &KvConfig) -> Result<Self, ModelError> {
        let backbone = match c.get_str("backbone") {
            Some(s) => s.parse()?,
            None => self.backbone,
        };
        let h = Self {
            backbone,
            octet_dim: c.get_or("octet_dim", self.octet_dim)?,
            port_dim: c.get_or("port_dim", self.port_dim)?,
            hidden_dim: c.get_or("hidden_dim", self.hidden_dim)?,
            kernel: c.get_or("kernel", self.kernel)?,
            mask_ratio: c.get_or("mask_ratio", self.mask_ratio)?,
            alpha: c.get_or("alpha", self.alpha)?,
            learning_rate: c.get_or("learning_rate", self.learning_rate)?,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineDims {
    pub window_length: usize,
    pub n_numerics: usize,
    pub vocab_size: usize,
}

/// Embedding tables that turn flows into tokens.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbedder {
    pub octets: ParamId,
    pub octet_slots: ParamId,
    pub ports: ParamId,
    pub numeric_mask: ParamId,
    pub octet_dim: usize,
    pub port_dim: usize,
    pub n_numerics: usize,
}

impl TokenEmbedder {
    fn new(
        store: &mut ParamStore,
        octet_dim: usize,
        port_dim: usize,
        n_numerics: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, TensorError> {
        let emb = Init::Normal { std: 0.02 };
        Ok(Self {
            octets: store.add("embed.octets", OCTET_MASK_ROW + 1, octet_dim, emb, rng)?,
            octet_slots: store.add("embed.octet_slots", 8, octet_dim, emb, rng)?,
            ports: store.add("embed.ports", PORT_MASK_ROW + 1, port_dim, emb, rng)?,
            numeric_mask: store.add("embed.numeric_mask", 1, n_numerics, emb, rng)?,
            octet_dim,
            port_dim,
            n_numerics,
        })
    }

    pub fn width(&self) -> usize {
        8 * self.octet_dim + 2 * self.port_dim + OheSchema::N_PROTOCOL + self.n_numerics
    }

    /// Token matrix `L × width`. `features` holds the window's normalized
    /// numerics and protocol one-hot (`L × (F + 4)`); rows in `mask` use
    /// the mask rows and the numeric mask embedding instead.
    pub fn embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        window: &Window,
        features: &Tensor,
        mask: &[usize],
    ) -> Result<Var<'t>, TensorError> {
        let n = window.len();
        let f = self.n_numerics;
        if features.rows() != n || features.cols() != f + OheSchema::N_PROTOCOL {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                left: vec![n, f + OheSchema::N_PROTOCOL],
                right: features.shape().to_vec(),
            });
        }
        let mut masked = vec![false; n];
        for &i in mask {
            *masked.get_mut(i).ok_or(TensorError::IndexOutOfBounds { index: i, bound: n })? = true;
        }
        let mut octet_idx = Vec::with_capacity(8 * n);
        let mut src_port = Vec::with_capacity(n);
        let mut dst_port = Vec::with_capacity(n);
        for (r, &m) in window.records.iter().zip(&masked) {
            if m {
                octet_idx.extend([OCTET_MASK_ROW; 8]);
                src_port.push(PORT_MASK_ROW);
                dst_port.push(PORT_MASK_ROW);
            } else {
                octet_idx.extend(r.src_ip.octets().iter().chain(&r.dst_ip.octets()).map(|&o| o as usize));
                src_port.push(PortCategory::classify(r.src_port).index());
                dst_port.push(PortCategory::classify(r.dst_port).index());
            }
        }
        let slots: Vec<usize> = (0..8 * n).map(|i| i % 8).collect();
        let octets = tape
            .param(store, self.octets)
            .row_gather(&octet_idx)?
            .add(&tape.param(store, self.octet_slots).row_gather(&slots)?)?
            .reshape(&[n, 8 * self.octet_dim])?;
        let ports = tape.param(store, self.ports);
        let src = ports.row_gather(&src_port)?;
        let dst = ports.row_gather(&dst_port)?;

        let mut numerics = Vec::with_capacity(n * f);
        let mut proto = Vec::with_capacity(n * OheSchema::N_PROTOCOL);
        for (i, &m) in masked.iter().enumerate() {
            let row = features.row(i);
            numerics.extend_from_slice(&row[..f]);
            if m {
                proto.extend([0.0; OheSchema::N_PROTOCOL]);
            } else {
                proto.extend_from_slice(&row[f..]);
            }
        }
        let proto = tape.constant(Tensor::matrix(n, OheSchema::N_PROTOCOL, proto));
        let numerics = tape.constant(Tensor::matrix(n, f, numerics));
        let numerics = if mask.is_empty() {
            numerics
        } else {
            let pick: Vec<usize> = masked.iter().enumerate().map(|(i, &m)| if m { n } else { i }).collect();
            Var::concat(&[numerics, tape.param(store, self.numeric_mask)], 0)?.row_gather(&pick)?
        };
        Var::concat(&[octets, src, dst, proto, numerics], 1)
    }
}

#[derive(Debug, Clone, Copy)]
enum Backbone {
    DLinear { trend: ParamId, remainder: ParamId, proj: Linear },
    Lstm { input: Linear, recurrent: Linear },
}

/// Trend and remainder of a moving-average decomposition.
pub fn decompose<'t>(seq: &Var<'t>, kernel: usize) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let length = seq.value().rows();
    if kernel > length {
        return Err(ModelError::KernelTooLarge { kernel, length });
    }
    let trend = seq.moving_average(kernel)?;
    let remainder = seq.sub(&trend)?;
    Ok((trend, remainder))
}

/// DLinear: time-axis linear maps of trend and remainder, summed, then projected.
pub fn dlinear_forward<'t>(
    seq: &Var<'t>,
    w_trend: &Var<'t>,
    w_remainder: &Var<'t>,
    kernel: usize,
) -> Result<Var<'t>, ModelError> {
    let (trend, remainder) = decompose(seq, kernel)?;
    Ok(w_trend.matmul(&trend)?.add(&w_remainder.matmul(&remainder)?)?)
}

/// Unrolled LSTM with gate order (input, forget, cell, output). `x_proj`
/// is the input already multiplied into gate space (`L × 4H`, bias
/// included); `w_h` is `H × 4H`. Returns the hidden states `L × H`.
pub fn lstm_forward<'t>(tape: &'t Tape, x_proj: &Var<'t>, w_h: &Var<'t>) -> Result<Var<'t>, TensorError> {
    let steps = x_proj.value().rows();
    let hidden = w_h.value().rows();
    if steps == 0 {
        return Err(TensorError::Empty("lstm_forward"));
    }
    let mut h = tape.constant(Tensor::zeros(1, hidden));
    let mut c = tape.constant(Tensor::zeros(1, hidden));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let gates = x_proj.row_gather(&[t])?.add(&h.matmul(w_h)?)?;
        let i = gates.slice_cols(0, hidden)?.sigmoid();
        let f = gates.slice_cols(hidden, 2 * hidden)?.sigmoid();
        let g = gates.slice_cols(2 * hidden, 3 * hidden)?.tanh();
        let o = gates.slice_cols(3 * hidden, 4 * hidden)?.sigmoid();
        c = f.mul(&c)?.add(&i.mul(&g)?)?;
        h = o.mul(&c.tanh())?;
        outputs.push(h);
    }
    Var::concat(&outputs, 0)
}

/// Outputs of one baseline forward pass.
pub struct BaselineOutput<'t> {
    pub hidden: Var<'t>,
    pub scores: [Var<'t>; 4],
    /// `L × F`.
    pub numerics: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub hyper: BaselineHyper,
    pub dims: BaselineDims,
    store: ParamStore,
    embedder: TokenEmbedder,
    backbone: Backbone,
    struct_head: Mlp2,
    numeric_head: Mlp2,
}

impl BaselineModel {
    pub fn new(hyper: BaselineHyper, dims: BaselineDims, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        if dims.window_length == 0 || dims.n_numerics == 0 || dims.vocab_size == 0 {
            return Err(ModelError::InvalidHyper("model dimensions must be positive".into()));
        }
        if hyper.backbone == BackboneKind::DLinear && hyper.kernel > dims.window_length {
            return Err(ModelError::KernelTooLarge {
                kernel: hyper.kernel,
                length: dims.window_length,
            });
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let embedder = TokenEmbedder::new(&mut store, hyper.octet_dim, hyper.port_dim, dims.n_numerics, &mut rng)?;
        let width = embedder.width();
        let h = hyper.hidden_dim;
        let l = dims.window_length;
        let backbone = match hyper.backbone {
            BackboneKind::DLinear => Backbone::DLinear {
                trend: store.add("dlinear.trend", l, l, Init::XavierUniform, &mut rng)?,
                remainder: store.add("dlinear.remainder", l, l, Init::XavierUniform, &mut rng)?,
                proj: Linear::new(&mut store, "dlinear.proj", width, h, true, &mut rng)?,
            },
            BackboneKind::Lstm => Backbone::Lstm {
                input: Linear::new(&mut store, "lstm.input", width, 4 * h, true, &mut rng)?,
                recurrent: Linear::new(&mut store, "lstm.recurrent", h, 4 * h, false, &mut rng)?,
            },
        };
        let n_struct = 2 * dims.vocab_size + 2 * N_PORT_NODES;
        let struct_head = Mlp2::new(&mut store, "head.struct", h, h, n_struct, &mut rng)?;
        let numeric_head = Mlp2::new(&mut store, "head.numeric", h, h, dims.n_numerics, &mut rng)?;
        Ok(Self {
            hyper,
            dims,
            store,
            embedder,
            backbone,
            struct_head,
            numeric_head,
        })
    }

    pub fn embedder(&self) -> &TokenEmbedder {
        &self.embedder
    }

    pub fn token_width(&self) -> usize {
        self.embedder.width()
    }

    /// Backbone over a token matrix, `L × width → L × hidden`.
    pub fn backbone_forward<'t>(&self, tape: &'t Tape, tokens: &Var<'t>) -> Result<Var<'t>, ModelError> {
        match self.backbone {
            Backbone::DLinear { trend, remainder, proj } => {
                let y = dlinear_forward(
                    tokens,
                    &tape.param(&self.store, trend),
                    &tape.param(&self.store, remainder),
                    self.hyper.kernel,
                )?;
                Ok(proj.forward(tape, &self.store, &y)?)
            }
            Backbone::Lstm { input, recurrent } => {
                let x = input.forward(tape, &self.store, tokens)?;
                Ok(lstm_forward(tape, &x, &tape.param(&self.store, recurrent.w))?)
            }
        }
    }

    /// Both heads, row-wise.
    pub fn decode_heads<'t>(
        &self,
        tape: &'t Tape,
        hidden: &Var<'t>,
    ) -> Result<([Var<'t>; 4], Var<'t>), ModelError> {
        let logits = self.struct_head.forward(tape, &self.store, hidden)?;
        let v = self.dims.vocab_size;
        let p = N_PORT_NODES;
        let scores = [
            logits.slice_cols(0, v)?,
            logits.slice_cols(v, 2 * v)?,
            logits.slice_cols(2 * v, 2 * v + p)?,
            logits.slice_cols(2 * v + p, 2 * v + 2 * p)?,
        ];
        let numerics = self.numeric_head.forward(tape, &self.store, hidden)?;
        Ok((scores, numerics))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        window: &Window,
        features: &Tensor,
        mask: &[usize],
    ) -> Result<BaselineOutput<'t>, ModelError> {
        if window.len() != self.dims.window_length {
            return Err(ModelError::Incompatible(format!(
                "window of {} flows, model expects {}",
                window.len(),
                self.dims.window_length
            )));
        }
        let tokens = self.embedder.embed(tape, &self.store, window, features, mask)?;
        let hidden = self.backbone_forward(tape, &tokens)?;
        let (scores, numerics) = self.decode_heads(tape, &hidden)?;
        Ok(BaselineOutput {
            hidden,
            scores,
            numerics,
        })
    }

    /// Loss with an explicit mask.
    pub fn loss_with_mask<'t>(&self, tape: &'t Tape, ex: &Example, mask: &[usize]) -> Result<Var<'t>, ModelError> {
        let out = self.forward(tape, &ex.current_window, &ex.current.conn_features, mask)?;
        baseline_loss(&out, &ex.targets, &ex.next_numerics(), mask, self.hyper.alpha)
    }

    pub fn from_sidecar(c: &KvConfig, seed: u64) -> Result<Self, ModelError> {
        let backbone: BackboneKind = c.require::<String>("backbone")?.parse()?;
        let hyper = BaselineHyper::new(backbone).read_from(c)?;
        let dims = BaselineDims {
            window_length: c.require("window_length")?,
            n_numerics: c.require("n_numerics")?,
            vocab_size: c.require("vocab_size")?,
        };
        Self::new(hyper, dims, seed)
    }
}

/// `alpha · mean CE over the four heads + (1 − alpha) · masked numeric MSE`.
pub fn baseline_loss<'t>(
    out: &BaselineOutput<'t>,
    targets: &StructuralTargets,
    next_numerics: &Tensor,
    mask: &[usize],
    alpha: f64,
) -> Result<Var<'t>, ModelError> {
    let s = struct_loss(&out.scores, targets)?;
    let f = feat_loss(&out.numerics, next_numerics, mask)?;
    Ok(total_loss(&s, &f, alpha)?)
}

impl Forecaster for BaselineModel {
    fn kind(&self) -> ModelKind {
        self.hyper.backbone.model_kind()
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn learning_rate(&self) -> f64 {
        self.hyper.learning_rate
    }

    fn loss<'t>(&self, tape: &'t Tape, ex: &Example, rng: &mut SeededRng) -> Result<Var<'t>, ModelError> {
        let mask = select_mask(ex.current_window.len(), self.hyper.mask_ratio, rng);
        self.loss_with_mask(tape, ex, &mask)
    }

    fn predict(&self, ex: &Example) -> Result<Prediction, ModelError> {
        let tape = Tape::new();
        let out = self.forward(&tape, &ex.current_window, &ex.current.conn_features, &[])?;
        Ok(Prediction {
            numerics: numeric_columns(&out.numerics.value(), self.dims.n_numerics),
            scores: std::array::from_fn(|r| out.scores[r].value().as_ref().clone()),
        })
    }

    fn sidecar(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("model", self.kind());
        self.hyper.write_into(&mut c);
        c.set("window_length", self.dims.window_length);
        c.set("n_numerics", self.dims.n_numerics);
        c.set("vocab_size", self.dims.vocab_size);
        c
    }
}
