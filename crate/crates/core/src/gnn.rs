//! Masked heterogeneous graph autoencoder for next-window forecasting.
//!
//! The encoder is a mean-aggregating GraphSAGE stack over the three node
//! types. Training replaces a random subset of connection rows with a
//! learnable mask token and randomly drops edges; the decoders then predict
//! the *next* window: an MLP maps connection embeddings to next-window
//! connection features, and a per-relation weighted dot product scores every
//! connection against every IP (across the vocabulary) and port node.

use crate::autodiff::{Init, ParamId, ParamStore, SeededRng, Tape, Tensor, TensorError, Var};
use crate::config::KvConfig;
use crate::graph::{Edge, Relation, StructuralTargets, WindowGraph, N_PORT_NODES};
use crate::model::{numeric_columns, Example, Forecaster, ModelError, ModelKind, Prediction};
use crate::nn::{Linear, Mlp2};

#[derive(Debug, Clone, PartialEq)]
pub struct GnnHyper {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub n_layers: usize,
    pub mask_ratio: f64,
    pub edge_drop_p: f64,
    pub alpha: f64,
    pub dropout_p: f64,
    pub learning_rate: f64,
}

impl Default for GnnHyper {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            latent_dim: 32,
            n_layers: 2,
            mask_ratio: 0.5,
            edge_drop_p: 0.2,
            alpha: 0.5,
            dropout_p: 0.0,
            learning_rate: 1e-3,
        }
    }
}

impl GnnHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyper(m.into()));
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.n_layers == 0 {
            return bad("dimensions and layer count must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.edge_drop_p) {
            return bad("edge_drop_p must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn write_into(&self, c: &mut KvConfig) {
        c.set("hidden_dim", self.hidden_dim);
        c.set("latent_dim", self.latent_dim);
        c.set("n_layers", self.n_layers);
        c.set("mask_ratio", self.mask_ratio);
        c.set("edge_drop_p", self.edge_drop_p);
        c.set("alpha", self.alpha);
        c.set("dropout_p", self.dropout_p);
        c.set("learning_rate", self.learning_rate);
    }

    /// Reads any keys present in `c`, keeping `self` for the rest.
    pub fn read_from(&self, c: &KvConfig) -> Result<Self, ModelError> {
        let h = Self {
            hidden_dim: c.get_or("hidden_dim", self.hidden_dim)?,
            latent_dim: c.get_or("latent_dim", self.latent_dim)?,
            n_layers: c.get_or("n_layers", self.n_layers)?,
            mask_ratio: c.get_or("mask_ratio", self.mask_ratio)?,
            edge_drop_p: c.get_or("edge_drop_p", self.edge_drop_p)?,
            alpha: c.get_or("alpha", self.alpha)?,
            dropout_p: c.get_or("dropout_p", self.dropout_p)?,
            learning_rate: c.get_or("learning_rate", self.learning_rate)?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// Input widths and output vocabulary of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnDims {
    pub conn_width: usize,
    pub placeholder_width: usize,
    pub vocab_size: usize,
}

/// ⌈ratio·n⌉, robust to `ratio·n` landing a hair above an integer.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Sorted positions of ⌈ratio·n⌉ rows drawn without replacement.
pub fn select_mask(n: usize, ratio: f64, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx = rng.sample_indices(n, mask_count(n, ratio));
    idx.sort_unstable();
    idx
}

/// Replaces the selected connection rows with `token`. Edges and the other
/// node types are left as they are.
pub fn apply_mask(g: &WindowGraph, ratio: f64, token: &[f64], rng: &mut SeededRng) -> (WindowGraph, Vec<usize>) {
    assert_eq!(token.len(), g.conn_width(), "mask token width");
    let mask = select_mask(g.n_conns(), ratio, rng);
    let mut out = g.clone();
    for &i in &mask {
        out.conn_features.row_mut(i).copy_from_slice(token);
    }
    (out, mask)
}

/// Drops each typed edge independently with probability `p`. A dropped
/// edge disappears in both directions since reverse edges are derived.
pub fn drop_edges(g: &WindowGraph, p: f64, rng: &mut SeededRng) -> WindowGraph {
    let mut out = g.clone();
    if p > 0.0 {
        for list in out.edges.iter_mut() {
            list.retain(|_| !rng.bernoulli(p));
        }
    }
    out
}

/// Scores `L × N`: `score[u][v] = Σ_k w[k]·conn[u][k]·nodes[v][k]`.
pub fn enhanced_dot<'t>(conn: &Var<'t>, nodes: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>, TensorError> {
    conn.mul(w)?.matmul(&nodes.transpose())
}

/// The four score matrices in [`Relation`] order. `ip` holds one row per
/// vocabulary id.
pub fn decode_structure<'t>(
    conn: &Var<'t>,
    ip: &Var<'t>,
    port: &Var<'t>,
    w: &[Var<'t>; 4],
) -> Result<[Var<'t>; 4], TensorError> {
    Ok([
        enhanced_dot(conn, ip, &w[0])?,
        enhanced_dot(conn, ip, &w[1])?,
        enhanced_dot(conn, port, &w[2])?,
        enhanced_dot(conn, port, &w[3])?,
    ])
}

/// Mean over relations of the per-row softmax cross-entropy.
pub fn struct_loss<'t>(scores: &[Var<'t>; 4], targets: &StructuralTargets) -> Result<Var<'t>, TensorError> {
    let mut total: Option<Var<'t>> = None;
    for rel in Relation::ALL {
        let ce = scores[rel.index()].softmax_cross_entropy(&targets.classes(rel))?;
        total = Some(match total {
            None => ce,
            Some(t) => t.add(&ce)?,
        });
    }
    Ok(total.expect("four relations").scale(0.25))
}

/// MSE over the masked rows only.
pub fn feat_loss<'t>(pred: &Var<'t>, next_features: &Tensor, mask: &[usize]) -> Result<Var<'t>, ModelError> {
    if mask.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let mut target = Vec::with_capacity(mask.len() * next_features.cols());
    for &i in mask {
        if i >= next_features.rows() {
            return Err(TensorError::IndexOutOfBounds {
                index: i,
                bound: next_features.rows(),
            }
            .into());
        }
        target.extend_from_slice(next_features.row(i));
    }
    let target = Tensor::matrix(mask.len(), next_features.cols(), target);
    Ok(pred.row_gather(mask)?.mse_loss(&target)?)
}

/// `alpha·s + (1 − alpha)·f`.
pub fn total_loss<'t>(s: &Var<'t>, f: &Var<'t>, alpha: f64) -> Result<Var<'t>, TensorError> {
    s.scale(alpha).add(&f.scale(1.0 - alpha))
}

const NODE_TYPES: [&str; 3] = ["conn", "ip", "port"];

/// Message-passing directions: (receiving type, sending type, relation).
/// The first four carry endpoint state into connections; the rest carry
/// connection state back to the endpoints.
const DIRECTIONS: [(usize, usize, Relation); 8] = [
    (0, 1, Relation::SrcIp),
    (0, 1, Relation::DstIp),
    (0, 2, Relation::SrcPort),
    (0, 2, Relation::DstPort),
    (1, 0, Relation::SrcIp),
    (1, 0, Relation::DstIp),
    (2, 0, Relation::SrcPort),
    (2, 0, Relation::DstPort),
];

#[derive(Debug, Clone)]
struct SageLayer {
    self_w: [Linear; 3],
    rel_w: [Linear; 8],
}

/// Per-type node embeddings.
#[derive(Clone, Copy)]
pub struct Embeddings<'t> {
    pub conn: Var<'t>,
    pub ip: Var<'t>,
    pub port: Var<'t>,
}

impl<'t> Embeddings<'t> {
    fn get(&self, t: usize) -> &Var<'t> {
        match t {
            0 => &self.conn,
            1 => &self.ip,
            _ => &self.port,
        }
    }
}

/// Forward-pass outputs.
pub struct GnnOutput<'t> {
    pub embeddings: Embeddings<'t>,
    /// Predicted next-window connection features, `L × (F + 4)`.
    pub features: Var<'t>,
    pub scores: [Var<'t>; 4],
}

/// Result of [`GnnModel::forecast`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphForecast {
    pub features: Tensor,
    pub scores: [Tensor; 4],
    /// Argmax per relation; vocabulary ids for IP relations, port nodes otherwise.
    pub attachments: [Vec<usize>; 4],
}

#[derive(Debug, Clone)]
pub struct GnnModel {
    pub hyper: GnnHyper,
    pub dims: GnnDims,
    store: ParamStore,
    proj: [Linear; 3],
    layers: Vec<SageLayer>,
    mask_token: ParamId,
    feat_dec: Mlp2,
    w_rel: [ParamId; 4],
}

impl GnnModel {
    pub fn new(hyper: GnnHyper, dims: GnnDims, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        if dims.conn_width == 0 || dims.placeholder_width == 0 || dims.vocab_size == 0 {
            return Err(ModelError::InvalidHyper("model dimensions must be positive".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let in_widths = [dims.conn_width, dims.placeholder_width, dims.placeholder_width];
        let mut proj = Vec::with_capacity(3);
        for (t, w) in NODE_TYPES.iter().zip(in_widths) {
            proj.push(Linear::new(&mut store, &format!("proj.{t}"), w, hyper.hidden_dim, true, &mut rng)?);
        }
        let mut layers = Vec::with_capacity(hyper.n_layers);
        for l in 0..hyper.n_layers {
            let out = if l + 1 == hyper.n_layers { hyper.latent_dim } else { hyper.hidden_dim };
            let mut self_w = Vec::with_capacity(3);
            for t in NODE_TYPES {
                self_w.push(Linear::new(&mut store, &format!("sage{l}.{t}.self"), hyper.hidden_dim, out, true, &mut rng)?);
            }
            let mut rel_w = Vec::with_capacity(8);
            for (recv, _, rel) in DIRECTIONS {
                let name = format!("sage{l}.{}<-{}", NODE_TYPES[recv], rel.name());
                rel_w.push(Linear::new(&mut store, &name, hyper.hidden_dim, out, false, &mut rng)?);
            }
            layers.push(SageLayer {
                self_w: self_w.try_into().expect("3 types"),
                rel_w: rel_w.try_into().expect("8 directions"),
            });
        }
        let mask_token = store.add("mask_token", 1, dims.conn_width, Init::Normal { std: 0.02 }, &mut rng)?;
        let feat_dec = Mlp2::new(&mut store, "feat_dec", hyper.latent_dim, hyper.hidden_dim, dims.conn_width, &mut rng)?;
        let mut w_rel = Vec::with_capacity(4);
        for rel in Relation::ALL {
            w_rel.push(store.add(format!("struct.{}", rel.name()), 1, hyper.latent_dim, Init::Constant(1.0), &mut rng)?);
        }
        Ok(Self {
            hyper,
            dims,
            store,
            proj: proj.try_into().expect("3 types"),
            layers,
            mask_token,
            feat_dec,
            w_rel: w_rel.try_into().expect("4 relations"),
        })
    }

    pub fn mask_token(&self) -> &Tensor {
        self.store.value(self.mask_token)
    }

    fn check_graph(&self, g: &WindowGraph) -> Result<(), ModelError> {
        if g.conn_width() != self.dims.conn_width || g.placeholder_width() != self.dims.placeholder_width {
            return Err(ModelError::Incompatible(format!(
                "graph widths ({}, {}) vs model ({}, {})",
                g.conn_width(),
                g.placeholder_width(),
                self.dims.conn_width,
                self.dims.placeholder_width
            )));
        }
        if let Some(&id) = g.ip_ids.iter().find(|&&id| id as usize >= self.dims.vocab_size) {
            return Err(ModelError::Incompatible(format!(
                "IP id {id} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// Encoder over a graph whose connection input rows are `conn_input`.
    /// `dropout` enables training-mode dropout between layers.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        g: &WindowGraph,
        conn_input: Var<'t>,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<Embeddings<'t>, ModelError> {
        let counts = [g.n_conns(), g.n_ips(), N_PORT_NODES];
        let ip_in = tape.constant(g.ip_features.clone());
        let port_in = tape.constant(g.port_features.clone());
        let mut h = Embeddings {
            conn: self.proj[0].forward(tape, &self.store, &conn_input)?,
            ip: self.proj[1].forward(tape, &self.store, &ip_in)?,
            port: self.proj[2].forward(tape, &self.store, &port_in)?,
        };
        let index: Vec<(Vec<usize>, Vec<usize>)> = Relation::ALL
            .iter()
            .map(|&r| {
                let e: &[Edge] = g.edges(r);
                (
                    e.iter().map(|e| e.conn as usize).collect(),
                    e.iter().map(|e| e.node as usize).collect(),
                )
            })
            .collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut acc: Vec<Var<'t>> = (0..3)
                .map(|t| layer.self_w[t].forward(tape, &self.store, h.get(t)))
                .collect::<Result<_, _>>()?;
            for (d, &(recv, send, rel)) in DIRECTIONS.iter().enumerate() {
                let (conns, nodes) = &index[rel.index()];
                let (src_idx, dst_idx) = if recv == 0 { (nodes, conns) } else { (conns, nodes) };
                let agg = h.get(send).row_gather(src_idx)?.segment_mean(dst_idx, counts[recv])?;
                let msg = layer.rel_w[d].forward(tape, &self.store, &agg)?;
                acc[recv] = acc[recv].add(&msg)?;
            }
            let last = l + 1 == self.layers.len();
            let mut next = acc.into_iter().map(|v| v.relu());
            let mut out = Embeddings {
                conn: next.next().expect("conn"),
                ip: next.next().expect("ip"),
                port: next.next().expect("port"),
            };
            if !last {
                if let Some(rng) = dropout.as_deref_mut() {
                    out = Embeddings {
                        conn: out.conn.dropout(self.hyper.dropout_p, rng)?,
                        ip: out.ip.dropout(self.hyper.dropout_p, rng)?,
                        port: out.port.dropout(self.hyper.dropout_p, rng)?,
                    };
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Full forward pass. Rows listed in `mask` are replaced by the mask
    /// token before encoding.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        g: &WindowGraph,
        mask: &[usize],
        dropout: Option<&mut SeededRng>,
    ) -> Result<GnnOutput<'t>, ModelError> {
        self.check_graph(g)?;
        let n = g.n_conns();
        let features = tape.constant(g.conn_features.clone());
        let conn_input = if mask.is_empty() {
            features
        } else {
            let token = tape.param(&self.store, self.mask_token);
            let mut pick: Vec<usize> = (0..n).collect();
            for &i in mask {
                if i >= n {
                    return Err(TensorError::IndexOutOfBounds { index: i, bound: n }.into());
                }
                pick[i] = n;
            }
            Var::concat(&[features, token], 0)?.row_gather(&pick)?
        };
        let emb = self.encode(tape, g, conn_input, dropout)?;
        let ids: Vec<usize> = g.ip_ids.iter().map(|&id| id as usize).collect();
        let ip_vocab = emb.ip.scatter_rows(&ids, self.dims.vocab_size)?;
        let w: [Var<'t>; 4] = std::array::from_fn(|r| tape.param(&self.store, self.w_rel[r]));
        let scores = decode_structure(&emb.conn, &ip_vocab, &emb.port, &w)?;
        let features = self.feat_dec.forward(tape, &self.store, &emb.conn)?;
        Ok(GnnOutput {
            embeddings: emb,
            features,
            scores,
        })
    }

    /// Training losses `(total, struct, feat)` for one pair.
    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        current: &WindowGraph,
        next: &WindowGraph,
        targets: &StructuralTargets,
        rng: &mut SeededRng,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), ModelError> {
        if current.n_conns() != next.n_conns() {
            return Err(ModelError::Incompatible("current and next windows differ in length".into()));
        }
        let mask = select_mask(current.n_conns(), self.hyper.mask_ratio, rng);
        let dropped;
        let g = if self.hyper.edge_drop_p > 0.0 {
            dropped = drop_edges(current, self.hyper.edge_drop_p, rng);
            &dropped
        } else {
            current
        };
        let out = self.forward(tape, g, &mask, Some(rng))?;
        let s = struct_loss(&out.scores, targets)?;
        let f = feat_loss(&out.features, &next.conn_features, &mask)?;
        let total = total_loss(&s, &f, self.hyper.alpha)?;
        Ok((total, s, f))
    }

    /// Inference: no masking, no edge dropping, no dropout.
    pub fn forecast(&self, g: &WindowGraph) -> Result<GraphForecast, ModelError> {
        let tape = Tape::new();
        let out = self.forward(&tape, g, &[], None)?;
        let scores: [Tensor; 4] = std::array::from_fn(|r| out.scores[r].value().as_ref().clone());
        Ok(GraphForecast {
            features: out.features.value().as_ref().clone(),
            attachments: std::array::from_fn(|r| scores[r].argmax_rows()),
            scores,
        })
    }

    pub fn from_sidecar(c: &KvConfig, seed: u64) -> Result<Self, ModelError> {
        let hyper = GnnHyper::default().read_from(c)?;
        let dims = GnnDims {
            conn_width: c.require("conn_width")?,
            placeholder_width: c.require("placeholder_width")?,
            vocab_size: c.require("vocab_size")?,
        };
        Self::new(hyper, dims, seed)
    }
}

impl Forecaster for GnnModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Gnn
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
        Ok(self.losses(tape, &ex.current, &ex.next, &ex.targets, rng)?.0)
    }

    fn predict(&self, ex: &Example) -> Result<Prediction, ModelError> {
        let f = self.forecast(&ex.current)?;
        Ok(Prediction {
            numerics: numeric_columns(&f.features, ex.n_numerics()),
            scores: f.scores,
        })
    }

    fn sidecar(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("model", ModelKind::Gnn);
        self.hyper.write_into(&mut c);
        c.set("conn_width", self.dims.conn_width);
        c.set("placeholder_width", self.dims.placeholder_width);
        c.set("vocab_size", self.dims.vocab_size);
        c
    }
}
