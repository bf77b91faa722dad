//! Heterogeneous window graphs.
//!
//! Each window becomes a graph with three node types:
//!
//! * one connection node per flow, carrying its `F + 4` connection features;
//! * one IP node per distinct endpoint address (unseen addresses share the
//!   out-of-vocabulary node), with all-ones placeholder features;
//! * eight port nodes, one per port category plus a reserved eighth node
//!   that no flow ever attaches to, also with all-ones features.
//!
//! Every connection has four typed edges (to its source IP, destination IP,
//! source-port node and destination-port node). Edges are bidirectional;
//! the reverse direction of each relation is the transpose of its forward
//! list and is never stored separately.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::preprocess::{build_connection_features, IpVocabulary, OheSchema, PortCategory, PreprocessError, Window};

pub const N_PORT_NODES: usize = 8;
/// Port node that exists in every graph but receives no edges.
pub const RESERVED_PORT_NODE: usize = 7;
pub const DEFAULT_PLACEHOLDER_WIDTH: usize = 8;

/// The four connection relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    SrcIp = 0,
    DstIp = 1,
    SrcPort = 2,
    DstPort = 3,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Self::SrcIp, Self::DstIp, Self::SrcPort, Self::DstPort];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_ip(self) -> bool {
        matches!(self, Self::SrcIp | Self::DstIp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SrcIp => "src_ip",
            Self::DstIp => "dst_ip",
            Self::SrcPort => "src_port",
            Self::DstPort => "dst_port",
        }
    }
}

/// A connection → endpoint edge. `node` indexes IP rows for IP relations
/// and port nodes (0–7) for port relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub conn: u32,
    pub node: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGraph {
    pub window_index: usize,
    /// Vocabulary id of each IP node.
    pub ip_ids: Vec<u32>,
    pub ip_features: Tensor,
    pub port_features: Tensor,
    pub conn_features: Tensor,
    /// Forward edge lists, indexed by [`Relation::index`].
    pub edges: [Vec<Edge>; 4],
}

impl WindowGraph {
    pub fn n_conns(&self) -> usize {
        self.conn_features.rows()
    }

    pub fn n_ips(&self) -> usize {
        self.ip_ids.len()
    }

    pub fn conn_width(&self) -> usize {
        self.conn_features.cols()
    }

    pub fn placeholder_width(&self) -> usize {
        self.port_features.cols()
    }

    pub fn edges(&self, rel: Relation) -> &[Edge] {
        &self.edges[rel.index()]
    }

    /// Reverse edges of a relation as `(endpoint node, connection)` pairs.
    pub fn reverse(&self, rel: Relation) -> Vec<(u32, u32)> {
        self.edges(rel).iter().map(|e| (e.node, e.conn)).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Number of endpoint nodes a relation points at.
    pub fn n_targets(&self, rel: Relation) -> usize {
        if rel.is_ip() {
            self.n_ips()
        } else {
            N_PORT_NODES
        }
    }

    /// Per-connection endpoint of a relation, when every connection still
    /// has exactly one edge of that relation in connection order.
    pub fn attachment(&self, rel: Relation) -> Option<Vec<u32>> {
        let e = self.edges(rel);
        if e.len() != self.n_conns() || e.iter().enumerate().any(|(i, e)| e.conn as usize != i) {
            return None;
        }
        Some(e.iter().map(|e| e.node).collect())
    }
}

/// Builds the heterogeneous graph of one window.
pub fn build_graph(
    window: &Window,
    vocab: &IpVocabulary,
    schema: &OheSchema,
    placeholder_width: usize,
) -> Result<WindowGraph, PreprocessError> {
    let mut ip_ids: Vec<u32> = Vec::new();
    let mut local = std::collections::HashMap::new();
    let mut node_of = |id: u32, ip_ids: &mut Vec<u32>| -> u32 {
        *local.entry(id).or_insert_with(|| {
            ip_ids.push(id);
            (ip_ids.len() - 1) as u32
        })
    };
    let n = window.len();
    let mut edges: [Vec<Edge>; 4] = Default::default();
    let mut features = Vec::with_capacity(n);
    for (i, r) in window.records.iter().enumerate() {
        let conn = i as u32;
        let s = node_of(vocab.lookup(r.src_ip), &mut ip_ids);
        let d = node_of(vocab.lookup(r.dst_ip), &mut ip_ids);
        edges[0].push(Edge { conn, node: s });
        edges[1].push(Edge { conn, node: d });
        edges[2].push(Edge {
            conn,
            node: PortCategory::classify(r.src_port).index() as u32,
        });
        edges[3].push(Edge {
            conn,
            node: PortCategory::classify(r.dst_port).index() as u32,
        });
        features.push(build_connection_features(r, schema)?);
    }
    let width = window.records.first().map_or(OheSchema::N_PROTOCOL, |r| r.numerics.len() + OheSchema::N_PROTOCOL);
    let conn_features = if features.is_empty() {
        Tensor::zeros(0, width)
    } else {
        Tensor::from_rows(&features).map_err(|_| PreprocessError::Format("ragged numeric widths in window".into()))?
    };
    Ok(WindowGraph {
        window_index: window.index,
        ip_features: Tensor::ones(ip_ids.len(), placeholder_width),
        port_features: Tensor::ones(N_PORT_NODES, placeholder_width),
        ip_ids,
        conn_features,
        edges,
    })
}

/// A (current, next) pair of consecutive windows. Connection slot `i` of a
/// prediction corresponds to the `i`-th flow of `next`.
#[derive(Debug, Clone)]
pub struct ForecastPair {
    pub current: Arc<WindowGraph>,
    pub next: Arc<WindowGraph>,
}

/// Pairs each graph with its successor; a gap in window indices breaks pairing.
pub fn pair_windows(graphs: &[Arc<WindowGraph>]) -> Vec<ForecastPair> {
    graphs
        .windows(2)
        .filter(|w| w[1].window_index == w[0].window_index + 1)
        .map(|w| ForecastPair {
            current: Arc::clone(&w[0]),
            next: Arc::clone(&w[1]),
        })
        .collect()
}

/// Per-connection attachment targets of the next window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuralTargets {
    pub src_ip: Vec<u32>,
    pub dst_ip: Vec<u32>,
    pub src_port: Vec<u8>,
    pub dst_port: Vec<u8>,
}

impl StructuralTargets {
    pub fn len(&self) -> usize {
        self.src_ip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_ip.is_empty()
    }

    /// Class ids of one relation as `usize`.
    pub fn classes(&self, rel: Relation) -> Vec<usize> {
        match rel {
            Relation::SrcIp => self.src_ip.iter().map(|&x| x as usize).collect(),
            Relation::DstIp => self.dst_ip.iter().map(|&x| x as usize).collect(),
            Relation::SrcPort => self.src_port.iter().map(|&x| x as usize).collect(),
            Relation::DstPort => self.dst_port.iter().map(|&x| x as usize).collect(),
        }
    }
}

/// Reads attachment targets off a full (undropped) graph.
pub fn graph_targets(g: &WindowGraph) -> StructuralTargets {
    let att = |rel| g.attachment(rel).expect("targets need an intact graph");
    StructuralTargets {
        src_ip: att(Relation::SrcIp).iter().map(|&n| g.ip_ids[n as usize]).collect(),
        dst_ip: att(Relation::DstIp).iter().map(|&n| g.ip_ids[n as usize]).collect(),
        src_port: att(Relation::SrcPort).iter().map(|&n| n as u8).collect(),
        dst_port: att(Relation::DstPort).iter().map(|&n| n as u8).collect(),
    }
}

pub fn structural_targets(pair: &ForecastPair) -> StructuralTargets {
    graph_targets(&pair.next)
}

// ---------------------------------------------------------------------------
// Binary graph format.
//
// magic "FGW1" | u16 version | u64 window_index
// u32 n_ips | u32 placeholder_width | u32 ip_ids[n_ips] | f64 ip_features
// u32 n_port | f64 port_features
// u32 n_conns | u32 conn_width | f64 conn_features
// 4 × (u32 n_edges | n_edges × (u32 conn, u32 node))

const GRAPH_MAGIC: &[u8; 4] = b"FGW1";
pub const GRAPH_FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GraphFormatError {
    #[error("graph file version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("graph payload corrupt: {0}")]
    Corrupt(&'static str),
    #[error("graph cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph manifest: {0}")]
    Csv(#[from] csv::Error),
}

pub fn serialize_graph(g: &WindowGraph) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(GRAPH_MAGIC);
    b.extend_from_slice(&GRAPH_FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(g.window_index as u64).to_le_bytes());
    let put_u32 = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
    let put_f64s = |b: &mut Vec<u8>, t: &Tensor| {
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    };
    put_u32(&mut b, g.n_ips());
    put_u32(&mut b, g.ip_features.cols());
    for &id in &g.ip_ids {
        put_u32(&mut b, id as usize);
    }
    put_f64s(&mut b, &g.ip_features);
    put_u32(&mut b, g.port_features.rows());
    put_u32(&mut b, g.port_features.cols());
    put_f64s(&mut b, &g.port_features);
    put_u32(&mut b, g.n_conns());
    put_u32(&mut b, g.conn_width());
    put_f64s(&mut b, &g.conn_features);
    for list in &g.edges {
        put_u32(&mut b, list.len());
        for e in list {
            put_u32(&mut b, e.conn as usize);
            put_u32(&mut b, e.node as usize);
        }
    }
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GraphFormatError> {
        let end = self.pos.checked_add(n).ok_or(GraphFormatError::Corrupt("length overflow"))?;
        let s = self.buf.get(self.pos..end).ok_or(GraphFormatError::Corrupt("truncated"))?;
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, GraphFormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<usize, GraphFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }
    fn u64(&mut self) -> Result<u64, GraphFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor, GraphFormatError> {
        let n = rows.checked_mul(cols).ok_or(GraphFormatError::Corrupt("size overflow"))?;
        let raw = self.take(n.checked_mul(8).ok_or(GraphFormatError::Corrupt("size overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
        Ok(Tensor::matrix(rows, cols, data))
    }
}

pub fn deserialize_graph(bytes: &[u8]) -> Result<WindowGraph, GraphFormatError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != GRAPH_MAGIC {
        return Err(GraphFormatError::Corrupt("bad magic"));
    }
    let version = c.u16()?;
    if version != GRAPH_FORMAT_VERSION {
        return Err(GraphFormatError::VersionMismatch {
            found: version,
            expected: GRAPH_FORMAT_VERSION,
        });
    }
    let window_index = c.u64()? as usize;
    let n_ips = c.u32()?;
    let d_place = c.u32()?;
    let ip_ids = (0..n_ips).map(|_| c.u32().map(|v| v as u32)).collect::<Result<Vec<_>, _>>()?;
    let ip_features = c.matrix(n_ips, d_place)?;
    let n_port = c.u32()?;
    let port_cols = c.u32()?;
    let port_features = c.matrix(n_port, port_cols)?;
    let n_conns = c.u32()?;
    let conn_width = c.u32()?;
    let conn_features = c.matrix(n_conns, conn_width)?;
    let mut edges: [Vec<Edge>; 4] = Default::default();
    for (r, list) in edges.iter_mut().enumerate() {
        let n = c.u32()?;
        if n > n_conns {
            return Err(GraphFormatError::Corrupt("more edges than connections"));
        }
        let bound = if r < 2 { n_ips } else { n_port };
        for _ in 0..n {
            let conn = c.u32()?;
            let node = c.u32()?;
            if conn >= n_conns || node >= bound {
                return Err(GraphFormatError::Corrupt("edge endpoint out of range"));
            }
            list.push(Edge {
                conn: conn as u32,
                node: node as u32,
            });
        }
    }
    if c.pos != bytes.len() {
        return Err(GraphFormatError::Corrupt("trailing bytes"));
    }
    Ok(WindowGraph {
        window_index,
        ip_ids,
        ip_features,
        port_features,
        conn_features,
        edges,
    })
}

/// One row of the cache manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub window_index: usize,
    pub file: String,
    pub n_ips: usize,
}

pub const GRAPH_MANIFEST: &str = "manifest.csv";

/// Writes one `.fgw` file per graph plus `manifest.csv`.
pub fn write_graph_cache(dir: &Path, graphs: &[Arc<WindowGraph>]) -> Result<Vec<ManifestEntry>, GraphFormatError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(graphs.len());
    for g in graphs {
        let file = format!("window_{:06}.fgw", g.window_index);
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
        f.write_all(&serialize_graph(g))?;
        f.flush()?;
        entries.push(ManifestEntry {
            window_index: g.window_index,
            file,
            n_ips: g.n_ips(),
        });
    }
    let mut w = csv::Writer::from_path(dir.join(GRAPH_MANIFEST))?;
    w.write_record(["window_index", "file", "n_ips"])?;
    for e in &entries {
        w.write_record([e.window_index.to_string(), e.file.clone(), e.n_ips.to_string()])?;
    }
    w.flush()?;
    Ok(entries)
}

/// Loads every graph listed in a cache manifest, in manifest order.
pub fn read_graph_cache(dir: &Path) -> Result<Vec<Arc<WindowGraph>>, GraphFormatError> {
    let mut r = csv::Reader::from_path(dir.join(GRAPH_MANIFEST))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let file: PathBuf = dir.join(rec.get(1).ok_or(GraphFormatError::Corrupt("manifest row"))?);
        let g = deserialize_graph(&std::fs::read(file)?)?;
        out.push(Arc::new(g));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowRecord;

    fn rec(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> FlowRecord {
        FlowRecord {
            src_ip: src.into(),
            dst_ip: dst.into(),
            src_port: sport,
            dst_port: dport,
            protocol: 6,
            start_time: 0,
            numerics: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        }
    }

    fn window(records: Vec<FlowRecord>, index: usize) -> Window {
        Window { index, records }
    }

    #[test]
    fn single_flow_layout() {
        let w = window(vec![rec([1, 0, 0, 1], [1, 0, 0, 2], 51000, 443)], 0);
        let vocab = IpVocabulary::from_records(&w.records);
        let g = build_graph(&w, &vocab, &OheSchema::default(), 8).unwrap();
        assert_eq!(g.n_conns(), 1);
        assert_eq!(g.n_ips(), 2);
        assert_eq!(g.port_features.rows(), 8);
        assert_eq!(g.n_edges(), 4);
        assert!(g.ip_features.data().iter().all(|&x| x == 1.0));
        assert!(g.port_features.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn self_loop_shares_ip_node() {
        let w = window(vec![rec([1, 0, 0, 1], [1, 0, 0, 1], 1, 2)], 0);
        let vocab = IpVocabulary::from_records(&w.records);
        let g = build_graph(&w, &vocab, &OheSchema::default(), 8).unwrap();
        assert_eq!(g.n_ips(), 1);
        assert_eq!(g.edges(Relation::SrcIp)[0].node, 0);
        assert_eq!(g.edges(Relation::DstIp)[0].node, 0);
        assert_eq!(g.n_edges(), 4);
    }

    #[test]
    fn unseen_ips_share_oov_node() {
        let w = window(
            vec![rec([9, 0, 0, 1], [9, 0, 0, 2], 1, 2), rec([1, 0, 0, 1], [9, 0, 0, 3], 1, 2)],
            0,
        );
        let vocab = IpVocabulary::from_records(&[rec([1, 0, 0, 1], [1, 0, 0, 2], 1, 2)]);
        let g = build_graph(&w, &vocab, &OheSchema::default(), 4).unwrap();
        assert_eq!(g.ip_ids, vec![IpVocabulary::OOV, 1]);
        assert_eq!(g.edges(Relation::DstIp)[1].node, 0);
    }

    #[test]
    fn pairing_follows_consecutive_indices() {
        let vocab = IpVocabulary::default();
        let g = |i| {
            Arc::new(build_graph(&window(vec![rec([1, 0, 0, 1], [1, 0, 0, 2], 1, 2)], i), &vocab, &OheSchema::default(), 2).unwrap())
        };
        let pairs = pair_windows(&[g(0), g(1), g(3), g(4)]);
        let idx: Vec<_> = pairs.iter().map(|p| (p.current.window_index, p.next.window_index)).collect();
        assert_eq!(idx, vec![(0, 1), (3, 4)]);
        assert_eq!(pair_windows(&[g(0), g(1), g(2)]).len(), 2);
        assert!(pair_windows(&[g(0)]).is_empty());
    }

    #[test]
    fn targets_compose_vocab_and_port_encoder() {
        let a = [10, 0, 0, 1];
        let b = [10, 0, 0, 2];
        let vocab = IpVocabulary::from_records(&[rec(a, b, 1, 1)]);
        let cur = build_graph(&window(vec![rec(a, b, 1, 1)], 0), &vocab, &OheSchema::default(), 2).unwrap();
        let next = build_graph(
            &window(vec![rec(a, b, 51000, 443), rec([7, 7, 7, 7], a, 53, 80)], 1),
            &vocab,
            &OheSchema::default(),
            2,
        )
        .unwrap();
        let t = structural_targets(&ForecastPair {
            current: Arc::new(cur),
            next: Arc::new(next),
        });
        assert_eq!(t.src_ip, vec![1, IpVocabulary::OOV]);
        assert_eq!(t.dst_ip, vec![2, 1]);
        assert_eq!(t.src_port, vec![PortCategory::DynamicPrivate as u8, PortCategory::Port53 as u8]);
        assert_eq!(t.dst_port, vec![PortCategory::Port443 as u8, PortCategory::WellKnown as u8]);
    }

    #[test]
    fn truncated_and_version_bumped_payloads() {
        let w = window(vec![rec([1, 0, 0, 1], [1, 0, 0, 2], 1, 2)], 3);
        let vocab = IpVocabulary::from_records(&w.records);
        let g = build_graph(&w, &vocab, &OheSchema::default(), 8).unwrap();
        let bytes = serialize_graph(&g);
        assert_eq!(deserialize_graph(&bytes).unwrap(), g);
        assert!(matches!(
            deserialize_graph(&bytes[..bytes.len() - 3]),
            Err(GraphFormatError::Corrupt(_))
        ));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(
            deserialize_graph(&bumped),
            Err(GraphFormatError::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
