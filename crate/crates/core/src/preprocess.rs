//! Categorical encoding, normalization, windowing, splits and the IP vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;

use crate::autodiff::SeededRng;
use crate::flow::FlowRecord;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("{what} value {value} out of range")]
    OutOfRange { what: &'static str, value: i64 },
    #[error("non-finite value in numeric vector")]
    NonFinite,
    #[error("need at least {needed} windows to split, got {got}")]
    TooFewWindows { needed: usize, got: usize },
    #[error("window length {length} and stride {stride} must be equal and positive")]
    BadWindowing { length: usize, stride: usize },
    #[error("split/vocabulary file: {0}")]
    Format(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Port categories in one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PortCategory {
    Port0 = 0,
    Port53 = 1,
    Port123 = 2,
    Port443 = 3,
    WellKnown = 4,
    Registered = 5,
    DynamicPrivate = 6,
}

impl PortCategory {
    pub const ALL: [PortCategory; 7] = [
        Self::Port0,
        Self::Port53,
        Self::Port123,
        Self::Port443,
        Self::WellKnown,
        Self::Registered,
        Self::DynamicPrivate,
    ];

    /// Specific ports win over the range they fall in.
    pub fn classify(port: u16) -> Self {
        match port {
            0 => Self::Port0,
            53 => Self::Port53,
            123 => Self::Port123,
            443 => Self::Port443,
            1..=1023 => Self::WellKnown,
            1024..=49151 => Self::Registered,
            49152..=65535 => Self::DynamicPrivate,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Port0 => "Port0",
            Self::Port53 => "Port53",
            Self::Port123 => "Port123",
            Self::Port443 => "Port443",
            Self::WellKnown => "WellKnown",
            Self::Registered => "Registered",
            Self::DynamicPrivate => "DynamicPrivate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolCategory {
    Icmp = 0,
    Tcp = 1,
    Udp = 2,
    Others = 3,
}

impl ProtocolCategory {
    pub fn classify(proto: u8) -> Self {
        match proto {
            1 => Self::Icmp,
            6 => Self::Tcp,
            17 => Self::Udp,
            _ => Self::Others,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One-hot vector plus the index of its hot position.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    pub index: usize,
    pub vector: Vec<f64>,
}

impl OneHot {
    fn new(index: usize, width: usize) -> Self {
        let mut vector = vec![0.0; width];
        vector[index] = 1.0;
        Self { index, vector }
    }
}

/// Category labels of the one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OheSchema {
    pub port_categories: Vec<String>,
    pub protocol_categories: Vec<String>,
}

impl Default for OheSchema {
    fn default() -> Self {
        Self {
            port_categories: PortCategory::ALL.iter().map(|c| c.label().to_string()).collect(),
            protocol_categories: ["ICMP", "TCP", "UDP", "Others"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl OheSchema {
    pub const N_PORT: usize = 7;
    pub const N_PROTOCOL: usize = 4;

    /// Stable fingerprint recorded next to checkpoints.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in self.port_categories.iter().chain(&self.protocol_categories) {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn encode_port(port: i64) -> Result<OneHot, PreprocessError> {
    let p = u16::try_from(port).map_err(|_| PreprocessError::OutOfRange { what: "port", value: port })?;
    Ok(OneHot::new(PortCategory::classify(p).index(), OheSchema::N_PORT))
}

pub fn encode_protocol(proto: i64) -> Result<OneHot, PreprocessError> {
    let p = u8::try_from(proto).map_err(|_| PreprocessError::OutOfRange {
        what: "protocol",
        value: proto,
    })?;
    Ok(OneHot::new(ProtocolCategory::classify(p).index(), OheSchema::N_PROTOCOL))
}

/// Scales `v` to unit Euclidean norm; the zero vector stays zero.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalized numerics followed by the protocol one-hot (`F + 4` values).
/// Ports are carried by graph edges, not by connection features.
pub fn build_connection_features(r: &FlowRecord, _schema: &OheSchema) -> Result<Vec<f64>, PreprocessError> {
    let mut out = l2_normalize(&r.numerics)?;
    out.extend(encode_protocol(r.protocol as i64)?.vector);
    Ok(out)
}

/// A contiguous block of time-ordered flows.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub records: Vec<FlowRecord>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Cuts non-overlapping windows; a trailing partial window is dropped.
pub fn make_windows(records: &[FlowRecord], length: usize, stride: usize) -> Result<Vec<Window>, PreprocessError> {
    if length == 0 || length != stride {
        return Err(PreprocessError::BadWindowing { length, stride });
    }
    Ok(records
        .chunks_exact(length)
        .enumerate()
        .map(|(index, chunk)| Window {
            index,
            records: chunk.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitLabel {
    type Err = PreprocessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(PreprocessError::Format(format!("unknown split label `{other}`"))),
        }
    }
}

/// Per-window split labels, indexed by position in the window list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub labels: Vec<SplitLabel>,
    pub seed: u64,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.2, 0.1);
pub const MIN_SPLIT_WINDOWS: usize = 10;

impl SplitAssignment {
    pub fn positions(&self, label: SplitLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, label: SplitLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// CSV with columns `window_index,label,seed`.
    pub fn write_csv(&self, windows: &[Window], path: &Path) -> Result<(), PreprocessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["window_index", "label", "seed"])?;
        for (win, label) in windows.iter().zip(&self.labels) {
            w.write_record([win.index.to_string(), label.to_string(), self.seed.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a split CSV, returning `(window_index, label)` rows and the seed.
    pub fn read_csv(path: &Path) -> Result<(Vec<(usize, SplitLabel)>, u64), PreprocessError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut seed = 0;
        for rec in r.records() {
            let rec = rec?;
            let bad = || PreprocessError::Format(format!("bad split row {:?}", rec));
            let idx = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let label = rec.get(1).ok_or_else(bad)?.parse()?;
            seed = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            rows.push((idx, label));
        }
        Ok((rows, seed))
    }
}

/// Random 70/20/10-style split of `n_windows` windows, deterministic in `seed`.
pub fn split_windows(
    n_windows: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, PreprocessError> {
    if n_windows < MIN_SPLIT_WINDOWS {
        return Err(PreprocessError::TooFewWindows {
            needed: MIN_SPLIT_WINDOWS,
            got: n_windows,
        });
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    let n_train = (n_windows as f64 * ratios.0 / total).round() as usize;
    let n_val = (n_windows as f64 * ratios.1 / total).round() as usize;
    let n_val = n_val.min(n_windows - n_train);
    let mut order: Vec<usize> = (0..n_windows).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut labels = vec![SplitLabel::Test; n_windows];
    for (rank, &pos) in order.iter().enumerate() {
        labels[pos] = if rank < n_train {
            SplitLabel::Train
        } else if rank < n_train + n_val {
            SplitLabel::Val
        } else {
            SplitLabel::Test
        };
    }
    Ok(SplitAssignment { labels, seed })
}

/// IPv4 address → id map; id 0 is reserved for out-of-vocabulary addresses.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IpVocabulary {
    ids: HashMap<Ipv4Addr, u32>,
    ips: Vec<Ipv4Addr>,
}

impl IpVocabulary {
    pub const OOV: u32 = 0;

    /// Assigns ids `1..` in order of first appearance (source before destination).
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a FlowRecord>) -> Self {
        let mut v = Self::default();
        for r in records {
            v.insert(r.src_ip);
            v.insert(r.dst_ip);
        }
        v
    }

    fn insert(&mut self, ip: Ipv4Addr) {
        if !self.ids.contains_key(&ip) {
            self.ips.push(ip);
            self.ids.insert(ip, self.ips.len() as u32);
        }
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> u32 {
        self.ids.get(&ip).copied().unwrap_or(Self::OOV)
    }

    /// Address for an id; `None` for the OOV id.
    pub fn ip(&self, id: u32) -> Option<Ipv4Addr> {
        id.checked_sub(1).and_then(|i| self.ips.get(i as usize)).copied()
    }

    /// Number of ids including the OOV id.
    pub fn len(&self) -> usize {
        self.ips.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.ips.is_empty()
    }

    /// CSV with columns `id,ip`, OOV omitted.
    pub fn write_csv(&self, path: &Path) -> Result<(), PreprocessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "ip"])?;
        for (i, ip) in self.ips.iter().enumerate() {
            w.write_record([(i + 1).to_string(), ip.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, PreprocessError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut v = Self::default();
        for rec in r.records() {
            let rec = rec?;
            let bad = || PreprocessError::Format(format!("bad vocabulary row {:?}", rec));
            let id: u32 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let ip: Ipv4Addr = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            v.insert(ip);
            if v.lookup(ip) != id {
                return Err(PreprocessError::Format("vocabulary ids must be contiguous from 1".into()));
            }
        }
        Ok(v)
    }
}

/// Vocabulary over every endpoint of the training windows.
pub fn build_ip_vocabulary(train_windows: &[&Window]) -> IpVocabulary {
    IpVocabulary::from_records(train_windows.iter().flat_map(|w| w.records.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flow(src: [u8; 4], dst: [u8; 4], t: i64) -> FlowRecord {
        FlowRecord {
            src_ip: src.into(),
            dst_ip: dst.into(),
            src_port: 50000,
            dst_port: 443,
            protocol: 6,
            start_time: t,
            numerics: vec![1.0; 5],
        }
    }

    #[test]
    fn table_port_examples() {
        assert_eq!(encode_port(53).unwrap().index, 1);
        assert_eq!(encode_port(80).unwrap().index, PortCategory::WellKnown.index());
        assert_eq!(encode_port(49152).unwrap().index, PortCategory::DynamicPrivate.index());
        assert_eq!(encode_port(1024).unwrap().index, PortCategory::Registered.index());
        assert_eq!(encode_port(1023).unwrap().index, PortCategory::WellKnown.index());
        assert_eq!(encode_port(0).unwrap().index, PortCategory::Port0.index());
        assert_eq!(encode_port(443).unwrap().index, PortCategory::Port443.index());
    }

    #[test]
    fn out_of_range_inputs() {
        assert!(matches!(encode_port(65536), Err(PreprocessError::OutOfRange { .. })));
        assert!(matches!(encode_port(-1), Err(PreprocessError::OutOfRange { .. })));
        assert!(matches!(encode_protocol(256), Err(PreprocessError::OutOfRange { .. })));
    }

    #[test]
    fn protocol_examples() {
        assert_eq!(encode_protocol(6).unwrap().vector, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(encode_protocol(17).unwrap().index, 2);
        assert_eq!(encode_protocol(99).unwrap().index, 3);
        assert_eq!(encode_protocol(1).unwrap().index, 0);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[f64::NAN]), Err(PreprocessError::NonFinite)));
    }

    #[test]
    fn connection_feature_examples() {
        let mut r = flow([1, 1, 1, 1], [2, 2, 2, 2], 0);
        r.numerics = vec![3.0, 4.0, 0.0, 0.0, 0.0];
        let f = build_connection_features(&r, &OheSchema::default()).unwrap();
        let expected = [0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(f.len(), 9);
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        r.protocol = 1;
        r.numerics = vec![0.0; 5];
        let f = build_connection_features(&r, &OheSchema::default()).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_counts() {
        let recs: Vec<_> = (0..1536).map(|t| flow([1, 1, 1, 1], [2, 2, 2, 2], t)).collect();
        assert_eq!(make_windows(&recs, 512, 512).unwrap().len(), 3);
        assert_eq!(make_windows(&recs[..1535], 512, 512).unwrap().len(), 2);
        assert_eq!(make_windows(&recs[..100], 512, 512).unwrap().len(), 0);
        assert!(make_windows(&recs, 512, 256).is_err());
    }

    #[test]
    fn windows_cover_a_prefix_in_order() {
        let recs: Vec<_> = (0..1300).map(|t| flow([1, 1, 1, 1], [2, 2, 2, 2], t)).collect();
        let ws = make_windows(&recs, 512, 512).unwrap();
        let flat: Vec<_> = ws.iter().flat_map(|w| w.records.iter().cloned()).collect();
        assert_eq!(flat, recs[..1024].to_vec());
        assert_eq!(ws.iter().map(|w| w.index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn split_examples() {
        let s = split_windows(10, DEFAULT_SPLIT, 1).unwrap();
        assert_eq!(
            (s.count(SplitLabel::Train), s.count(SplitLabel::Val), s.count(SplitLabel::Test)),
            (7, 2, 1)
        );
        let s = split_windows(100, DEFAULT_SPLIT, 1).unwrap();
        assert_eq!(
            (s.count(SplitLabel::Train), s.count(SplitLabel::Val), s.count(SplitLabel::Test)),
            (70, 20, 10)
        );
        assert_eq!(split_windows(100, DEFAULT_SPLIT, 9).unwrap(), split_windows(100, DEFAULT_SPLIT, 9).unwrap());
        assert!(matches!(
            split_windows(9, DEFAULT_SPLIT, 0),
            Err(PreprocessError::TooFewWindows { .. })
        ));
    }

    #[test]
    fn vocabulary_contract() {
        let w = Window {
            index: 0,
            records: vec![flow([1, 0, 0, 1], [1, 0, 0, 2], 0), flow([1, 0, 0, 3], [1, 0, 0, 1], 1)],
        };
        let v = build_ip_vocabulary(&[&w]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.lookup([1, 0, 0, 1].into()), 1);
        assert_eq!(v.lookup([1, 0, 0, 3].into()), 3);
        assert_eq!(v.lookup([9, 9, 9, 9].into()), IpVocabulary::OOV);
        assert_eq!(v.ip(0), None);
        assert_eq!(v.ip(2), Some([1, 0, 0, 2].into()));
    }

    #[test]
    fn vocabulary_size_ignores_window_order() {
        let a = Window {
            index: 0,
            records: vec![flow([1, 0, 0, 1], [1, 0, 0, 2], 0)],
        };
        let b = Window {
            index: 1,
            records: vec![flow([1, 0, 0, 3], [1, 0, 0, 2], 1)],
        };
        let v1 = build_ip_vocabulary(&[&a, &b]);
        let v2 = build_ip_vocabulary(&[&b, &a]);
        assert_eq!(v1.len(), v2.len());
        let set = |v: &IpVocabulary| {
            let mut ips: Vec<_> = (1..v.len() as u32).filter_map(|i| v.ip(i)).collect();
            ips.sort();
            ips
        };
        assert_eq!(set(&v1), set(&v2));
    }

    fn brute_force_port_table() -> Vec<usize> {
        let mut table = vec![usize::MAX; 65536];
        for (p, slot) in table.iter_mut().enumerate() {
            *slot = if p == 0 {
                0
            } else if p == 53 {
                1
            } else if p == 123 {
                2
            } else if p == 443 {
                3
            } else if p <= 1023 {
                4
            } else if p <= 49151 {
                5
            } else {
                6
            };
        }
        table
    }

    #[test]
    fn port_encoder_matches_exhaustive_table() {
        let table = brute_force_port_table();
        for (p, &expected) in table.iter().enumerate() {
            let oh = encode_port(p as i64).unwrap();
            assert_eq!(oh.index, expected, "port {p}");
            assert_eq!(oh.vector.iter().sum::<f64>(), 1.0);
        }
    }

    proptest! {
        #[test]
        fn l2_norm_is_zero_or_one(v in proptest::collection::vec(-1e6f64..1e6, 0..12)) {
            let n: f64 = l2_normalize(&v).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n.abs() < 1e-9 || (n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn split_within_one_window(n in 10usize..600, seed in any::<u64>()) {
            let s = split_windows(n, DEFAULT_SPLIT, seed).unwrap();
            let nf = n as f64;
            prop_assert!((s.count(SplitLabel::Train) as f64 - 0.7 * nf).abs() <= 1.0);
            prop_assert!((s.count(SplitLabel::Val) as f64 - 0.2 * nf).abs() <= 1.0);
            prop_assert!((s.count(SplitLabel::Test) as f64 - 0.1 * nf).abs() <= 1.0);
            prop_assert_eq!(s.labels.len(), n);
        }
    }
}
