//! Flow records: CSV ingestion, serialization and synthetic traces.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::path::Path;

use crate::autodiff::SeededRng;

/// Names of the default numeric counters, in column order.
pub const DEFAULT_NUMERIC_FIELDS: [&str; 5] = [
    "duration_ms",
    "bytes_src_dst",
    "bytes_dst_src",
    "packets_src_dst",
    "packets_dst_src",
];

/// One summarized connection.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    /// Microseconds since the Unix epoch.
    pub start_time: i64,
    pub numerics: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("flow file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("header lacks column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {reason}")]
    MalformedRow {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("invalid trace config: {0}")]
    InvalidConfig(String),
}

/// Maps each flow field to a CSV column name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSchema {
    pub src_ip: String,
    pub dst_ip: String,
    pub src_port: String,
    pub dst_port: String,
    pub protocol: String,
    pub start_time: String,
    pub numerics: Vec<String>,
}

impl Default for FlowSchema {
    fn default() -> Self {
        Self {
            src_ip: "src_ip".into(),
            dst_ip: "dst_ip".into(),
            src_port: "src_port".into(),
            dst_port: "dst_port".into(),
            protocol: "protocol".into(),
            start_time: "start_time".into(),
            numerics: DEFAULT_NUMERIC_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl FlowSchema {
    pub fn n_numerics(&self) -> usize {
        self.numerics.len()
    }

    fn header(&self) -> Vec<&str> {
        let mut h = vec![
            self.src_ip.as_str(),
            self.dst_ip.as_str(),
            self.src_port.as_str(),
            self.dst_port.as_str(),
            self.protocol.as_str(),
            self.start_time.as_str(),
        ];
        h.extend(self.numerics.iter().map(String::as_str));
        h
    }
}

fn malformed(row: usize, column: &str, reason: impl Into<String>) -> FlowError {
    FlowError::MalformedRow {
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

fn parse_int(raw: &str, row: usize, column: &str, max: i64) -> Result<i64, FlowError> {
    let v: i64 = raw
        .trim()
        .parse()
        .map_err(|_| malformed(row, column, format!("`{raw}` is not an integer")))?;
    if !(0..=max).contains(&v) {
        return Err(malformed(row, column, format!("{v} outside [0, {max}]")));
    }
    Ok(v)
}

/// Parses flows from any CSV reader. `row` numbers in errors count data
/// rows from 1.
pub fn parse_flows<R: std::io::Read>(reader: R, schema: &FlowSchema) -> Result<Vec<FlowRecord>, FlowError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let col = |name: &str| -> Result<usize, FlowError> {
        position
            .get(name)
            .copied()
            .ok_or_else(|| FlowError::MissingColumn(name.to_string()))
    };
    let (c_src, c_dst) = (col(&schema.src_ip)?, col(&schema.dst_ip)?);
    let (c_sport, c_dport) = (col(&schema.src_port)?, col(&schema.dst_port)?);
    let (c_proto, c_time) = (col(&schema.protocol)?, col(&schema.start_time)?);
    let c_nums = schema.numerics.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize, name: &str| -> Result<&str, FlowError> {
            rec.get(c).ok_or_else(|| malformed(row, name, "missing field"))
        };
        let ip = |c: usize, name: &str| -> Result<Ipv4Addr, FlowError> {
            let raw = field(c, name)?;
            raw.trim()
                .parse()
                .map_err(|_| malformed(row, name, format!("`{raw}` is not an IPv4 address")))
        };
        let src_ip = ip(c_src, &schema.src_ip)?;
        let dst_ip = ip(c_dst, &schema.dst_ip)?;
        let src_port = parse_int(field(c_sport, &schema.src_port)?, row, &schema.src_port, 65535)? as u16;
        let dst_port = parse_int(field(c_dport, &schema.dst_port)?, row, &schema.dst_port, 65535)? as u16;
        let protocol = parse_int(field(c_proto, &schema.protocol)?, row, &schema.protocol, 255)? as u8;
        let start_time = parse_int(field(c_time, &schema.start_time)?, row, &schema.start_time, i64::MAX)?;
        let mut numerics = Vec::with_capacity(c_nums.len());
        for (&c, name) in c_nums.iter().zip(&schema.numerics) {
            let raw = field(c, name)?;
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| malformed(row, name, format!("`{raw}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(malformed(row, name, format!("{v} is not a finite non-negative value")));
            }
            numerics.push(v);
        }
        out.push(FlowRecord {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            protocol,
            start_time,
            numerics,
        });
    }
    Ok(out)
}

/// Reads a flow CSV in file order.
pub fn parse_flow_csv(path: &Path, schema: &FlowSchema) -> Result<Vec<FlowRecord>, FlowError> {
    let file = std::fs::File::open(path)?;
    parse_flows(file, schema)
}

/// Writes flows in the layout [`parse_flows`] reads back exactly.
pub fn write_flows<W: std::io::Write>(
    writer: W,
    records: &[FlowRecord],
    schema: &FlowSchema,
) -> Result<(), FlowError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.header())?;
    for r in records {
        let mut row = vec![
            r.src_ip.to_string(),
            r.dst_ip.to_string(),
            r.src_port.to_string(),
            r.dst_port.to_string(),
            r.protocol.to_string(),
            r.start_time.to_string(),
        ];
        // `Display` for f64 prints the shortest string that parses back to the same bits.
        row.extend(r.numerics.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flow_csv(path: &Path, records: &[FlowRecord], schema: &FlowSchema) -> Result<(), FlowError> {
    let file = std::fs::File::create(path)?;
    write_flows(std::io::BufWriter::new(file), records, schema)
}

/// Stable sort by start time.
pub fn sort_by_start(mut records: Vec<FlowRecord>) -> Vec<FlowRecord> {
    records.sort_by_key(|r| r.start_time);
    records
}

/// Parameters of the synthetic trace generator.
///
/// The trace is a rotation over `session_slots` recurring sessions: flow
/// `n` is emitted by session `n % session_slots`, and before each emission
/// the session is replaced by a freshly drawn one with probability `churn`.
/// Each session has a source drawn from the two-tier pool (a heavy talker
/// with probability `heavy_talker_weight`), an independently drawn
/// destination and its own counter profile.
///
/// Every host also has a persistent profile: a duration-per-byte rate it
/// shows when it initiates, a response ratio it shows when it answers, and
/// one service port it hosts. A session's destination port is its
/// responder's service with probability `service_affinity` and a draw from
/// `service_port_mix` otherwise. `host_profile_spread` is the log-scale
/// standard deviation of the rates and ratios; 0 makes all hosts alike.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub n_flows: usize,
    pub n_heavy_ips: usize,
    pub n_background_ips: usize,
    pub service_port_mix: Vec<(u16, f64)>,
    pub heavy_talker_weight: f64,
    pub seed: u64,
    pub session_slots: usize,
    pub churn: f64,
    pub host_profile_spread: f64,
    pub service_affinity: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_flows: 10_000,
            n_heavy_ips: 4,
            n_background_ips: 8,
            service_port_mix: vec![
                (443, 0.35),
                (53, 0.15),
                (80, 0.15),
                (123, 0.05),
                (22, 0.05),
                (8080, 0.1),
                (3389, 0.05),
                (0, 0.02),
                (51820, 0.08),
            ],
            heavy_talker_weight: 0.8,
            seed: 42,
            session_slots: 64,
            churn: 0.02,
            host_profile_spread: 1.0,
            service_affinity: 0.85,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.to_string()));
        if self.n_heavy_ips == 0 || self.n_background_ips == 0 {
            return bad("IP pool sizes must be positive");
        }
        if self.n_heavy_ips + self.n_background_ips < 2 {
            return bad("need at least two IPs");
        }
        if self.n_heavy_ips + self.n_background_ips > 65_000 {
            return bad("IP pools limited to 65000 addresses");
        }
        if self.session_slots == 0 {
            return bad("session_slots must be positive");
        }
        if !(self.heavy_talker_weight > 0.0 && self.heavy_talker_weight < 1.0) {
            return bad("heavy_talker_weight must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.churn) {
            return bad("churn must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.service_affinity) {
            return bad("service_affinity must lie in [0, 1]");
        }
        if !(self.host_profile_spread >= 0.0 && self.host_profile_spread.is_finite()) {
            return bad("host_profile_spread must be finite and non-negative");
        }
        if self.service_port_mix.is_empty() || self.service_port_mix.iter().any(|(_, p)| !(*p >= 0.0)) {
            return bad("service_port_mix must be non-empty with non-negative probabilities");
        }
        let total: f64 = self.service_port_mix.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("service_port_mix probabilities must sum to 1");
        }
        Ok(())
    }

    /// Heavy-talker addresses, in pool order.
    pub fn heavy_ips(&self) -> Vec<Ipv4Addr> {
        (0..self.n_heavy_ips).map(|i| pool_ip(10, i)).collect()
    }

    pub fn background_ips(&self) -> Vec<Ipv4Addr> {
        (0..self.n_background_ips).map(|i| pool_ip(172, i)).collect()
    }
}

fn pool_ip(first: u8, i: usize) -> Ipv4Addr {
    Ipv4Addr::new(first, 16, (i / 250) as u8, (i % 250 + 1) as u8)
}

#[derive(Debug, Clone)]
struct Session {
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    protocol: u8,
    profile: [f64; 5],
}

#[derive(Debug, Clone)]
struct Host {
    ip: Ipv4Addr,
    rate: f64,
    ratio: f64,
    service: u16,
}

struct SessionSampler<'a> {
    cfg: &'a TraceConfig,
    /// Heavy hosts first, then background hosts.
    hosts: Vec<Host>,
    heavy_weights: Vec<f64>,
    port_weights: Vec<f64>,
}

impl<'a> SessionSampler<'a> {
    fn new(cfg: &'a TraceConfig, rng: &mut SeededRng) -> Self {
        let port_weights: Vec<f64> = cfg.service_port_mix.iter().map(|(_, p)| *p).collect();
        let spread = cfg.host_profile_spread;
        let hosts = cfg
            .heavy_ips()
            .into_iter()
            .chain(cfg.background_ips())
            .map(|ip| Host {
                ip,
                rate: rng.normal(0.0, spread).exp(),
                ratio: rng.normal(0.0, spread).exp(),
                service: cfg.service_port_mix[rng.weighted(&port_weights)].0,
            })
            .collect();
        Self {
            cfg,
            hosts,
            // Zipf-like ranking inside the heavy tier.
            heavy_weights: (0..cfg.n_heavy_ips).map(|i| 1.0 / (i + 1) as f64).collect(),
            port_weights,
        }
    }

    fn endpoint(&self, rng: &mut SeededRng) -> usize {
        if rng.bernoulli(self.cfg.heavy_talker_weight) {
            rng.weighted(&self.heavy_weights)
        } else {
            self.cfg.n_heavy_ips + rng.below(self.cfg.n_background_ips)
        }
    }

    fn draw(&self, rng: &mut SeededRng) -> Session {
        let src = self.endpoint(rng);
        let mut dst = self.endpoint(rng);
        while dst == src {
            dst = self.endpoint(rng);
        }
        let (src, dst) = (&self.hosts[src], &self.hosts[dst]);
        let dst_port = if rng.bernoulli(self.cfg.service_affinity) {
            dst.service
        } else {
            self.cfg.service_port_mix[rng.weighted(&self.port_weights)].0
        };
        let src_port = if rng.bernoulli(0.85) {
            49152 + rng.below(16384) as u16
        } else {
            1024 + rng.below(48128) as u16
        };
        let protocol = match dst_port {
            0 => 1,
            53 | 123 | 51820 => 17,
            _ if rng.bernoulli(0.03) => 47,
            _ => 6,
        };
        let bytes_out = (rng.normal(6.5, 1.2)).exp();
        let duration = bytes_out * src.rate * rng.normal(0.0, 0.2).exp();
        let bytes_in = bytes_out * dst.ratio * rng.normal(0.0, 0.2).exp();
        let pkt_out = (bytes_out / rng.uniform_range(200.0, 1400.0)).ceil();
        let pkt_in = (bytes_in / rng.uniform_range(200.0, 1400.0)).ceil();
        Session {
            src_ip: src.ip,
            dst_ip: dst.ip,
            src_port,
            dst_port,
            protocol,
            profile: [duration, bytes_out, bytes_in, pkt_out, pkt_in],
        }
    }
}

/// Generates a deterministic synthetic trace; see [`TraceConfig`].
pub fn generate_synthetic_trace(cfg: &TraceConfig) -> Result<Vec<FlowRecord>, FlowError> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let sampler = SessionSampler::new(cfg, &mut rng);
    let mut sessions: Vec<Session> = (0..cfg.session_slots).map(|_| sampler.draw(&mut rng)).collect();
    let mut t: i64 = 1_700_000_000_000_000;
    let mut out = Vec::with_capacity(cfg.n_flows);
    for n in 0..cfg.n_flows {
        let slot = n % cfg.session_slots;
        if rng.bernoulli(cfg.churn) {
            sessions[slot] = sampler.draw(&mut rng);
        }
        let s = &sessions[slot];
        t += 1 + rng.below(2_000) as i64;
        let jitter = |rng: &mut SeededRng, v: f64| (v * rng.normal(0.0, 0.1).exp() * 1000.0).round() / 1000.0;
        let mut numerics = Vec::with_capacity(5);
        for (k, &base) in s.profile.iter().enumerate() {
            let v = jitter(&mut rng, base);
            numerics.push(if k >= 3 { v.round().max(1.0) } else { v });
        }
        out.push(FlowRecord {
            src_ip: s.src_ip,
            dst_ip: s.dst_ip,
            src_port: s.src_port,
            dst_port: s.dst_port,
            protocol: s.protocol,
            start_time: t,
            numerics,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "src_ip,dst_ip,src_port,dst_port,protocol,start_time,duration_ms,bytes_src_dst,bytes_dst_src,packets_src_dst,packets_dst_src\n";

    #[test]
    fn parses_example_row() {
        let csv = format!("{HEADER}10.0.0.1,10.0.0.2,51000,443,6,1000,12.5,300,900,4,6\n");
        let recs = parse_flows(csv.as_bytes(), &FlowSchema::default()).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!((r.src_port, r.dst_port, r.protocol), (51000, 443, 6));
        assert_eq!(r.numerics, vec![12.5, 300.0, 900.0, 4.0, 6.0]);
        assert_eq!(r.src_ip, Ipv4Addr::new(10, 0, 0, 1));
        assert_eq!(r.start_time, 1000);
    }

    #[test]
    fn port_out_of_range_is_malformed() {
        let csv = format!("{HEADER}10.0.0.1,10.0.0.2,70000,443,6,1000,12.5,300,900,4,6\n");
        match parse_flows(csv.as_bytes(), &FlowSchema::default()) {
            Err(FlowError::MalformedRow { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "src_port");
            }
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_reports_row() {
        let csv = format!(
            "{HEADER}10.0.0.1,10.0.0.2,1,2,6,1,1,1,1,1,1\n10.0.0.1,10.0.0.2,1,2,6,2,x,1,1,1,1\n"
        );
        assert!(matches!(
            parse_flows(csv.as_bytes(), &FlowSchema::default()),
            Err(FlowError::MalformedRow { row: 2, .. })
        ));
    }

    #[test]
    fn header_only_and_empty_files_give_no_records() {
        assert!(parse_flows(HEADER.as_bytes(), &FlowSchema::default()).unwrap().is_empty());
        assert!(parse_flows("".as_bytes(), &FlowSchema::default()).unwrap().is_empty());
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "src_ip,dst_ip\n";
        match parse_flows(csv.as_bytes(), &FlowSchema::default()) {
            Err(FlowError::MissingColumn(c)) => assert_eq!(c, "src_port"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn custom_schema_changes_numeric_width() {
        let schema = FlowSchema {
            numerics: vec!["bytes".into()],
            ..FlowSchema::default()
        };
        let csv = "bytes,src_ip,dst_ip,src_port,dst_port,protocol,start_time\n5,1.2.3.4,5.6.7.8,1,2,17,9\n";
        let recs = parse_flows(csv.as_bytes(), &schema).unwrap();
        assert_eq!(recs[0].numerics, vec![5.0]);
    }

    #[test]
    fn zero_flows_gives_empty_trace() {
        let cfg = TraceConfig {
            n_flows: 0,
            ..TraceConfig::default()
        };
        assert!(generate_synthetic_trace(&cfg).unwrap().is_empty());
    }

    #[test]
    fn trace_is_deterministic_and_time_ordered() {
        let cfg = TraceConfig {
            n_flows: 2_000,
            ..TraceConfig::default()
        };
        let a = generate_synthetic_trace(&cfg).unwrap();
        let b = generate_synthetic_trace(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].start_time < w[1].start_time));
        assert!(a.iter().all(|r| r.src_ip != r.dst_ip));
    }

    #[test]
    fn heavy_talkers_dominate() {
        let cfg = TraceConfig {
            n_flows: 10_000,
            n_heavy_ips: 4,
            heavy_talker_weight: 0.8,
            ..TraceConfig::default()
        };
        let heavy = cfg.heavy_ips();
        let trace = generate_synthetic_trace(&cfg).unwrap();
        let hits = trace
            .iter()
            .filter(|r| heavy.contains(&r.src_ip) || heavy.contains(&r.dst_ip))
            .count();
        assert!(hits as f64 >= 0.7 * trace.len() as f64, "{hits}");
    }

    #[test]
    fn destination_ports_come_from_the_mix() {
        let cfg = TraceConfig {
            n_flows: 3_000,
            ..TraceConfig::default()
        };
        let ports: Vec<u16> = cfg.service_port_mix.iter().map(|(p, _)| *p).collect();
        for r in generate_synthetic_trace(&cfg).unwrap() {
            assert!(ports.contains(&r.dst_port));
        }
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let cfg = TraceConfig {
            service_port_mix: vec![(443, 0.5), (53, 0.4)],
            ..TraceConfig::default()
        };
        assert!(matches!(generate_synthetic_trace(&cfg), Err(FlowError::InvalidConfig(_))));
    }

    #[test]
    fn sort_is_stable() {
        let base = generate_synthetic_trace(&TraceConfig {
            n_flows: 4,
            ..TraceConfig::default()
        })
        .unwrap();
        let mut recs = base.clone();
        recs[0].start_time = 10;
        recs[1].start_time = 5;
        recs[2].start_time = 10;
        recs[3].start_time = 1;
        let sorted = sort_by_start(recs.clone());
        assert_eq!(sorted[0], recs[3]);
        assert_eq!(sorted[1], recs[1]);
        assert_eq!(sorted[2], recs[0]);
        assert_eq!(sorted[3], recs[2]);
        assert!(sort_by_start(Vec::new()).is_empty());
        assert_eq!(sort_by_start(base.clone()), base);
    }
}
