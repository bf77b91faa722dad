//! Windowed, split and graph-cached flow data.

use std::path::Path;
use std::sync::Arc;

use crate::config::{ConfigError, KvConfig};
use crate::flow::{parse_flow_csv, write_flow_csv, FlowError, FlowRecord, FlowSchema};
use crate::graph::{build_graph, read_graph_cache, write_graph_cache, GraphFormatError, WindowGraph};
use crate::model::{DataDims, Example};
use crate::preprocess::{
    build_ip_vocabulary, make_windows, split_windows, IpVocabulary, OheSchema, PreprocessError, SplitAssignment,
    SplitLabel, Window, DEFAULT_SPLIT,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Graph(#[from] GraphFormatError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset directory inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub window_length: usize,
    pub stride: usize,
    pub split_seed: u64,
    pub split: (f64, f64, f64),
    pub placeholder_width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window_length: 512,
            stride: 512,
            split_seed: 0,
            split: DEFAULT_SPLIT,
            placeholder_width: crate::graph::DEFAULT_PLACEHOLDER_WIDTH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub schema: OheSchema,
    pub flow_schema: FlowSchema,
    pub windows: Vec<Arc<Window>>,
    pub graphs: Vec<Arc<WindowGraph>>,
    pub split: SplitAssignment,
    pub vocab: IpVocabulary,
}

pub const DATASET_META: &str = "dataset.txt";

impl Dataset {
    /// Windows the time-ordered `records`, splits the windows, builds the
    /// vocabulary from the training windows and builds one graph per window.
    pub fn build(records: &[FlowRecord], flow_schema: FlowSchema, config: DatasetConfig) -> Result<Self, DatasetError> {
        let windows = make_windows(records, config.window_length, config.stride)?;
        let split = split_windows(windows.len(), config.split, config.split_seed)?;
        let train: Vec<&Window> = split.positions(SplitLabel::Train).into_iter().map(|i| &windows[i]).collect();
        let vocab = build_ip_vocabulary(&train);
        let schema = OheSchema::default();
        let graphs = windows
            .iter()
            .map(|w| build_graph(w, &vocab, &schema, config.placeholder_width).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            schema,
            flow_schema,
            windows: windows.into_iter().map(Arc::new).collect(),
            graphs,
            split,
            vocab,
        })
    }

    pub fn n_numerics(&self) -> usize {
        self.flow_schema.n_numerics()
    }

    pub fn conn_width(&self) -> usize {
        self.n_numerics() + OheSchema::N_PROTOCOL
    }

    pub fn dims(&self) -> DataDims {
        DataDims {
            window_length: self.config.window_length,
            n_numerics: self.n_numerics(),
            conn_width: self.conn_width(),
            placeholder_width: self.config.placeholder_width,
            vocab_size: self.vocab.len(),
        }
    }

    /// Consecutive-window examples whose current window carries `label`.
    pub fn examples(&self, label: SplitLabel) -> Vec<Example> {
        (0..self.windows.len().saturating_sub(1))
            .filter(|&i| self.split.labels[i] == label)
            .filter(|&i| self.windows[i + 1].index == self.windows[i].index + 1)
            .map(|i| {
                Example::new(
                    Arc::clone(&self.graphs[i]),
                    Arc::clone(&self.graphs[i + 1]),
                    Arc::clone(&self.windows[i]),
                )
            })
            .collect()
    }

    /// Writes the flows, vocabulary, split, graph cache and metadata.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        let flows: Vec<FlowRecord> = self.windows.iter().flat_map(|w| w.records.iter().cloned()).collect();
        // Stored under the default column names, keeping the numeric fields.
        let stored = FlowSchema {
            numerics: self.flow_schema.numerics.clone(),
            ..FlowSchema::default()
        };
        write_flow_csv(&dir.join("flows.csv"), &flows, &stored)?;
        self.vocab.write_csv(&dir.join("vocab.csv"))?;
        let windows: Vec<Window> = self.windows.iter().map(|w| w.as_ref().clone()).collect();
        self.split.write_csv(&windows, &dir.join("split.csv"))?;
        write_graph_cache(&dir.join("graphs"), &self.graphs)?;
        let mut meta = KvConfig::new();
        meta.set("window_length", self.config.window_length);
        meta.set("stride", self.config.stride);
        meta.set("split_seed", self.config.split_seed);
        meta.set("split_train", self.config.split.0);
        meta.set("split_val", self.config.split.1);
        meta.set("split_test", self.config.split.2);
        meta.set("placeholder_width", self.config.placeholder_width);
        meta.set("n_windows", self.windows.len());
        meta.set("n_numerics", self.n_numerics());
        meta.set("numeric_columns", self.flow_schema.numerics.join(" "));
        meta.set("vocab_size", self.vocab.len());
        meta.set("schema_hash", self.schema.fingerprint());
        meta.write(&dir.join(DATASET_META))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let meta = KvConfig::read(&dir.join(DATASET_META))?;
        let schema = OheSchema::default();
        let hash: String = meta.require("schema_hash")?;
        if hash != schema.fingerprint() {
            return Err(DatasetError::Inconsistent(format!(
                "encoding schema {hash} differs from this build's {}",
                schema.fingerprint()
            )));
        }
        let config = DatasetConfig {
            window_length: meta.require("window_length")?,
            stride: meta.require("stride")?,
            split_seed: meta.require("split_seed")?,
            split: (
                meta.require("split_train")?,
                meta.require("split_val")?,
                meta.require("split_test")?,
            ),
            placeholder_width: meta.require("placeholder_width")?,
        };
        let mut flow_schema = FlowSchema::default();
        let cols: String = meta.require("numeric_columns")?;
        flow_schema.numerics = cols.split_whitespace().map(str::to_string).collect();
        let records = parse_flow_csv(&dir.join("flows.csv"), &flow_schema)?;
        let windows = make_windows(&records, config.window_length, config.stride)?;
        let vocab = IpVocabulary::read_csv(&dir.join("vocab.csv"))?;
        let (rows, seed) = SplitAssignment::read_csv(&dir.join("split.csv"))?;
        let graphs = read_graph_cache(&dir.join("graphs"))?;
        let n: usize = meta.require("n_windows")?;
        if windows.len() != n || graphs.len() != n || rows.len() != n {
            return Err(DatasetError::Inconsistent(format!(
                "{n} windows declared, found {} windows, {} graphs, {} split rows",
                windows.len(),
                graphs.len(),
                rows.len()
            )));
        }
        if windows.iter().zip(&graphs).zip(&rows).any(|((w, g), r)| w.index != g.window_index || w.index != r.0) {
            return Err(DatasetError::Inconsistent("window indices disagree".into()));
        }
        if vocab.len() != meta.require::<usize>("vocab_size")? {
            return Err(DatasetError::Inconsistent("vocabulary size disagrees".into()));
        }
        Ok(Self {
            config,
            schema,
            flow_schema,
            windows: windows.into_iter().map(Arc::new).collect(),
            graphs,
            split: SplitAssignment {
                labels: rows.into_iter().map(|r| r.1).collect(),
                seed,
            },
            vocab,
        })
    }
}
