use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use flowcast::autodiff::{load_checkpoint, save_checkpoint, CheckpointError};
use flowcast::config::{ConfigError, KvConfig};
use flowcast::dataset::{Dataset, DatasetConfig, DatasetError, DATASET_META};
use flowcast::flow::{generate_synthetic_trace, parse_flow_csv, sort_by_start, FlowError, FlowSchema, TraceConfig};
use flowcast::graph::{build_graph, write_graph_cache};
use flowcast::hpo::{assignment_config, run_study, write_best, ObjectiveFailure, SearchSpace, StudyConfig};
use flowcast::model::{build_model, hyper_keys, model_from_sidecar, ModelError, ModelKind};
use flowcast::preprocess::{make_windows, IpVocabulary, OheSchema, PreprocessError, SplitLabel};
use flowcast::trainer::{evaluate, train, write_history, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "flowcast", version, about = "Per-flow NetFlow forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A flat config file plus `--set key=value` overrides, which win.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flow trace.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window a trace, split it and cache one graph per window.
    Windows {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 512)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = flowcast::graph::DEFAULT_PLACEHOLDER_WIDTH)]
        placeholder_width: usize,
    },
    /// Train one model and keep its best-validation checkpoint.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search hyperparameters for one model kind.
    Tune {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitLabel,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluation reports side by side.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Runtime(m) => m,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn data(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(format!("{:#}", e.into())))
    }
    fn data(self) -> Outcome<T> {
        self.map_err(|e| Failure::Data(format!("{:#}", e.into())))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(format!("{:#}", e.into())))
    }
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Io(e) => Failure::Data(format!("config: {e}")),
        other => Failure::Usage(other.to_string()),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::InvalidHyper(_) | ModelError::KernelTooLarge { .. } | ModelError::Config(_) => {
            Failure::Usage(e.to_string())
        }
        ModelError::Incompatible(_) => Failure::Data(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Model(m) => model_failure(m),
        TrainError::EmptySplit(_) => Failure::Data(e.to_string()),
        TrainError::InvalidConfig(_) => Failure::Usage(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    }
}

fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::Config(c) => Failure::Data(format!("dataset metadata: {c}")),
        other => Failure::Data(other.to_string()),
    }
}

impl Overrides {
    /// The config file overlaid with `--set` pairs, restricted to `allowed`.
    fn resolve(&self, allowed: &[&str]) -> Outcome<KvConfig> {
        let mut c = match &self.config {
            Some(p) if !p.exists() => return Err(Failure::Data(format!("config file {} not found", p.display()))),
            Some(p) => KvConfig::read(p).map_err(config_failure)?,
            None => KvConfig::new(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            c.set(k.trim(), v.trim());
        }
        c.check_keys(allowed).map_err(config_failure)?;
        Ok(c)
    }
}

/// Written before a command does any work.
struct RunManifest<'a> {
    command: &'a str,
    config: Option<&'a Path>,
    params: &'a KvConfig,
    out: &'a Path,
    seeds: Vec<(&'a str, u64)>,
}

impl RunManifest<'_> {
    fn write(&self, path: &Path) -> Outcome<()> {
        let mut m = KvConfig::new();
        m.set("command", self.command);
        m.set("config", self.config.map_or("none".to_string(), |p| p.display().to_string()));
        m.set("out", self.out.display());
        m.set("version", env!("CARGO_PKG_VERSION"));
        for (name, seed) in &self.seeds {
            m.set(&format!("seed.{name}"), seed);
        }
        for (k, v) in self.params.iter() {
            m.set(&format!("param.{k}"), v);
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).runtime()?;
        }
        m.write(path).runtime()
    }
}

fn sibling_manifest(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    file.with_file_name(name)
}

const TRACE_KEYS: &[&str] = &[
    "n_flows",
    "n_heavy_ips",
    "n_background_ips",
    "service_port_mix",
    "heavy_talker_weight",
    "seed",
    "session_slots",
    "churn",
    "host_profile_spread",
    "service_affinity",
];

const TRAIN_KEYS: &[&str] = &["epochs", "batch_size", "grad_accumulation", "seed", "threads"];

fn trace_config(c: &KvConfig) -> Outcome<TraceConfig> {
    let d = TraceConfig::default();
    let mix = match c.get_str("service_port_mix") {
        None => d.service_port_mix.clone(),
        Some(s) => s
            .split(',')
            .map(|item| {
                let (p, w) = item.split_once(':')?;
                Some((p.trim().parse().ok()?, w.trim().parse().ok()?))
            })
            .collect::<Option<Vec<(u16, f64)>>>()
            .ok_or_else(|| Failure::Usage(format!("service_port_mix: expected `port:weight,...`, got `{s}`")))?,
    };
    let g = |e| config_failure(e);
    Ok(TraceConfig {
        n_flows: c.get_or("n_flows", d.n_flows).map_err(g)?,
        n_heavy_ips: c.get_or("n_heavy_ips", d.n_heavy_ips).map_err(g)?,
        n_background_ips: c.get_or("n_background_ips", d.n_background_ips).map_err(g)?,
        service_port_mix: mix,
        heavy_talker_weight: c.get_or("heavy_talker_weight", d.heavy_talker_weight).map_err(g)?,
        seed: c.get_or("seed", d.seed).map_err(g)?,
        session_slots: c.get_or("session_slots", d.session_slots).map_err(g)?,
        churn: c.get_or("churn", d.churn).map_err(g)?,
        host_profile_spread: c.get_or("host_profile_spread", d.host_profile_spread).map_err(g)?,
        service_affinity: c.get_or("service_affinity", d.service_affinity).map_err(g)?,
    })
}

fn train_config(kind: ModelKind, c: &KvConfig) -> Outcome<TrainConfig> {
    let d = TrainConfig::for_model(kind);
    let g = |e| config_failure(e);
    Ok(TrainConfig {
        epochs: c.get_or("epochs", d.epochs).map_err(g)?,
        batch_size: c.get_or("batch_size", d.batch_size).map_err(g)?,
        grad_accumulation: c.get_or("grad_accumulation", d.grad_accumulation).map_err(g)?,
        seed: c.get_or("seed", d.seed).map_err(g)?,
        threads: c.get_or("threads", d.threads).map_err(g)?,
    })
}

fn synth(overrides: &Overrides, out: &Path) -> Outcome<()> {
    let params = overrides.resolve(TRACE_KEYS)?;
    let cfg = trace_config(&params)?;
    RunManifest {
        command: "synth",
        config: overrides.config.as_deref(),
        params: &params,
        out,
        seeds: vec![("trace", cfg.seed)],
    }
    .write(&sibling_manifest(out))?;
    let records = generate_synthetic_trace(&cfg).map_err(|e| match e {
        FlowError::InvalidConfig(m) => Failure::Usage(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    flowcast::flow::write_flow_csv(out, &records, &FlowSchema::default()).data()?;
    println!("wrote {} flows to {}", records.len(), out.display());
    Ok(())
}

fn windows(flows: &Path, out: &Path, config: DatasetConfig) -> Outcome<()> {
    let mut params = KvConfig::new();
    params.set("flows", flows.display());
    params.set("length", config.window_length);
    params.set("stride", config.stride);
    params.set("placeholder_width", config.placeholder_width);
    RunManifest {
        command: "windows",
        config: None,
        params: &params,
        out,
        seeds: vec![("split", config.split_seed)],
    }
    .write(&out.join("manifest.txt"))?;
    let schema = FlowSchema::default();
    let records = sort_by_start(parse_flow_csv(flows, &schema).data()?);
    match Dataset::build(&records, schema, config.clone()) {
        Ok(ds) => {
            ds.save(out).map_err(dataset_failure)?;
            println!(
                "{} windows ({} train, {} val, {} test), vocabulary of {}",
                ds.windows.len(),
                ds.split.count(SplitLabel::Train),
                ds.split.count(SplitLabel::Val),
                ds.split.count(SplitLabel::Test),
                ds.vocab.len()
            );
            Ok(())
        }
        Err(DatasetError::Preprocess(PreprocessError::TooFewWindows { needed, got })) => {
            // Too short to split: cache the graphs over an all-window
            // vocabulary and mark the directory as unsplit.
            let windows = make_windows(&records, config.window_length, config.stride).usage()?;
            let vocab = IpVocabulary::from_records(&records);
            let ohe = OheSchema::default();
            let graphs = windows
                .iter()
                .map(|w| build_graph(w, &vocab, &ohe, config.placeholder_width).map(Arc::new))
                .collect::<Result<Vec<_>, _>>()
                .data()?;
            write_graph_cache(&out.join("graphs"), &graphs).data()?;
            vocab.write_csv(&out.join("vocab.csv")).data()?;
            let mut meta = KvConfig::new();
            meta.set("split", "none");
            meta.set("n_windows", graphs.len());
            meta.set("window_length", config.window_length);
            meta.set("vocab_size", vocab.len());
            meta.set("schema_hash", ohe.fingerprint());
            meta.write(&out.join(DATASET_META)).runtime()?;
            eprintln!("warning: {got} windows is too few to split (need {needed}); graphs cached without a split");
            println!("{} windows, vocabulary of {}", graphs.len(), vocab.len());
            Ok(())
        }
        Err(e) => Err(dataset_failure(e)),
    }
}

fn load_dataset(dir: &Path) -> Outcome<Dataset> {
    let meta_path = dir.join(DATASET_META);
    if !meta_path.exists() {
        return Err(Failure::Data(format!("{} is not a dataset directory", dir.display())));
    }
    let meta = KvConfig::read(&meta_path).map_err(|e| Failure::Data(e.to_string()))?;
    if meta.get_str("split") == Some("none") {
        return Err(Failure::Data(format!(
            "{} has too few windows to split; re-run `windows` on a longer trace",
            dir.display()
        )));
    }
    Dataset::load(dir).map_err(dataset_failure)
}

fn train_cmd(kind: ModelKind, data: &Path, overrides: &Overrides, out: &Path) -> Outcome<()> {
    let allowed: Vec<&str> = hyper_keys(kind).iter().chain(TRAIN_KEYS).copied().collect();
    let mut params = overrides.resolve(&allowed)?;
    let cfg = train_config(kind, &params)?;
    params.set("model", kind);
    RunManifest {
        command: "train",
        config: overrides.config.as_deref(),
        params: &params,
        out,
        seeds: vec![("train", cfg.seed)],
    }
    .write(&out.join("manifest.txt"))?;
    let ds = load_dataset(data)?;
    let mut model = build_model(kind, &params, ds.dims(), cfg.seed).map_err(model_failure)?;
    let train_pairs = ds.examples(SplitLabel::Train);
    let val_pairs = ds.examples(SplitLabel::Val);
    let outcome = train(&mut model, &train_pairs, &val_pairs, &cfg, &mut |epoch, score| {
        println!("epoch {epoch}: validation compound score {score:.5}");
        true
    })
    .map_err(train_failure)?;
    let hash = save_checkpoint(model.store(), &out.join("model.ckpt")).runtime()?;
    let mut sidecar = model.sidecar();
    sidecar.set("checkpoint_sha256", &hash);
    sidecar.set("schema_hash", ds.schema.fingerprint());
    if let (Some(e), Some(s)) = (outcome.best_epoch, outcome.best_score) {
        sidecar.set("best_epoch", e);
        sidecar.set("best_val_compscore", s);
    }
    sidecar.write(&out.join("model.txt")).runtime()?;
    write_history(&out.join("history.csv"), &outcome.history).runtime()?;
    match outcome.best_score {
        Some(s) => println!("best validation compound score {s:.5}"),
        None => println!("no epochs run; saved initial weights"),
    }
    Ok(())
}

fn tune_cmd(kind: ModelKind, data: &Path, trials: usize, parallel: usize, overrides: &Overrides, out: &Path) -> Outcome<()> {
    let allowed: Vec<&str> = hyper_keys(kind).iter().chain(TRAIN_KEYS).copied().collect();
    let mut params = overrides.resolve(&allowed)?;
    let cfg = train_config(kind, &params)?;
    let study_cfg = StudyConfig {
        parallel,
        journal: Some(out.join("journal.csv")),
        ..StudyConfig::new(trials, cfg.epochs)
    };
    params.set("model", kind);
    params.set("trials", trials);
    params.set("parallel", parallel);
    RunManifest {
        command: "tune",
        config: overrides.config.as_deref(),
        params: &params,
        out,
        seeds: vec![("train", cfg.seed), ("sampler", study_cfg.tpe.seed)],
    }
    .write(&out.join("manifest.txt"))?;
    let ds = load_dataset(data)?;
    let train_pairs = ds.examples(SplitLabel::Train);
    let val_pairs = ds.examples(SplitLabel::Val);
    let space = match kind {
        ModelKind::Gnn => SearchSpace::gnn_default(),
        ModelKind::DLinear | ModelKind::Lstm => SearchSpace::baseline_default(),
    };
    let outcome = run_study(&space, &study_cfg, |trial, report| {
        let mut hyper = params.clone();
        hyper.overlay(&assignment_config(&trial.params));
        let mut model =
            build_model(kind, &hyper, ds.dims(), cfg.seed).map_err(|e| ObjectiveFailure(e.to_string()))?;
        let run = train(&mut model, &train_pairs, &val_pairs, &cfg, &mut |e, s| report(e, s))
            .map_err(|e| ObjectiveFailure(e.to_string()))?;
        run.best_score.ok_or_else(|| ObjectiveFailure("no epochs run".into()))
    })
    .usage()?;
    for t in &outcome.trials {
        println!(
            "trial {}: {} {}",
            t.id,
            t.status.as_str(),
            t.final_score.map_or(String::new(), |s| format!("{s:.5}"))
        );
    }
    let best = outcome
        .best
        .ok_or_else(|| Failure::Runtime("no trial completed".into()))?;
    write_best(&out.join("best.txt"), &best).runtime()?;
    println!("best trial {} with validation compound score {:.5}", best.id, best.final_score.unwrap_or(f64::NAN));
    Ok(())
}

fn eval_cmd(run: &Path, data: &Path, split: SplitLabel, threads: usize, out: &Path) -> Outcome<()> {
    let sidecar_path = run.join("model.txt");
    if !sidecar_path.exists() {
        return Err(Failure::Data(format!("{} is not a training run", run.display())));
    }
    let sidecar = KvConfig::read(&sidecar_path).map_err(|e| Failure::Data(e.to_string()))?;
    let mut params = KvConfig::new();
    params.set("run", run.display());
    params.set("data", data.display());
    params.set("split", split);
    params.set("model", sidecar.get_str("model").unwrap_or("unknown"));
    RunManifest {
        command: "eval",
        config: None,
        params: &params,
        out,
        seeds: Vec::new(),
    }
    .write(&out.join("manifest.txt"))?;
    let ds = load_dataset(data)?;
    if sidecar.get_str("schema_hash") != Some(ds.schema.fingerprint().as_str()) {
        return Err(Failure::Data("run and dataset were encoded with different schema versions".into()));
    }
    let mut model = model_from_sidecar(&sidecar).map_err(|e| Failure::Data(format!("model sidecar: {e}")))?;
    load_checkpoint(model.store_mut(), &run.join("model.ckpt")).map_err(|e| match e {
        CheckpointError::Io(e) => Failure::Data(format!("checkpoint: {e}")),
        other => Failure::Data(format!("checkpoint does not match its sidecar: {other}")),
    })?;
    let pairs = ds.examples(split);
    if pairs.is_empty() {
        return Err(Failure::Data(format!("{split} split has no forecast pairs")));
    }
    let report = evaluate(&model, &pairs, threads).map_err(train_failure)?;
    report.write(out).runtime()?;
    println!(
        "{} pairs: MAE {:.5}, accuracy {:.5}, AUROC {:.5}, precision {:.5}, compound {:.5}",
        report.n_pairs, report.mae, report.macro_accuracy, report.macro_auroc, report.macro_precision, report.compound_score
    );
    Ok(())
}

const REPORT_COLUMNS: [(&str, &str); 5] = [
    ("mae", "MAE"),
    ("mse", "MSE"),
    ("macro_accuracy", "Accuracy"),
    ("macro_auroc", "AUROC"),
    ("macro_precision", "Precision"),
];

fn report_cmd(runs: &[PathBuf], out: &Path) -> Outcome<()> {
    let mut params = KvConfig::new();
    params.set(
        "runs",
        runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>().join(","),
    );
    RunManifest {
        command: "report",
        config: None,
        params: &params,
        out,
        seeds: Vec::new(),
    }
    .write(&sibling_manifest(out))?;
    let mut w = csv::Writer::from_path(out).data()?;
    let mut header = vec!["model"];
    header.extend(REPORT_COLUMNS.iter().map(|c| c.1));
    w.write_record(&header).runtime()?;
    for dir in runs {
        let metrics_path = dir.join("metrics.txt");
        if !metrics_path.exists() {
            return Err(Failure::Data(format!("{} has no metrics.txt", dir.display())));
        }
        let metrics = KvConfig::read(&metrics_path).map_err(|e| Failure::Data(e.to_string()))?;
        let name = KvConfig::read(&dir.join("manifest.txt"))
            .ok()
            .and_then(|m| m.get_str("param.model").map(str::to_string))
            .unwrap_or_else(|| dir.display().to_string());
        let mut row = vec![name];
        for (key, _) in REPORT_COLUMNS {
            let v: f64 = metrics.require(key).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
            row.push(v.to_string());
        }
        w.write_record(&row).runtime()?;
    }
    w.flush().runtime()?;
    println!("wrote {} rows to {}", runs.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Synth { overrides, out } => synth(&overrides, &out),
        Command::Windows {
            flows,
            out,
            length,
            stride,
            split_seed,
            placeholder_width,
        } => windows(
            &flows,
            &out,
            DatasetConfig {
                window_length: length,
                stride,
                split_seed,
                placeholder_width,
                ..DatasetConfig::default()
            },
        ),
        Command::Train {
            model,
            data,
            overrides,
            out,
        } => train_cmd(model, &data, &overrides, &out),
        Command::Tune {
            model,
            data,
            trials,
            parallel,
            overrides,
            out,
        } => tune_cmd(model, &data, trials, parallel, &overrides, &out),
        Command::Eval {
            run,
            data,
            split,
            threads,
            out,
        } => eval_cmd(&run, &data, split, threads, &out),
        Command::Report { runs, out } => report_cmd(&runs, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
