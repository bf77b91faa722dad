//! Hyperparameter search: a Parzen-estimator sampler with asynchronous
//! successive-halving pruning.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::autodiff::SeededRng;
use crate::config::KvConfig;

#[derive(Debug, thiserror::Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("search space has no parameters")]
    EmptySpace,
    #[error("invalid study config: {0}")]
    BadConfig(String),
    #[error("journal: {0}")]
    Journal(#[from] csv::Error),
    #[error("journal I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal row {row}: {reason}")]
    BadJournal { row: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamSpec {
    Real { low: f64, high: f64, log: bool },
    Int { low: i64, high: i64 },
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Real(f64),
    Int(i64),
    Categorical(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Real(x) => write!(f, "{x}"),
            Self::Int(x) => write!(f, "{x}"),
            Self::Categorical(s) => f.write_str(s),
        }
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

/// Named parameter specs, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchSpace {
    params: Vec<(String, ParamSpec)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn real(mut self, name: &str, low: f64, high: f64) -> Self {
        self.params.push((name.into(), ParamSpec::Real { low, high, log: false }));
        self
    }

    pub fn log_real(mut self, name: &str, low: f64, high: f64) -> Self {
        self.params.push((name.into(), ParamSpec::Real { low, high, log: true }));
        self
    }

    pub fn int(mut self, name: &str, low: i64, high: i64) -> Self {
        self.params.push((name.into(), ParamSpec::Int { low, high }));
        self
    }

    pub fn categorical(mut self, name: &str, choices: &[&str]) -> Self {
        let choices = choices.iter().map(|s| s.to_string()).collect();
        self.params.push((name.into(), ParamSpec::Categorical(choices)));
        self
    }

    pub fn params(&self) -> &[(String, ParamSpec)] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Search space for the graph model.
    pub fn gnn_default() -> Self {
        Self::new()
            .categorical("hidden_dim", &["32", "64", "128"])
            .categorical("latent_dim", &["16", "32", "64"])
            .int("n_layers", 1, 3)
            .log_real("learning_rate", 1e-4, 1e-2)
            .real("alpha", 0.1, 0.9)
            .real("mask_ratio", 0.1, 0.7)
            .real("edge_drop_p", 0.0, 0.5)
            .real("dropout_p", 0.0, 0.5)
    }

    /// Search space for the sequence baselines.
    pub fn baseline_default() -> Self {
        Self::new()
            .categorical("hidden_dim", &["32", "64", "128"])
            .log_real("learning_rate", 1e-4, 1e-2)
            .real("alpha", 0.1, 0.9)
            .real("mask_ratio", 0.1, 0.7)
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        let mut seen = std::collections::HashSet::new();
        for (name, spec) in &self.params {
            if !seen.insert(name) {
                return Err(HpoError::InvalidSpace(format!("`{name}` declared twice")));
            }
            let ok = match spec {
                ParamSpec::Real { low, high, log } => {
                    low.is_finite() && high.is_finite() && low < high && (!log || *low > 0.0)
                }
                ParamSpec::Int { low, high } => low <= high,
                ParamSpec::Categorical(c) => !c.is_empty(),
            };
            if !ok {
                return Err(HpoError::InvalidSpace(format!("`{name}`: bad bounds or choices")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        a.len() == self.params.len()
            && self.params.iter().all(|(name, spec)| match (spec, a.get(name)) {
                (ParamSpec::Real { low, high, .. }, Some(ParamValue::Real(x))) => (*low..=*high).contains(x),
                (ParamSpec::Int { low, high }, Some(ParamValue::Int(x))) => (*low..=*high).contains(x),
                (ParamSpec::Categorical(c), Some(ParamValue::Categorical(x))) => c.contains(x),
                _ => false,
            })
    }

    fn parse_value(&self, name: &str, raw: &str) -> Option<ParamValue> {
        let (_, spec) = self.params.iter().find(|(n, _)| n == name)?;
        match spec {
            ParamSpec::Real { .. } => raw.parse().ok().map(ParamValue::Real),
            ParamSpec::Int { .. } => raw.parse().ok().map(ParamValue::Int),
            ParamSpec::Categorical(_) => Some(ParamValue::Categorical(raw.to_string())),
        }
    }
}

/// Flat config holding an assignment, ready for `read_from` on a hyperparameter set.
pub fn assignment_config(a: &Assignment) -> KvConfig {
    let mut c = KvConfig::new();
    for (k, v) in a {
        c.set(k, v);
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Running,
    Pruned,
    Complete,
    Failed,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Pruned => "pruned",
            Self::Complete => "complete",
            Self::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "running" => Self::Running,
            "pruned" => Self::Pruned,
            "complete" => Self::Complete,
            "failed" => Self::Failed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub id: usize,
    pub params: Assignment,
    /// `(epoch, compound score)` at each rung reached, epochs increasing.
    pub rung_scores: Vec<(usize, f64)>,
    pub status: TrialStatus,
    /// Present iff the trial completed.
    pub final_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShaConfig {
    pub min_resource: usize,
    pub reduction_factor: usize,
    pub min_early_stopping_rate: u32,
    pub bootstrap_count: usize,
}

impl Default for ShaConfig {
    fn default() -> Self {
        Self {
            min_resource: 8,
            reduction_factor: 3,
            min_early_stopping_rate: 0,
            bootstrap_count: 2,
        }
    }
}

/// Rung epochs `min_resource·η^(s+k)` up to `max_epochs`.
pub fn sha_rungs(cfg: &ShaConfig, max_epochs: usize) -> Result<Vec<usize>, HpoError> {
    if cfg.reduction_factor < 2 || cfg.min_resource < 1 {
        return Err(HpoError::BadConfig("need reduction_factor >= 2 and min_resource >= 1".into()));
    }
    if max_epochs < cfg.min_resource {
        return Err(HpoError::BadConfig(format!(
            "max_epochs {max_epochs} below min_resource {}",
            cfg.min_resource
        )));
    }
    let mut rungs = Vec::new();
    let mut r = Some(cfg.min_resource);
    for _ in 0..cfg.min_early_stopping_rate {
        r = r.and_then(|r| r.checked_mul(cfg.reduction_factor));
    }
    while let Some(e) = r.filter(|&e| e <= max_epochs) {
        rungs.push(e);
        r = e.checked_mul(cfg.reduction_factor);
    }
    Ok(rungs)
}

/// Whether a trial scoring `score` at a rung should stop, given every
/// `(trial id, score)` recorded at that rung so far (its own included).
///
/// With `m` scores recorded, the best `⌈m/η⌉` survive; a score equal to the
/// last survivor's also survives.
pub fn sha_should_prune(score: f64, rung_scores: &[(usize, f64)], cfg: &ShaConfig) -> bool {
    let m = rung_scores.len();
    if m < cfg.bootstrap_count || m == 0 {
        return false;
    }
    let mut ranked: Vec<(usize, f64)> = rung_scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = m.div_ceil(cfg.reduction_factor);
    score < ranked[k - 1].1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TpeConfig {
    pub seed: u64,
    pub n_startup: usize,
    pub n_ei_candidates: usize,
    pub multivariate: bool,
    pub group: bool,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_startup: 10,
            n_ei_candidates: 24,
            multivariate: true,
            group: true,
        }
    }
}

/// Good-set size for `n` completed trials.
pub fn good_set_size(n: usize) -> usize {
    n.div_ceil(4).min(25)
}

pub fn sample_uniform(space: &SearchSpace, rng: &mut SeededRng) -> Assignment {
    space
        .params
        .iter()
        .map(|(name, spec)| {
            let v = match spec {
                ParamSpec::Real { low, high, log: false } => ParamValue::Real(rng.uniform_range(*low, *high)),
                ParamSpec::Real { low, high, log: true } => {
                    ParamValue::Real(rng.uniform_range(low.ln(), high.ln()).exp().clamp(*low, *high))
                }
                ParamSpec::Int { low, high } => ParamValue::Int(low + rng.below((high - low + 1) as usize) as i64),
                ParamSpec::Categorical(c) => ParamValue::Categorical(c[rng.below(c.len())].clone()),
            };
            (name.clone(), v)
        })
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / SQRT_2))
}

/// A numeric parameter in the coordinates the estimator works in: log for
/// log-scale reals, and integers widened by half a step on each side.
#[derive(Debug, Clone, Copy)]
struct Axis {
    low: f64,
    high: f64,
}

impl Axis {
    fn of(spec: &ParamSpec) -> Option<Self> {
        match spec {
            ParamSpec::Real { low, high, log: false } => Some(Self { low: *low, high: *high }),
            ParamSpec::Real { low, high, log: true } => Some(Self {
                low: low.ln(),
                high: high.ln(),
            }),
            ParamSpec::Int { low, high } => Some(Self {
                low: *low as f64 - 0.5,
                high: *high as f64 + 0.5,
            }),
            ParamSpec::Categorical(_) => None,
        }
    }

    fn range(self) -> f64 {
        self.high - self.low
    }

    fn bandwidth(self, n_obs: usize) -> f64 {
        (self.range() / n_obs.max(1) as f64).max(0.01 * self.range())
    }

    /// Density at `x` of a Gaussian at `mu` truncated to the axis.
    fn kernel(self, x: f64, mu: f64, sigma: f64) -> f64 {
        let mass = normal_cdf((self.high - mu) / sigma) - normal_cdf((self.low - mu) / sigma);
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300))
    }

    fn sample(self, mu: f64, sigma: f64, rng: &mut SeededRng) -> f64 {
        for _ in 0..1000 {
            let x = rng.normal(mu, sigma);
            if (self.low..=self.high).contains(&x) {
                return x;
            }
        }
        mu.clamp(self.low, self.high)
    }
}

fn to_axis(spec: &ParamSpec, v: &ParamValue) -> f64 {
    match (spec, v) {
        (ParamSpec::Real { log: true, .. }, ParamValue::Real(x)) => x.ln(),
        (_, ParamValue::Real(x)) => *x,
        (_, ParamValue::Int(x)) => *x as f64,
        _ => unreachable!("categorical values have no axis"),
    }
}

fn from_axis(spec: &ParamSpec, x: f64) -> ParamValue {
    match spec {
        ParamSpec::Real { low, high, log } => {
            let v = if *log { x.exp() } else { x };
            ParamValue::Real(v.clamp(*low, *high))
        }
        ParamSpec::Int { low, high } => ParamValue::Int((x.round() as i64).clamp(*low, *high)),
        ParamSpec::Categorical(_) => unreachable!("categorical values have no axis"),
    }
}

/// Parzen estimator over one set of observed assignments. Numeric
/// parameters share one product kernel per observation; categorical ones
/// use smoothed frequencies.
struct Parzen<'a> {
    space: &'a SearchSpace,
    points: Vec<Vec<f64>>,
    axes: Vec<(usize, Axis)>,
    categorical: Vec<(usize, Vec<f64>)>,
}

impl<'a> Parzen<'a> {
    fn fit(space: &'a SearchSpace, obs: &[&Assignment]) -> Self {
        let axes: Vec<(usize, Axis)> = space
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, (_, s))| Axis::of(s).map(|a| (i, a)))
            .collect();
        let points = obs
            .iter()
            .map(|a| axes.iter().map(|&(i, _)| to_axis(&space.params[i].1, &a[&space.params[i].0])).collect())
            .collect();
        let categorical = space
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, (name, s))| match s {
                ParamSpec::Categorical(choices) => {
                    let mut w = vec![1.0; choices.len()];
                    for a in obs {
                        if let Some(ParamValue::Categorical(c)) = a.get(name) {
                            if let Some(k) = choices.iter().position(|x| x == c) {
                                w[k] += 1.0;
                            }
                        }
                    }
                    let total: f64 = w.iter().sum();
                    Some((i, w.into_iter().map(|x| x / total).collect()))
                }
                _ => None,
            })
            .collect();
        Self {
            space,
            points,
            axes,
            categorical,
        }
    }

    fn bandwidths(&self) -> Vec<f64> {
        self.axes.iter().map(|(_, a)| a.bandwidth(self.points.len())).collect()
    }

    fn log_density(&self, a: &Assignment) -> f64 {
        let mut log_p = 0.0;
        if !self.axes.is_empty() {
            let x: Vec<f64> = self
                .axes
                .iter()
                .map(|&(i, _)| to_axis(&self.space.params[i].1, &a[&self.space.params[i].0]))
                .collect();
            let bw = self.bandwidths();
            let p = if self.points.is_empty() {
                self.axes.iter().map(|(_, ax)| 1.0 / ax.range()).product()
            } else {
                let sum: f64 = self
                    .points
                    .iter()
                    .map(|mu| (0..x.len()).map(|d| self.axes[d].1.kernel(x[d], mu[d], bw[d])).product::<f64>())
                    .sum();
                sum / self.points.len() as f64
            };
            log_p += p.max(1e-300).ln();
        }
        for (i, probs) in &self.categorical {
            let (name, spec) = &self.space.params[*i];
            if let (ParamSpec::Categorical(choices), Some(ParamValue::Categorical(c))) = (spec, a.get(name)) {
                let k = choices.iter().position(|x| x == c).expect("value inside space");
                log_p += probs[k].ln();
            }
        }
        log_p
    }

    /// Draws one joint candidate: all numeric coordinates come from the
    /// kernel of a single observation.
    fn sample(&self, rng: &mut SeededRng) -> Assignment {
        let mut out = Assignment::new();
        if self.points.is_empty() {
            return sample_uniform(self.space, rng);
        }
        let j = rng.below(self.points.len());
        let bw = self.bandwidths();
        for (d, &(i, axis)) in self.axes.iter().enumerate() {
            let (name, spec) = &self.space.params[i];
            out.insert(name.clone(), from_axis(spec, axis.sample(self.points[j][d], bw[d], rng)));
        }
        for (i, probs) in &self.categorical {
            let (name, spec) = &self.space.params[*i];
            if let ParamSpec::Categorical(choices) = spec {
                out.insert(name.clone(), ParamValue::Categorical(choices[rng.weighted(probs)].clone()));
            }
        }
        out
    }
}

/// Next assignment to try given the trials so far.
pub fn tpe_suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut SeededRng,
) -> Result<Assignment, HpoError> {
    if space.is_empty() {
        return Err(HpoError::EmptySpace);
    }
    space.validate()?;
    let mut done: Vec<&TrialRecord> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.final_score.is_some())
        .collect();
    if done.len() < cfg.n_startup {
        return Ok(sample_uniform(space, rng));
    }
    done.sort_by(|a, b| {
        b.final_score
            .unwrap()
            .total_cmp(&a.final_score.unwrap())
            .then(a.id.cmp(&b.id))
    });
    let n_good = good_set_size(done.len());
    let good: Vec<&Assignment> = done[..n_good].iter().map(|t| &t.params).collect();
    let bad: Vec<&Assignment> = done[n_good..].iter().map(|t| &t.params).collect();
    let l = Parzen::fit(space, &good);
    let g = Parzen::fit(space, &bad);
    let mut best: Option<(f64, Assignment)> = None;
    for _ in 0..cfg.n_ei_candidates.max(1) {
        let c = l.sample(rng);
        let ratio = l.log_density(&c) - g.log_density(&c);
        if best.as_ref().is_none_or(|(b, _)| ratio > *b) {
            best = Some((ratio, c));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// What a trial is given to run.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub id: usize,
    pub params: Assignment,
    pub max_epochs: usize,
}

/// Objective failure; the trial is marked failed and the study goes on.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("objective failed: {0}")]
pub struct ObjectiveFailure(pub String);

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub max_epochs: usize,
    /// Concurrent trials. Only a single worker gives a reproducible history.
    pub parallel: usize,
    pub sha: ShaConfig,
    pub tpe: TpeConfig,
    /// Append-only CSV journal; existing entries are resumed from.
    pub journal: Option<PathBuf>,
}

impl StudyConfig {
    pub fn new(n_trials: usize, max_epochs: usize) -> Self {
        Self {
            n_trials,
            max_epochs,
            parallel: 1,
            sha: ShaConfig::default(),
            tpe: TpeConfig::default(),
            journal: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub best: Option<TrialRecord>,
    pub trials: Vec<TrialRecord>,
}

/// The highest-scoring completed trial; ties go to the lower id.
pub fn best_trial(trials: &[TrialRecord]) -> Option<&TrialRecord> {
    trials
        .iter()
        .filter(|t| t.status == TrialStatus::Complete)
        .filter_map(|t| t.final_score.map(|s| (s, t)))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.id.cmp(&a.1.id)))
        .map(|(_, t)| t)
}

struct Journal {
    path: PathBuf,
    names: Vec<String>,
}

const STARTED: &str = "started";

impl Journal {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["trial_id".to_string()];
        h.extend(self.names.iter().cloned());
        h.extend(["rung_epoch".into(), "score".into(), "status".into()]);
        h
    }

    fn append(&self, t: &TrialRecord, epoch: Option<usize>, score: Option<f64>, status: &str) -> Result<(), HpoError> {
        let fresh = !self.path.exists();
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(self.header())?;
        }
        let mut row = vec![t.id.to_string()];
        row.extend(self.names.iter().map(|n| t.params[n].to_string()));
        row.push(epoch.map(|e| e.to_string()).unwrap_or_default());
        row.push(score.map(|s| s.to_string()).unwrap_or_default());
        row.push(status.to_string());
        w.write_record(row)?;
        w.flush()?;
        Ok(())
    }

    /// Trials that reached a final status. A `started` row resets the
    /// trial, so an interrupted attempt is superseded by its rerun.
    fn load(&self, space: &SearchSpace) -> Result<Vec<TrialRecord>, HpoError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(&self.path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != self.header() {
            return Err(HpoError::BadJournal {
                row: 0,
                reason: "columns do not match the search space".into(),
            });
        }
        let mut by_id: BTreeMap<usize, TrialRecord> = BTreeMap::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |reason: &str| HpoError::BadJournal {
                row: row + 1,
                reason: reason.into(),
            };
            let id: usize = rec[0].parse().map_err(|_| bad("trial_id"))?;
            let mut params = Assignment::new();
            for (k, name) in self.names.iter().enumerate() {
                let v = space.parse_value(name, &rec[k + 1]).ok_or_else(|| bad(name))?;
                params.insert(name.clone(), v);
            }
            let n = self.names.len();
            let epoch: Option<usize> = match &rec[n + 1] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("rung_epoch"))?),
            };
            let score: Option<f64> = match &rec[n + 2] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("score"))?),
            };
            let status = &rec[n + 3];
            if status == STARTED {
                by_id.insert(
                    id,
                    TrialRecord {
                        id,
                        params,
                        rung_scores: Vec::new(),
                        status: TrialStatus::Running,
                        final_score: None,
                    },
                );
                continue;
            }
            let status = TrialStatus::parse(status).ok_or_else(|| bad("status"))?;
            let t = by_id.get_mut(&id).ok_or_else(|| bad("trial reported before it started"))?;
            match status {
                TrialStatus::Running => {
                    t.rung_scores.push((epoch.ok_or_else(|| bad("rung_epoch"))?, score.ok_or_else(|| bad("score"))?));
                }
                TrialStatus::Complete => {
                    t.status = status;
                    t.final_score = Some(score.ok_or_else(|| bad("score"))?);
                }
                _ => t.status = status,
            }
        }
        Ok(by_id.into_values().filter(|t| t.status != TrialStatus::Running).collect())
    }
}

struct StudyState {
    trials: Vec<TrialRecord>,
    next_id: usize,
    /// Scores recorded per rung epoch.
    boards: BTreeMap<usize, Vec<(usize, f64)>>,
}

fn trial_rng(seed: u64, id: usize) -> SeededRng {
    SeededRng::new(seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `n_trials` trials of `objective`, pruning at the SHA rungs.
///
/// The objective receives the trial and a `report(epoch, score)` callback
/// to call after every epoch; a `false` return means the trial was pruned
/// and should stop. Its own return value is the final score.
pub fn run_study<F>(space: &SearchSpace, cfg: &StudyConfig, objective: F) -> Result<StudyOutcome, HpoError>
where
    F: Fn(&TrialContext, &mut dyn FnMut(usize, f64) -> bool) -> Result<f64, ObjectiveFailure> + Sync,
{
    space.validate()?;
    if space.is_empty() {
        return Err(HpoError::EmptySpace);
    }
    if cfg.n_trials == 0 || cfg.parallel == 0 {
        return Err(HpoError::BadConfig("n_trials and parallel must be positive".into()));
    }
    let rungs = sha_rungs(&cfg.sha, cfg.max_epochs)?;
    let journal = cfg.journal.as_ref().map(|path| Journal {
        path: path.clone(),
        names: space.names().map(str::to_string).collect(),
    });
    let resumed = match &journal {
        Some(j) => j.load(space)?,
        None => Vec::new(),
    };
    let mut boards: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for t in &resumed {
        for &(e, s) in &t.rung_scores {
            boards.entry(e).or_default().push((t.id, s));
        }
    }
    let state = Mutex::new(StudyState {
        next_id: 0,
        trials: resumed,
        boards,
    });
    let error: Mutex<Option<HpoError>> = Mutex::new(None);

    let worker = || loop {
        let ctx = {
            let mut st = state.lock().expect("study lock");
            while st.trials.iter().any(|t| t.id == st.next_id && t.status != TrialStatus::Running) {
                st.next_id += 1;
            }
            if st.next_id >= cfg.n_trials || error.lock().expect("error lock").is_some() {
                return;
            }
            let id = st.next_id;
            st.next_id += 1;
            let params = match tpe_suggest(&st.trials, space, &cfg.tpe, &mut trial_rng(cfg.tpe.seed, id)) {
                Ok(p) => p,
                Err(e) => {
                    *error.lock().expect("error lock") = Some(e);
                    return;
                }
            };
            let record = TrialRecord {
                id,
                params: params.clone(),
                rung_scores: Vec::new(),
                status: TrialStatus::Running,
                final_score: None,
            };
            if let Some(j) = &journal {
                if let Err(e) = j.append(&record, None, None, STARTED) {
                    *error.lock().expect("error lock") = Some(e);
                    return;
                }
            }
            st.trials.push(record);
            TrialContext {
                id,
                params,
                max_epochs: cfg.max_epochs,
            }
        };
        let mut pruned = false;
        let mut report = |epoch: usize, score: f64| -> bool {
            if !rungs.contains(&epoch) || pruned {
                return !pruned;
            }
            let mut st = state.lock().expect("study lock");
            let board = st.boards.entry(epoch).or_default();
            board.push((ctx.id, score));
            pruned = sha_should_prune(score, board, &cfg.sha);
            let t = st.trials.iter_mut().find(|t| t.id == ctx.id).expect("running trial");
            t.rung_scores.push((epoch, score));
            if let Some(j) = &journal {
                if let Err(e) = j.append(t, Some(epoch), Some(score), TrialStatus::Running.as_str()) {
                    error.lock().expect("error lock").get_or_insert(e);
                }
            }
            !pruned
        };
        let result = objective(&ctx, &mut report);
        let mut st = state.lock().expect("study lock");
        let t = st.trials.iter_mut().find(|t| t.id == ctx.id).expect("running trial");
        match result {
            Ok(score) if !pruned && score.is_finite() => {
                t.status = TrialStatus::Complete;
                t.final_score = Some(score);
            }
            Ok(_) if pruned => t.status = TrialStatus::Pruned,
            _ => t.status = TrialStatus::Failed,
        }
        if let Some(j) = &journal {
            if let Err(e) = j.append(t, None, t.final_score, t.status.as_str()) {
                *error.lock().expect("error lock") = Some(e);
                return;
            }
        }
    };

    if cfg.parallel == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..cfg.parallel {
                s.spawn(worker);
            }
        });
    }
    if let Some(e) = error.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut trials = state.into_inner().expect("study lock").trials;
    trials.sort_by_key(|t| t.id);
    Ok(StudyOutcome {
        best: best_trial(&trials).cloned(),
        trials,
    })
}

/// Sidecar for the best trial: its parameters plus `trial_id` and `score`.
pub fn best_config(best: &TrialRecord) -> KvConfig {
    let mut c = assignment_config(&best.params);
    c.set("trial_id", best.id);
    if let Some(s) = best.final_score {
        c.set("score", s);
    }
    c
}

pub fn write_best(path: &Path, best: &TrialRecord) -> Result<(), crate::config::ConfigError> {
    best_config(best).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, x: f64, score: f64) -> TrialRecord {
        TrialRecord {
            id,
            params: [("x".to_string(), ParamValue::Real(x))].into(),
            rung_scores: Vec::new(),
            status: TrialStatus::Complete,
            final_score: Some(score),
        }
    }

    #[test]
    fn rungs_follow_geometric_rule() {
        let cfg = ShaConfig::default();
        assert_eq!(sha_rungs(&cfg, 75).unwrap(), vec![8, 24, 72]);
        assert!(sha_rungs(&cfg, 7).is_err());
        let c = ShaConfig {
            min_resource: 1,
            reduction_factor: 2,
            ..cfg
        };
        assert_eq!(sha_rungs(&c, 4).unwrap(), vec![1, 2, 4]);
    }

    #[test]
    fn prune_respects_bootstrap_and_quantile() {
        let cfg = ShaConfig::default();
        assert!(!sha_should_prune(0.1, &[(0, 0.1)], &cfg));
        assert!(sha_should_prune(0.1, &[(0, 0.9), (1, 0.1)], &cfg));
        let board: Vec<(usize, f64)> = (0..9).map(|i| (i, i as f64)).collect();
        let kept: Vec<usize> = board.iter().filter(|(_, s)| !sha_should_prune(*s, &board, &cfg)).map(|t| t.0).collect();
        assert_eq!(kept, vec![6, 7, 8]);
    }

    #[test]
    fn startup_trials_are_uniform_and_in_bounds() {
        let space = SearchSpace::gnn_default();
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            assert!(space.contains(&tpe_suggest(&[], &space, &TpeConfig::default(), &mut rng).unwrap()));
        }
    }

    #[test]
    fn suggestion_concentrates_near_good_mode() {
        let space = SearchSpace::new().real("x", 0.0, 1.0);
        let mut hist: Vec<TrialRecord> = (0..3).map(|i| rec(i, 0.7, 1.0)).collect();
        hist.extend((0..9).map(|i| rec(3 + i, i as f64 / 8.0, 0.0)));
        let cfg = TpeConfig::default();
        let bw = 1.0 / good_set_size(hist.len()) as f64;
        let mut rng = SeededRng::new(3);
        let x = match &tpe_suggest(&hist, &space, &cfg, &mut rng).unwrap()["x"] {
            ParamValue::Real(x) => *x,
            _ => unreachable!(),
        };
        assert!((x - 0.7).abs() <= 2.0 * bw, "x = {x}");
    }

    #[test]
    fn empty_space_is_rejected() {
        let r = tpe_suggest(&[], &SearchSpace::new(), &TpeConfig::default(), &mut SeededRng::new(0));
        assert!(matches!(r, Err(HpoError::EmptySpace)));
    }
}
