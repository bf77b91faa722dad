//! Training and evaluation loops.

use std::path::Path;

use crate::autodiff::{apply_checkpoint, encode_checkpoint, AdamConfig, AdamState, ParamGrads, SeededRng, Tape};
use crate::metrics::{EvalAccumulator, MetricsError, MetricsReport};
use crate::model::{Example, Forecaster, ModelError, ModelKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0} split has no forecast pairs")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accumulation: usize,
    pub seed: u64,
    /// Worker threads for per-pair gradients and evaluation.
    pub threads: usize,
}

impl TrainConfig {
    pub fn for_model(kind: ModelKind) -> Self {
        Self {
            epochs: 75,
            batch_size: 64,
            grad_accumulation: kind.default_grad_accumulation(),
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.grad_accumulation == 0 || self.threads == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, grad_accumulation and threads must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_compscore: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Encoded checkpoint of the best epoch (the initial weights if no epoch ran).
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// Epoch after which the rung callback asked to stop.
    pub stopped_at: Option<usize>,
}

/// Runs `f` over contiguous chunks of `items` on up to `threads` threads
/// and returns the per-chunk results in chunk order.
fn par_chunks<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    if threads <= 1 || items.len() == 1 {
        return vec![f(items)];
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Summed parameter gradients and loss of a micro-batch, each pair weighted by `scale`.
fn micro_batch_grads<M: Forecaster>(
    model: &M,
    batch: &[(&Example, SeededRng)],
    scale: f64,
    threads: usize,
) -> Result<(ParamGrads, f64), ModelError> {
    let parts = par_chunks(batch, threads, |chunk| -> Result<(ParamGrads, f64), ModelError> {
        let mut grads = ParamGrads::default();
        let mut loss_sum = 0.0;
        for (ex, rng) in chunk {
            let mut rng = rng.clone();
            let tape = Tape::new();
            let loss = model.loss(&tape, ex, &mut rng)?;
            loss_sum += loss.item();
            let g = tape.backward(loss)?;
            grads.merge(g.params(), scale);
        }
        Ok((grads, loss_sum))
    });
    let mut grads = ParamGrads::default();
    let mut loss = 0.0;
    for p in parts {
        let (g, l) = p?;
        grads.merge(&g, 1.0);
        loss += l;
    }
    Ok((grads, loss))
}

/// Trains `model` and leaves it holding the best-validation weights.
///
/// After every epoch the validation compound score is passed to
/// `rung_callback(epoch, score)`; returning `false` stops training.
pub fn train<M: Forecaster>(
    model: &mut M,
    train_pairs: &[Example],
    val_pairs: &[Example],
    cfg: &TrainConfig,
    rung_callback: &mut dyn FnMut(usize, f64) -> bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        best_checkpoint: encode_checkpoint(model.store()),
        best_epoch: None,
        best_score: None,
        history: Vec::new(),
        stopped_at: None,
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    if train_pairs.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_pairs.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut adam = AdamState::new(model.store(), AdamConfig::with_lr(model.learning_rate()));
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let micro = batch.len().div_ceil(cfg.grad_accumulation);
            let mut step = ParamGrads::default();
            for part in batch.chunks(micro) {
                let items: Vec<(&Example, SeededRng)> = part.iter().map(|&i| (&train_pairs[i], rng.fork())).collect();
                let (g, loss) = micro_batch_grads(model, &items, scale, cfg.threads)?;
                if !loss.is_finite() || !g.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                step.merge(&g, 1.0);
                epoch_loss += loss;
            }
            adam.step(model.store_mut(), &step);
        }
        let report = evaluate(model, val_pairs, cfg.threads)?;
        let score = report.compound_score;
        outcome.history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_pairs.len() as f64,
            val_compscore: score,
        });
        if outcome.best_score.is_none_or(|b| score > b) {
            outcome.best_score = Some(score);
            outcome.best_epoch = Some(epoch);
            outcome.best_checkpoint = encode_checkpoint(model.store());
        }
        if !rung_callback(epoch, score) {
            outcome.stopped_at = Some(epoch);
            break;
        }
    }
    apply_checkpoint(model.store_mut(), &outcome.best_checkpoint).expect("checkpoint of the same model");
    Ok(outcome)
}

/// Forecasts every pair and aggregates the metrics.
pub fn evaluate<M: Forecaster + ?Sized>(
    model: &M,
    pairs: &[Example],
    threads: usize,
) -> Result<MetricsReport, TrainError> {
    let parts = par_chunks(pairs, threads, |chunk| -> Result<Option<EvalAccumulator>, TrainError> {
        let mut acc: Option<EvalAccumulator> = None;
        for ex in chunk {
            let p = model.predict(ex)?;
            let acc = acc.get_or_insert_with(|| EvalAccumulator::new(std::array::from_fn(|r| p.scores[r].cols())));
            let targets = std::array::from_fn(|r| ex.targets.classes(crate::graph::Relation::ALL[r]));
            acc.add(&p.numerics, &ex.next_numerics(), &p.scores, &targets)?;
        }
        Ok(acc)
    });
    let mut total: Option<EvalAccumulator> = None;
    for p in parts {
        if let Some(acc) = p? {
            match total.as_mut() {
                None => total = Some(acc),
                Some(t) => t.merge(acc),
            }
        }
    }
    Ok(total.ok_or(MetricsError::Empty)?.finish()?)
}

/// CSV with columns `epoch,train_loss,val_compscore`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_compscore"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_compscore.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
