use flowcast::autodiff::encode_checkpoint;
use flowcast::baseline::{BackboneKind, BaselineDims, BaselineHyper, BaselineModel};
use flowcast::dataset::{Dataset, DatasetConfig};
use flowcast::flow::{generate_synthetic_trace, FlowSchema, TraceConfig};
use flowcast::gnn::{GnnDims, GnnHyper, GnnModel};
use flowcast::model::{Example, Forecaster};
use flowcast::preprocess::SplitLabel;
use flowcast::trainer::{evaluate, train, TrainConfig, TrainError};

struct Splits {
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
    ds: Dataset,
}

fn splits() -> Splits {
    let records = generate_synthetic_trace(&TraceConfig {
        n_flows: 30 * 16,
        seed: 8,
        ..TraceConfig::default()
    })
    .unwrap();
    let config = DatasetConfig {
        window_length: 16,
        stride: 16,
        ..DatasetConfig::default()
    };
    let ds = Dataset::build(&records, FlowSchema::default(), config).unwrap();
    Splits {
        train: ds.examples(SplitLabel::Train),
        val: ds.examples(SplitLabel::Val),
        test: ds.examples(SplitLabel::Test),
        ds,
    }
}

fn gnn(ds: &Dataset) -> GnnModel {
    let d = ds.dims();
    let hyper = GnnHyper {
        hidden_dim: 8,
        latent_dim: 4,
        learning_rate: 1e-2,
        ..GnnHyper::default()
    };
    let dims = GnnDims {
        conn_width: d.conn_width,
        placeholder_width: d.placeholder_width,
        vocab_size: d.vocab_size,
    };
    GnnModel::new(hyper, dims, 2).unwrap()
}

fn dlinear(ds: &Dataset) -> BaselineModel {
    let d = ds.dims();
    let mut hyper = BaselineHyper::new(BackboneKind::DLinear);
    hyper.hidden_dim = 8;
    hyper.kernel = 5;
    hyper.learning_rate = 1e-2;
    let dims = BaselineDims {
        window_length: d.window_length,
        n_numerics: d.n_numerics,
        vocab_size: d.vocab_size,
    };
    BaselineModel::new(hyper, dims, 2).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        grad_accumulation: 1,
        seed: 4,
        threads: 1,
    }
}

fn max_diff(model_a: &impl Forecaster, model_b: &impl Forecaster, pairs: &[Example]) -> f64 {
    let mut worst: f64 = 0.0;
    for ex in pairs {
        let (p, q) = (model_a.predict(ex).unwrap(), model_b.predict(ex).unwrap());
        for (x, y) in p.numerics.data().iter().zip(q.numerics.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

#[test]
fn training_is_reproducible() {
    let s = splits();
    let mut a = gnn(&s.ds);
    let mut b = gnn(&s.ds);
    let ra = train(&mut a, &s.train, &s.val, &cfg(3), &mut |_, _| true).unwrap();
    let rb = train(&mut b, &s.train, &s.val, &cfg(3), &mut |_, _| true).unwrap();
    assert_eq!(ra.best_checkpoint, rb.best_checkpoint);
    assert_eq!(ra.history, rb.history);
}

#[test]
fn model_ends_on_best_epoch() {
    let s = splits();
    let mut m = dlinear(&s.ds);
    let out = train(&mut m, &s.train, &s.val, &cfg(6), &mut |_, _| true).unwrap();
    assert_eq!(out.history.len(), 6);
    let best = out.history.iter().map(|r| r.val_compscore).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_score, Some(best));
    let first = out.history.iter().find(|r| r.val_compscore == best).unwrap().epoch;
    assert_eq!(out.best_epoch, Some(first));
    assert_eq!(encode_checkpoint(m.store()), out.best_checkpoint);
    assert_eq!(evaluate(&m, &s.val, 1).unwrap().compound_score, best);
    assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let s = splits();
    let mut m = gnn(&s.ds);
    let before = encode_checkpoint(m.store());
    let out = train(&mut m, &s.train, &s.val, &cfg(0), &mut |_, _| true).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.best_checkpoint, before);
    assert_eq!(encode_checkpoint(m.store()), before);
}

#[test]
fn accumulation_splits_the_same_step() {
    let s = splits();
    let mut a = gnn(&s.ds);
    let mut b = gnn(&s.ds);
    train(&mut a, &s.train, &s.val, &cfg(2), &mut |_, _| true).unwrap();
    let accumulated = TrainConfig {
        grad_accumulation: 3,
        ..cfg(2)
    };
    train(&mut b, &s.train, &s.val, &accumulated, &mut |_, _| true).unwrap();
    let diff = max_diff(&a, &b, &s.test);
    assert!(diff < 1e-8, "accumulation changed predictions by {diff}");
    let mut a = dlinear(&s.ds);
    let mut b = dlinear(&s.ds);
    train(&mut a, &s.train, &s.val, &cfg(2), &mut |_, _| true).unwrap();
    let threaded = TrainConfig {
        grad_accumulation: 2,
        threads: 3,
        ..cfg(2)
    };
    train(&mut b, &s.train, &s.val, &threaded, &mut |_, _| true).unwrap();
    let diff = max_diff(&a, &b, &s.test);
    assert!(diff < 1e-8, "threads changed predictions by {diff}");
}

#[test]
fn evaluation_ignores_thread_count() {
    let s = splits();
    let m = gnn(&s.ds);
    let one = evaluate(&m, &s.test, 1).unwrap();
    let three = evaluate(&m, &s.test, 3).unwrap();
    assert!((one.mae - three.mae).abs() < 1e-12);
    assert_eq!(one.macro_accuracy, three.macro_accuracy);
    assert_eq!(one.macro_auroc, three.macro_auroc);
    assert_eq!(one.macro_precision, three.macro_precision);
}

#[test]
fn rung_callback_stops_training() {
    let s = splits();
    let mut m = dlinear(&s.ds);
    let mut seen = Vec::new();
    let out = train(&mut m, &s.train, &s.val, &cfg(10), &mut |epoch, _| {
        seen.push(epoch);
        epoch < 3
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(out.stopped_at, Some(3));
    assert_eq!(out.history.len(), 3);
}

#[test]
fn empty_splits_and_bad_configs_are_errors() {
    let s = splits();
    let mut m = dlinear(&s.ds);
    let r = train(&mut m, &[], &s.val, &cfg(1), &mut |_, _| true);
    assert!(matches!(r, Err(TrainError::EmptySplit(_))));
    let r = train(&mut m, &s.train, &[], &cfg(1), &mut |_, _| true);
    assert!(matches!(r, Err(TrainError::EmptySplit(_))));
    let bad = TrainConfig { batch_size: 0, ..cfg(1) };
    assert!(matches!(train(&mut m, &s.train, &s.val, &bad, &mut |_, _| true), Err(TrainError::InvalidConfig(_))));
    assert!(evaluate(&m, &[], 1).is_err());
}
