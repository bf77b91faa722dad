#![allow(dead_code)]

use std::sync::Arc;

use flowcast::autodiff::{SeededRng, Tape, Tensor, Var};
use flowcast::dataset::{Dataset, DatasetConfig};
use flowcast::flow::{generate_synthetic_trace, FlowSchema, TraceConfig};
use flowcast::graph::build_graph;
use flowcast::model::{Example, Forecaster};
use flowcast::preprocess::{make_windows, IpVocabulary, OheSchema};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, or the absolute gap when both are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let gap = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|x| x.abs()).fold(0.0, f64::max);
    if scale < 1e-8 {
        gap
    } else {
        gap / scale
    }
}

/// Central differences of `f` with respect to every input, compared to the
/// tape's gradients. Returns the worst relative error over the inputs.
pub fn check_fn(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = Vec::with_capacity(input.len());
        let mut values = inputs.to_vec();
        for i in 0..input.len() {
            let x = input.data()[i];
            values[k].data_mut()[i] = x + FD_STEP;
            let up = eval(&values);
            values[k].data_mut()[i] = x - FD_STEP;
            let down = eval(&values);
            values[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Per-parameter relative error of the model's training loss on `ex`. The
/// loss is re-evaluated with a clone of the same generator so masks and
/// dropout stay fixed.
///
/// Parameters are first moved off their initial values: zero biases put
/// pre-activations of all-zero rows exactly on the relu kink.
pub fn check_model<M: Forecaster>(model: &mut M, ex: &Example, seed: u64) -> Vec<(String, f64)> {
    let rng = SeededRng::new(seed);
    let mut jitter = SeededRng::new(seed ^ 0x5eed);
    let ids: Vec<_> = model.store().ids().collect();
    for &id in &ids {
        for x in model.store_mut().value_mut(id).data_mut() {
            *x += jitter.normal(0.0, 0.1);
        }
    }
    let tape = Tape::new();
    let loss = model.loss(&tape, ex, &mut rng.clone()).expect("loss");
    let grads = tape.backward(loss).expect("scalar loss").into_params();
    let mut out = Vec::new();
    for id in ids {
        let n = model.store().value(id).len();
        let analytic = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let x = model.store().value(id).data()[i];
            let eval = |v: f64, model: &mut M| {
                model.store_mut().value_mut(id).data_mut()[i] = v;
                let tape = Tape::new();
                model.loss(&tape, ex, &mut rng.clone()).expect("loss").item()
            };
            let up = eval(x + FD_STEP, model);
            let down = eval(x - FD_STEP, model);
            model.store_mut().value_mut(id).data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        out.push((model.store().name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    out
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect())
}

/// One forecast pair over two consecutive windows of `len` flows.
pub fn toy_example(len: usize, placeholder_width: usize, seed: u64) -> (Example, IpVocabulary) {
    let cfg = TraceConfig {
        n_flows: 2 * len,
        n_heavy_ips: 2,
        n_background_ips: 3,
        session_slots: len,
        seed,
        ..TraceConfig::default()
    };
    let records = generate_synthetic_trace(&cfg).expect("trace");
    let windows = make_windows(&records, len, len).expect("windows");
    let vocab = IpVocabulary::from_records(&records);
    let schema = OheSchema::default();
    let g: Vec<_> = windows
        .iter()
        .map(|w| Arc::new(build_graph(w, &vocab, &schema, placeholder_width).expect("graph")))
        .collect();
    let ex = Example::new(Arc::clone(&g[0]), Arc::clone(&g[1]), Arc::new(windows[0].clone()));
    (ex, vocab)
}

/// 200 windows of 64 flows over 4 heavy and 8 background hosts.
pub fn talker_corpus() -> Dataset {
    let cfg = TraceConfig {
        n_flows: 200 * 64,
        n_heavy_ips: 4,
        n_background_ips: 8,
        seed: 7,
        ..TraceConfig::default()
    };
    let records = generate_synthetic_trace(&cfg).expect("trace");
    let config = DatasetConfig {
        window_length: 64,
        stride: 64,
        split_seed: 1,
        ..DatasetConfig::default()
    };
    Dataset::build(&records, FlowSchema::default(), config).expect("dataset")
}
