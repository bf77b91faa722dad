use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros_like(&p.value)).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let value = store.value_mut(id).data_mut();
            match grads.get(id) {
                Some(g) => {
                    for (((p, m), v), g) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((p, m), v) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, SeededRng};

    fn one_param(x: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add("x", 1, 1, Init::Constant(x), &mut SeededRng::new(0))
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut store, id) = one_param(1.5);
        let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.1));
        let mut g = ParamGrads::default();
        g.accumulate(id, &Tensor::scalar(0.0), 1.0);
        adam.step(&mut store, &g);
        assert_eq!(store.value(id).data()[0], 1.5);
    }

    #[test]
    fn descends_on_square() {
        let (mut store, id) = one_param(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.1));
        let mut g = ParamGrads::default();
        g.accumulate(id, &Tensor::scalar(2.0), 1.0); // d/dx x^2 at 1
        adam.step(&mut store, &g);
        let x = store.value(id).data()[0];
        assert!(x < 1.0 && x > 0.0);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // At t = 1: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        for &g in &[3.0, -0.02, 1e-3, -250.0] {
            let (mut store, id) = one_param(0.0);
            let mut adam = AdamState::new(&store, AdamConfig::with_lr(0.01));
            let mut grads = ParamGrads::default();
            grads.accumulate(id, &Tensor::scalar(g), 1.0);
            adam.step(&mut store, &grads);
            let moved = store.value(id).data()[0];
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-12, "g={g}: {moved} vs {expected}");
        }
    }
}
