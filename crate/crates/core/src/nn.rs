//! Small layers shared by the models.

use crate::autodiff::{Init, ParamId, ParamStore, SeededRng, Tape, TensorError, Var};

/// `x·W + b` with `W` Xavier-initialized and `b` zero.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self, TensorError> {
        let w = store.add(format!("{name}.w"), fan_in, fan_out, Init::XavierUniform, rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), 1, fan_out, Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = x.matmul(&tape.param(store, self.w))?;
        match self.b {
            Some(b) => y.add(&tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Two linear layers with a relu in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng)?,
            out: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.hidden.forward(tape, store, x)?.relu();
        self.out.forward(tape, store, &h)
    }
}
