//! Small parameterised building blocks.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, T::one()));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self { up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden), down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}
