//! Small reusable layers built on the tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{fan_in_uniform, Mat, ParamId, ParamStore};

/// `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Two-layer position-wise feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Gelu => tape.gelu(h),
        };
        self.down.forward(tape, h)
    }
}
