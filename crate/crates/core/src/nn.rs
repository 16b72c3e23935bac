//! Parameter containers shared by every trainable stage.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer, weight stored `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: [usize; 2], bound: f64) -> Tensor<T> {
    let n = shape[0] * shape[1];
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

impl<T: Scalar> Dense<T> {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: uniform(rng, [fan_out, fan_in], bound),
            bias: Tensor::zeros([fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Tensor::zeros([fan_out, fan_in]),
            bias: Tensor::zeros([fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundDense> {
        Ok(BoundDense {
            weight: tape.param(&self.weight)?,
            bias: tape.param(&self.bias)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl BoundDense {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Two dense layers with a ReLU between them; returns logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub hidden: BoundDense,
    pub output: BoundDense,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            hidden: Dense::init(rng, input, hidden),
            output: Dense::init(rng, hidden, output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            hidden: Dense::zeros(input, hidden),
            output: Dense::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundMlp> {
        Ok(BoundMlp {
            hidden: self.hidden.bind(tape)?,
            output: self.output.bind(tape)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.hidden.visit(&format!("{prefix}.hidden"), out);
        self.output.visit(&format!("{prefix}.output"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.hidden.visit_mut(out);
        self.output.visit_mut(out);
    }
}

impl BoundMlp {
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        self.hidden.vars(out);
        self.output.vars(out);
    }
}
