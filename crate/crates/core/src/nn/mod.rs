//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`](tape::Tape) records operations as they execute; a single
//! backward pass then accumulates gradients for every recorded variable.
//! Everything is scalar f64 on the CPU, deterministic, and free of external
//! numerics dependencies, which keeps gradients bit-reproducible.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, DEFAULT_EPSILON};
pub use tape::{Tape, Var};
pub use tensor::{NnError, Tensor};

/// Named trainable (or frozen) tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad, trainable }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}
