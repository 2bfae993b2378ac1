//! Descriptor-driven dispatch over the primitive set.

use crate::error::{Result, TensorError};
use crate::ops::AxisPad;
use crate::tensor::Tensor;

/// One primitive operation with its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Conv2d { stride: [usize; 2] },
    Conv3d { stride: [usize; 3] },
    ConvTranspose2d { stride: [usize; 2] },
    ConvTranspose3d { stride: [usize; 3] },
    LayerNorm { eps: f64 },
    Softmax,
    Gelu,
    Add,
    Sub,
    Mul,
    Scale(f64),
    BiasAdd { axis: usize },
    Pad(Vec<AxisPad>),
    IndexSelect { axis: usize, indices: Vec<usize> },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Sum,
}

impl Op {
    fn arity(&self) -> Option<usize> {
        use Op::*;
        match self {
            Softmax | Gelu | Scale(_) | Pad(_) | IndexSelect { .. } | Reshape(_) | Permute(_)
            | Sum => Some(1),
            MatMul | Conv2d { .. } | Conv3d { .. } | ConvTranspose2d { .. }
            | ConvTranspose3d { .. } | Add | Sub | Mul | BiasAdd { .. } => Some(2),
            LayerNorm { .. } => Some(3),
            Concat { .. } => None,
        }
    }
}

/// Applies `op` to `inputs`, recording it when any input is tracked.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(TensorError::invalid(
                "forward_op",
                format!("{op:?} takes {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    let x = inputs.first().copied();
    let x = || x.ok_or_else(|| TensorError::invalid("forward_op", "no inputs"));
    match op {
        Op::MatMul => inputs[0].matmul(inputs[1]),
        Op::Conv2d { stride } => inputs[0].conv2d(inputs[1], *stride),
        Op::Conv3d { stride } => inputs[0].conv3d(inputs[1], *stride),
        Op::ConvTranspose2d { stride } => inputs[0].conv_transpose2d(inputs[1], *stride),
        Op::ConvTranspose3d { stride } => inputs[0].conv_transpose3d(inputs[1], *stride),
        Op::LayerNorm { eps } => inputs[0].layer_norm(inputs[1], inputs[2], *eps),
        Op::Softmax => x()?.softmax(),
        Op::Gelu => x()?.gelu(),
        Op::Add => inputs[0].add(inputs[1]),
        Op::Sub => inputs[0].sub(inputs[1]),
        Op::Mul => inputs[0].mul(inputs[1]),
        Op::Scale(c) => x()?.scale(*c),
        Op::BiasAdd { axis } => inputs[0].bias_add(inputs[1], *axis),
        Op::Pad(p) => x()?.pad(p),
        Op::IndexSelect { axis, indices } => x()?.index_select(*axis, indices),
        Op::Concat { axis } => Tensor::concat(inputs, *axis),
        Op::Reshape(s) => x()?.reshape(s),
        Op::Permute(p) => x()?.permute(p),
        Op::Sum => x()?.sum(),
    }
}
