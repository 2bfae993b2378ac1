//! Segment checkpointing: run a pure segment without recording, keep only
//! its input, and recompute the segment when its gradient is needed.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::Result;
use crate::memory::Buffer;
use crate::tensor::{no_grad, with_grad_mode, BackwardOp, Gradients, Tensor};

/// A pure differentiable function of one tensor (parameters captured).
pub type Segment = Rc<dyn Fn(&Tensor) -> Result<Tensor>>;

/// Recomputes `segment` on a fresh leaf holding `input`, backpropagates
/// `grad_out` through it (depositing parameter gradients in `grads`) and
/// returns the gradient with respect to the input.
pub fn recompute_segment(
    segment: &Segment,
    input: Arc<Buffer>,
    shape: &[usize],
    grad_out: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    let x = Tensor::leaf_from_buffer(input, shape)?;
    let out = with_grad_mode(true, || segment(&x))?;
    out.backward_with_seed(grad_out.to_vec(), grads)?;
    drop(out);
    Ok(grads.take(&x).unwrap_or_else(|| vec![0.0; x.numel()]))
}

struct CheckpointBackward {
    segment: Segment,
    input: Arc<Buffer>,
    shape: Vec<usize>,
}

impl BackwardOp for CheckpointBackward {
    fn name(&self) -> &'static str {
        "checkpoint"
    }

    fn backward(&self, g: &[f64], grads: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let gx = recompute_segment(&self.segment, Arc::clone(&self.input), &self.shape, g, grads)?;
        Ok(vec![Some(gx)])
    }
}

/// Applies `segment` to `input`, saving only the input buffer for backward.
///
/// Gradients equal those of calling `segment` directly when the segment is
/// pure and its input feeds no other consumer.
pub fn checkpoint(segment: &Segment, input: &Tensor) -> Result<Tensor> {
    let out = no_grad(|| segment(input))?;
    let op = CheckpointBackward {
        segment: Rc::clone(segment),
        input: Arc::clone(input.buffer()),
        shape: input.shape().to_vec(),
    };
    Tensor::from_op_buffer(Arc::clone(out.buffer()), out.shape(), op, &[input], true)
}
