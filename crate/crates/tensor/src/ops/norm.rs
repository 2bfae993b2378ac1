use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::memory::Buffer;
use crate::tensor::{BackwardOp, Gradients, Tensor};

struct SoftmaxBackward {
    y: Arc<Buffer>,
    n: usize,
}

impl BackwardOp for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let y = self.y.values();
        let mut gx = vec![0.0; y.len()];
        for ((gr, yr), out) in g
            .chunks_exact(self.n)
            .zip(y.chunks_exact(self.n))
            .zip(gx.chunks_exact_mut(self.n))
        {
            let mut dot = 0.0;
            for (a, b) in gr.iter().zip(yr) {
                dot += a * b;
            }
            for ((o, a), b) in out.iter_mut().zip(gr).zip(yr) {
                *o = b * (a - dot);
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct LayerNormBackward {
    x_hat: Buffer,
    inv_std: Vec<f64>,
    gamma: Arc<Buffer>,
    n: usize,
}

impl BackwardOp for LayerNormBackward {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let n = self.n;
        let gamma = self.gamma.values();
        let mut gx = vec![0.0; g.len()];
        let mut ggamma = vec![0.0; n];
        let mut gbeta = vec![0.0; n];
        for (r, ((gr, xr), out)) in g
            .chunks_exact(n)
            .zip(self.x_hat.values().chunks_exact(n))
            .zip(gx.chunks_exact_mut(n))
            .enumerate()
        {
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..n {
                let dxh = gr[j] * gamma[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xr[j];
                ggamma[j] += gr[j] * xr[j];
                gbeta[j] += gr[j];
            }
            mean_dxh /= n as f64;
            mean_dxh_xh /= n as f64;
            let s = self.inv_std[r];
            for j in 0..n {
                out[j] = s * (gr[j] * gamma[j] - mean_dxh - xr[j] * mean_dxh_xh);
            }
        }
        Ok(vec![Some(gx), Some(ggamma), Some(gbeta)])
    }
}

impl Tensor {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
        let mut y = self.to_vec();
        for row in y.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let buf = Arc::new(Buffer::new(y));
        let op = SoftmaxBackward {
            y: Arc::clone(&buf),
            n,
        };
        Tensor::from_op_buffer(buf, self.shape(), op, &[self], false)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::shape("layer_norm", "rank-0 input"))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / n;
        let mut x_hat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; self.numel()];
        let (gv, bv) = (gamma.values(), beta.values());
        for (r, xr) in self.values().chunks_exact(n).enumerate() {
            let mut mean = 0.0;
            for v in xr {
                mean += v;
            }
            mean /= n as f64;
            let mut var = 0.0;
            for v in xr {
                var += (v - mean) * (v - mean);
            }
            var /= n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..n {
                let h = (xr[j] - mean) * s;
                x_hat[r * n + j] = h;
                y[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let op = LayerNormBackward {
            x_hat: Buffer::new(x_hat),
            inv_std,
            gamma: Arc::clone(gamma.buffer()),
            n,
        };
        Tensor::from_op(y, self.shape(), op, &[self, gamma, beta])
    }
}
