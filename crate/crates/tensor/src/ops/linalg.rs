use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::memory::Buffer;
use crate::tensor::{BackwardOp, Gradients, Tensor};

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, n]`. Each output
/// element is summed over `k` in increasing order.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

struct MatmulBackward {
    a: Arc<Buffer>,
    b: Arc<Buffer>,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl BackwardOp for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = self.a.values();
        let b = self.b.values();
        let mut ga = vec![0.0; self.batch * m * k];
        let mut gb = vec![0.0; if self.shared_b { k * n } else { self.batch * k * n }];
        let shared_bt = self.shared_b.then(|| transpose(k, n, b));
        for bi in 0..self.batch {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            let asl = &a[bi * m * k..(bi + 1) * m * k];
            let bt = match &shared_bt {
                Some(t) => std::borrow::Cow::Borrowed(t.as_slice()),
                None => std::borrow::Cow::Owned(transpose(k, n, &b[bi * k * n..(bi + 1) * k * n])),
            };
            gemm_acc(m, n, k, gs, &bt, &mut ga[bi * m * k..(bi + 1) * m * k]);
            let at = transpose(m, k, asl);
            let gb_slice = if self.shared_b {
                &mut gb[..]
            } else {
                &mut gb[bi * k * n..(bi + 1) * k * n]
            };
            gemm_acc(k, m, n, &at, gs, gb_slice);
        }
        Ok(vec![Some(ga), Some(gb)])
    }
}

impl Tensor {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`; `other` is either `[k, n]` (shared across the
    /// leading axes) or `[.., k, n]` with identical leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || {
            TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            )
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let sa = self.shape();
        let sb = other.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bsl = if shared_b {
                b
            } else {
                &b[bi * k * n..(bi + 1) * k * n]
            };
            gemm_acc(
                m,
                k,
                n,
                &a[bi * m * k..(bi + 1) * m * k],
                bsl,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = MatmulBackward {
            a: Arc::clone(self.buffer()),
            b: Arc::clone(other.buffer()),
            batch,
            m,
            k,
            n,
            shared_b,
        };
        Tensor::from_op(out, &shape, op, &[self, other])
    }

    /// `x · w + b` over the last axis of `x`, with `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(w)?;
        let axis = y.rank() - 1;
        y.bias_add(b, axis)
    }
}
