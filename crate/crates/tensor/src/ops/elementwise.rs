use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::memory::Buffer;
use crate::tensor::{BackwardOp, Gradients, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct AddBackward;

impl BackwardOp for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.to_vec()), Some(g.to_vec())])
    }
}

struct SubBackward;

impl BackwardOp for SubBackward {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())])
    }
}

struct MulBackward {
    a: Arc<Buffer>,
    b: Arc<Buffer>,
}

impl BackwardOp for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let ga = g.iter().zip(self.b.values()).map(|(g, b)| g * b).collect();
        let gb = g.iter().zip(self.a.values()).map(|(g, a)| g * a).collect();
        Ok(vec![Some(ga), Some(gb)])
    }
}

struct ScaleBackward(f64);

impl BackwardOp for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.iter().map(|v| v * self.0).collect())])
    }
}

struct ScaleByBackward {
    x: Arc<Buffer>,
    s: f64,
}

impl BackwardOp for ScaleByBackward {
    fn name(&self) -> &'static str {
        "scale_by"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let gx = g.iter().map(|v| v * self.s).collect();
        let mut gs = 0.0;
        for (gv, xv) in g.iter().zip(self.x.values()) {
            gs += gv * xv;
        }
        Ok(vec![Some(gx), Some(vec![gs])])
    }
}

struct BiasAddBackward {
    outer: usize,
    n: usize,
    inner: usize,
}

impl BackwardOp for BiasAddBackward {
    fn name(&self) -> &'static str {
        "bias_add"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let mut gb = vec![0.0; self.n];
        for o in 0..self.outer {
            for (j, acc) in gb.iter_mut().enumerate() {
                let base = (o * self.n + j) * self.inner;
                for v in &g[base..base + self.inner] {
                    *acc += v;
                }
            }
        }
        Ok(vec![Some(g.to_vec()), Some(gb)])
    }
}

struct SumBackward(usize);

impl BackwardOp for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(vec![g[0]; self.0])])
    }
}

struct GeluBackward {
    x: Arc<Buffer>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl BackwardOp for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let gx = g
            .iter()
            .zip(self.x.values())
            .map(|(g, &x)| g * gelu_grad(x))
            .collect();
        Ok(vec![Some(gx)])
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(v, self.shape(), AddBackward, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(v, self.shape(), SubBackward, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        let op = MulBackward {
            a: Arc::clone(self.buffer()),
            b: Arc::clone(other.buffer()),
        };
        Tensor::from_op(v, self.shape(), op, &[self, other])
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let v = self.values().iter().map(|a| a * c).collect();
        Tensor::from_op(v, self.shape(), ScaleBackward(c), &[self])
    }

    /// Multiplies by a one-element tensor, differentiable in both.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::shape(
                "scale_by",
                format!("scale must have one element, got {:?}", s.shape()),
            ));
        }
        let sv = s.item();
        let v = self.values().iter().map(|a| a * sv).collect();
        let op = ScaleByBackward {
            x: Arc::clone(self.buffer()),
            s: sv,
        };
        Tensor::from_op(v, self.shape(), op, &[self, s])
    }

    /// Adds `bias` (rank 1) along `axis`, broadcasting over all other axes.
    pub fn bias_add(&self, bias: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() || bias.rank() != 1 || bias.shape()[0] != self.shape()[axis] {
            return Err(TensorError::shape(
                "bias_add",
                format!("bias {:?} on axis {axis} of {:?}", bias.shape(), self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let b = bias.values();
        let mut v = self.to_vec();
        for o in 0..outer {
            for (j, bj) in b.iter().enumerate() {
                let base = (o * n + j) * inner;
                for x in &mut v[base..base + inner] {
                    *x += bj;
                }
            }
        }
        Tensor::from_op(v, self.shape(), BiasAddBackward { outer, n, inner }, &[self, bias])
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let v = self.values().iter().map(|&x| gelu(x)).collect();
        let op = GeluBackward {
            x: Arc::clone(self.buffer()),
        };
        Tensor::from_op(v, self.shape(), op, &[self])
    }

    /// Sum of all elements as a one-element tensor (sequential order).
    pub fn sum(&self) -> Result<Tensor> {
        let mut s = 0.0;
        for v in self.values() {
            s += v;
        }
        Tensor::from_op(vec![s], &[1], SumBackward(self.numel()), &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Mean squared difference to `target`.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean()
    }
}
