use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, BackwardOp, Gradients, Tensor};

/// Boundary handling for [`Tensor::pad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Periodic wrap-around (longitude).
    Circular,
    /// Edge value repeated.
    Replicate,
}

/// Padding of one axis: elements added before and after, and the mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisPad {
    pub before: usize,
    pub after: usize,
    pub mode: PadMode,
}

impl AxisPad {
    pub const NONE: AxisPad = AxisPad {
        before: 0,
        after: 0,
        mode: PadMode::Zero,
    };

    pub fn new(before: usize, after: usize, mode: PadMode) -> Self {
        AxisPad { before, after, mode }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Maps every output element to an input offset (or `None`), iterating the
/// output in row-major order. `axis_maps[a][i]` is the input offset
/// contribution of output index `i` on axis `a`.
fn gather_map(axis_maps: &[Vec<Option<usize>>]) -> Vec<Option<usize>> {
    let total: usize = axis_maps.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    fn rec(maps: &[Vec<Option<usize>>], acc: Option<usize>, out: &mut Vec<Option<usize>>) {
        match maps.split_first() {
            None => out.push(acc),
            Some((first, rest)) => {
                for m in first {
                    let next = match (acc, m) {
                        (Some(a), Some(b)) => Some(a + b),
                        _ => None,
                    };
                    rec(rest, next, out);
                }
            }
        }
    }
    rec(axis_maps, Some(0), &mut out);
    out
}

struct ReshapeBackward;

impl BackwardOp for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

/// Backward of any op whose output element `i` copies input `map[i]`.
struct GatherBackward {
    name: &'static str,
    map: Vec<Option<usize>>,
    input_len: usize,
}

impl BackwardOp for GatherBackward {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let mut gx = vec![0.0; self.input_len];
        for (gv, m) in g.iter().zip(&self.map) {
            if let Some(i) = m {
                gx[*i] += gv;
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct IndexSelectBackward {
    indices: Vec<usize>,
    outer: usize,
    n: usize,
    inner: usize,
}

impl BackwardOp for IndexSelectBackward {
    fn name(&self) -> &'static str {
        "index_select"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let inner = self.inner;
        let mut gx = vec![0.0; self.outer * self.n * inner];
        let mut src = 0;
        for o in 0..self.outer {
            for &i in &self.indices {
                let base = (o * self.n + i) * inner;
                for (d, s) in gx[base..base + inner].iter_mut().zip(&g[src..src + inner]) {
                    *d += s;
                }
                src += inner;
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct ConcatBackward {
    outer: usize,
    sizes: Vec<usize>,
    inner: usize,
}

impl BackwardOp for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let total: usize = self.sizes.iter().sum();
        let mut grads: Vec<Vec<f64>> = self
            .sizes
            .iter()
            .map(|s| Vec::with_capacity(self.outer * s * self.inner))
            .collect();
        for o in 0..self.outer {
            let mut off = o * total * self.inner;
            for (gi, s) in grads.iter_mut().zip(&self.sizes) {
                let len = s * self.inner;
                gi.extend_from_slice(&g[off..off + len]);
                off += len;
            }
        }
        Ok(grads.into_iter().map(Some).collect())
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op_buffer(Arc::clone(self.buffer()), shape, ReshapeBackward, &[self], false)
    }

    /// Reorders axes: output axis `a` is input axis `perm[a]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("permutation {perm:?} for shape {:?}", self.shape()),
            ));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let maps: Vec<Vec<Option<usize>>> = perm
            .iter()
            .map(|&p| (0..self.shape()[p]).map(|i| Some(i * in_strides[p])).collect())
            .collect();
        self.gather_with_map("permute", &out_shape, gather_map(&maps))
    }

    /// Selects `indices` along `axis` (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() || indices.is_empty() {
            return Err(TensorError::shape(
                "index_select",
                format!("axis {axis} with {} indices on {:?}", indices.len(), self.shape()),
            ));
        }
        let n = self.shape()[axis];
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::shape(
                "index_select",
                format!("index {bad} out of range for axis {axis} of {:?}", self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.values();
        let mut v = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                v.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        let op = IndexSelectBackward {
            indices: indices.to_vec(),
            outer,
            n,
            inner,
        };
        Tensor::from_op(v, &shape, op, &[self])
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Pads every axis according to `pads` (one entry per axis).
    pub fn pad(&self, pads: &[AxisPad]) -> Result<Tensor> {
        if pads.len() != self.rank() {
            return Err(TensorError::shape(
                "pad",
                format!("{} pad specs for shape {:?}", pads.len(), self.shape()),
            ));
        }
        let in_strides = strides(self.shape());
        let mut out_shape = Vec::with_capacity(self.rank());
        let mut maps = Vec::with_capacity(self.rank());
        for (a, p) in pads.iter().enumerate() {
            let n = self.shape()[a];
            if p.mode == PadMode::Circular && (p.before > n || p.after > n) {
                return Err(TensorError::shape(
                    "pad",
                    format!("circular pad {p:?} exceeds extent {n} on axis {a}"),
                ));
            }
            let len = p.before + n + p.after;
            out_shape.push(len);
            maps.push(
                (0..len)
                    .map(|o| {
                        let src = o as isize - p.before as isize;
                        let idx = if (0..n as isize).contains(&src) {
                            Some(src as usize)
                        } else {
                            match p.mode {
                                PadMode::Zero => None,
                                PadMode::Circular => Some(src.rem_euclid(n as isize) as usize),
                                PadMode::Replicate => Some(src.clamp(0, n as isize - 1) as usize),
                            }
                        };
                        idx.map(|i| i * in_strides[a])
                    })
                    .collect(),
            );
        }
        self.gather_with_map("pad", &out_shape, gather_map(&maps))
    }

    /// Rolls (circularly shifts) `shift` positions along `axis`:
    /// output index `i` takes input index `i - shift`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::shape("roll", format!("axis {axis} of {:?}", self.shape())));
        }
        let n = self.shape()[axis] as isize;
        let idx: Vec<usize> = (0..n).map(|i| (i - shift).rem_euclid(n) as usize).collect();
        self.index_select(axis, &idx)
    }

    fn gather_with_map(
        &self,
        name: &'static str,
        shape: &[usize],
        map: Vec<Option<usize>>,
    ) -> Result<Tensor> {
        let x = self.values();
        let v = map.iter().map(|m| m.map_or(0.0, |i| x[i])).collect();
        let op = GatherBackward {
            name,
            map,
            input_len: self.numel(),
        };
        Tensor::from_op(v, shape, op, &[self])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, s) in tensors.iter().zip(&sizes) {
                let len = s * inner;
                v.extend_from_slice(&t.values()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(v, &shape, ConcatBackward { outer, sizes, inner }, tensors)
    }
}
