//! Neighborhood-attention transformer blocks with rotary position
//! embeddings over a (depth, rows, cols) token grid whose column axis is
//! periodic.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use wm_tensor::{no_grad, Tensor};

use crate::error::{config, CoreError, Result};
use crate::grid::{neighbor_table, validate_window, Extents};
use crate::module::{module, Init};

pub const ROTARY_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NattenConfig {
    pub hidden: usize,
    pub heads: usize,
    pub window: Extents,
    pub mlp_ratio: usize,
}

impl NattenConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self, grid: Extents) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(config(format!("head dim {} must be even for rotary", self.head_dim())));
        }
        if self.mlp_ratio == 0 {
            return Err(config("mlp ratio must be positive"));
        }
        validate_window(self.window, grid)
    }
}

/// Axis (0 depth, 1 row, 2 col) and frequency of every rotary pair in a head.
///
/// Pairs go round-robin to columns, rows, depth. Column frequencies are
/// integer wavenumbers over the grid circumference so a full wrap is an
/// exact identity; rows and depth use geometric frequencies.
pub fn rotary_bands(head_dim: usize, grid: Extents) -> Result<Vec<(usize, f64)>> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return Err(config(format!("head dim {head_dim} must be even and positive")));
    }
    let pairs = head_dim / 2;
    let order = [2, 1, 0];
    let count = |axis_slot: usize| (0..pairs).filter(|p| p % 3 == axis_slot).count();
    let max_m = (grid[2] / 2).max(1);
    Ok((0..pairs)
        .map(|p| {
            let slot = p % 3;
            let j = p / 3;
            let axis = order[slot];
            let freq = if axis == 2 {
                2.0 * PI * (1 + j % max_m) as f64 / grid[2] as f64
            } else {
                ROTARY_BASE.powf(-(j as f64) / count(slot) as f64)
            };
            (axis, freq)
        })
        .collect())
}

/// Rotation angle of each pair at token position `pos`.
pub fn rotary_angles(bands: &[(usize, f64)], pos: Extents) -> Vec<f64> {
    bands.iter().map(|&(axis, f)| f * pos[axis] as f64).collect()
}

/// Rotates consecutive pairs of `x` by `angles`.
pub fn rotate_pairs(x: &[f64], angles: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, a) in angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i + 1] * c + x[2 * i] * s;
    }
    out
}

/// Precomputed rotary tables for `[tokens, hidden]` features.
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
    swap: Vec<usize>,
}

impl Rotary {
    pub fn new(grid: Extents, heads: usize, head_dim: usize) -> Result<Self> {
        let bands = rotary_bands(head_dim, grid)?;
        let hidden = heads * head_dim;
        let tokens: usize = grid.iter().product();
        let mut cos = Vec::with_capacity(tokens * hidden);
        let mut sin = Vec::with_capacity(tokens * hidden);
        for d in 0..grid[0] {
            for r in 0..grid[1] {
                for c in 0..grid[2] {
                    let angles = rotary_angles(&bands, [d, r, c]);
                    for _ in 0..heads {
                        for a in &angles {
                            let (s, co) = a.sin_cos();
                            cos.extend([co, co]);
                            sin.extend([-s, s]);
                        }
                    }
                }
            }
        }
        let swap = (0..hidden).map(|i| i ^ 1).collect();
        Ok(Rotary {
            cos: Tensor::new(cos, &[tokens, hidden])?,
            sin: Tensor::new(sin, &[tokens, hidden])?,
            swap,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let swapped = x.index_select(1, &self.swap)?;
        Ok(x.mul(&self.cos)?.add(&swapped.mul(&self.sin)?)?)
    }
}

/// Geometry shared by every block on one token grid.
pub struct AttentionContext {
    pub grid: Extents,
    pub cfg: NattenConfig,
    pub neighbors: Vec<usize>,
    pub rotary: Rotary,
}

impl AttentionContext {
    pub fn new(grid: Extents, cfg: NattenConfig) -> Result<Rc<Self>> {
        cfg.validate(grid)?;
        Ok(Rc::new(AttentionContext {
            grid,
            cfg,
            neighbors: neighbor_table(cfg.window, grid)?,
            rotary: Rotary::new(grid, cfg.heads, cfg.head_dim())?,
        }))
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn window_size(&self) -> usize {
        self.cfg.window.iter().product()
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then h + mlp(ln(h)).
#[derive(Clone)]
pub struct NattenBlock {
    pub index: usize,
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

module!(NattenBlock {
    ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out, ln2_g, ln2_b, w_up, b_up, w_down, b_down
});

const LN_EPS: f64 = 1e-6;

impl NattenBlock {
    /// Random block. With `zero_out`, the attention and MLP output
    /// projections start at zero so the block is the identity.
    pub fn new(index: usize, cfg: &NattenConfig, init: &mut Init, zero_out: bool) -> Self {
        let d = cfg.hidden;
        let m = d * cfg.mlp_ratio;
        let out_proj = |init: &mut Init, rows: usize, cols: usize| {
            if zero_out {
                init.constant(&[rows, cols], 0.0)
            } else {
                init.fan_in(&[rows, cols], rows)
            }
        };
        NattenBlock {
            index,
            ln1_g: init.constant(&[d], 1.0),
            ln1_b: init.constant(&[d], 0.0),
            w_qkv: init.fan_in(&[d, 3 * d], d),
            b_qkv: init.constant(&[3 * d], 0.0),
            w_out: out_proj(init, d, d),
            b_out: init.constant(&[d], 0.0),
            ln2_g: init.constant(&[d], 1.0),
            ln2_b: init.constant(&[d], 0.0),
            w_up: init.fan_in(&[d, m], d),
            b_up: init.constant(&[m], 0.0),
            w_down: out_proj(init, m, d),
            b_down: init.constant(&[d], 0.0),
        }
    }

    /// Softmax-normalized attention weights, shaped
    /// `[heads, tokens, window]`, and the attention output `[tokens, hidden]`.
    fn attend(&self, x: &Tensor, ctx: &AttentionContext) -> Result<(Tensor, Tensor)> {
        let (t, d) = (ctx.tokens(), ctx.cfg.hidden);
        let (h, dh, n) = (ctx.cfg.heads, ctx.cfg.head_dim(), ctx.window_size());
        let hn = x.layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS)?;
        let qkv = hn.linear(&self.w_qkv, &self.b_qkv)?;
        let q = ctx.rotary.apply(&qkv.narrow(1, 0, d)?)?;
        let k = ctx.rotary.apply(&qkv.narrow(1, d, d)?)?;
        let v = qkv.narrow(1, 2 * d, d)?;

        let q = q.reshape(&[t, h, dh])?.permute(&[1, 0, 2])?.reshape(&[h * t, 1, dh])?;
        let k = k
            .index_select(0, &ctx.neighbors)?
            .reshape(&[t, n, h, dh])?
            .permute(&[2, 0, 3, 1])?
            .reshape(&[h * t, dh, n])?;
        let v = v
            .index_select(0, &ctx.neighbors)?
            .reshape(&[t, n, h, dh])?
            .permute(&[2, 0, 1, 3])?
            .reshape(&[h * t, n, dh])?;
        let weights = q.matmul(&k)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
        let o = weights
            .matmul(&v)?
            .reshape(&[h, t, dh])?
            .permute(&[1, 0, 2])?
            .reshape(&[t, d])?;
        Ok((weights.reshape(&[h, t, n])?, o.linear(&self.w_out, &self.b_out)?))
    }

    pub fn forward(&self, x: &Tensor, ctx: &AttentionContext) -> Result<Tensor> {
        let expect = [ctx.tokens(), ctx.cfg.hidden];
        if x.shape() != expect {
            return Err(CoreError::Shape(format!(
                "block {} expects {expect:?}, got {:?}",
                self.index,
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(CoreError::NonFinite(format!("input of block {}", self.index)));
        }
        let (_, a) = self.attend(x, ctx)?;
        let x = x.add(&a)?;
        let m = x
            .layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)?
            .linear(&self.w_up, &self.b_up)?
            .gelu()?
            .linear(&self.w_down, &self.b_down)?;
        Ok(x.add(&m)?)
    }

    /// Attention weights `[heads, tokens, window]` for input `x`, in the
    /// neighbor order of [`crate::grid::neighborhood`].
    pub fn attention_weights(&self, x: &Tensor, ctx: &AttentionContext) -> Result<Vec<f64>> {
        no_grad(|| Ok(self.attend(x, ctx)?.0.to_vec()))
    }
}

/// A stack of blocks sharing one context.
#[derive(Clone)]
pub struct BlockStack {
    pub blocks: Vec<NattenBlock>,
}

module!(BlockStack {} children { blocks });

impl BlockStack {
    pub fn new(depth: usize, cfg: &NattenConfig, init: &mut Init, zero_out: bool) -> Self {
        BlockStack {
            blocks: (0..depth).map(|i| NattenBlock::new(i, cfg, init, zero_out)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &AttentionContext) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x, ctx)?;
        }
        Ok(x)
    }
}
