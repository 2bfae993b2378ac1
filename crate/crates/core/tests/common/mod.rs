#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wm_core::data::{generate, GenConfig, Channels, Dataset, WeatherState};
use wm_core::grid::GridSpec;
use wm_core::{Module, ModelConfig, ModelInput};
use wm_tensor::{Gradients, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Random model input for `cfg`.
pub fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
    let mut r = rng(seed);
    let (h, w) = (cfg.grid.rows, cfg.grid.cols);
    ModelInput {
        time: 0,
        surface: Tensor::new(uniform(&mut r, cfg.surface_in * h * w, 1.0), &[cfg.surface_in, h, w]).unwrap(),
        atmos: Tensor::new(uniform(&mut r, cfg.atmos * cfg.levels * h * w, 1.0), &[cfg.atmos, cfg.levels, h, w])
            .unwrap(),
    }
}

/// Random state with the dataset layout of `cfg`.
pub fn random_state(cfg: &ModelConfig, time: i64, seed: u64) -> WeatherState {
    let mut r = rng(seed);
    let cells = cfg.grid.cells();
    WeatherState {
        time,
        surface: uniform(&mut r, cfg.surface_out * cells, 1.0),
        atmos: uniform(&mut r, cfg.atmos * cfg.levels * cells, 1.0),
    }
}

/// Synthetic dataset on the grid and channels of `cfg`.
pub fn dataset_for(cfg: &ModelConfig, hours: usize, seed: u64) -> Dataset {
    generate(&GenConfig {
        grid: cfg.grid,
        channels: Channels::of(cfg),
        hours,
        seed,
        start: 0,
        advection_only: false,
    })
    .unwrap()
}

/// Directional derivative check. For each of `dirs` random unit
/// directions `u` over all parameters of `m`, compares `∇L·u` with
/// `(L(θ + εu) − L(θ − εu)) / 2ε`. Returns `(analytic, numeric)` pairs.
pub fn fd_directions<M: Module + Clone>(
    m: &M,
    loss: impl Fn(&M) -> Tensor,
    dirs: usize,
    seed: u64,
    eps: f64,
) -> Vec<(f64, f64)> {
    let l = loss(m);
    let grads: Gradients = l.backward().unwrap();
    let mut g = Vec::new();
    m.visit("", &mut |_, t| g.extend(grads.get_or_zeros(t)));
    let mut r = rng(seed);
    (0..dirs)
        .map(|_| {
            let mut u: Vec<f64> = (0..g.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let shifted = |s: f64| {
                let mut p = m.clone();
                let mut off = 0;
                p.visit_mut("", &mut |_, t| {
                    let vals: Vec<f64> = t.values().iter().enumerate().map(|(i, v)| v + s * u[off + i]).collect();
                    off += vals.len();
                    *t = Tensor::param(vals, t.shape()).unwrap();
                });
                wm_tensor::no_grad(|| loss(&p).item())
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            (analytic, numeric)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Fixed random weighting that turns a tensor into a scalar loss.
pub fn probe(t: &Tensor, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let w = Tensor::new(uniform(&mut r, t.numel(), 1.0), t.shape()).unwrap();
    t.mul(&w).unwrap().sum().unwrap()
}

/// Latitude-weighted RMSE by direct summation, with weights recomputed
/// from the grid's latitudes.
pub fn oracle_lat_rmse(pred: &[Vec<f64>], truth: &[Vec<f64>], spec: &GridSpec) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let mut s = 0.0;
        for i in 0..spec.rows {
            let lat = spec.north_lat - spec.lat_step * i as f64;
            let w = (lat * std::f64::consts::PI / 180.0).cos();
            for j in 0..spec.cols {
                let k = i * spec.cols + j;
                s += w * (p[k] - t[k]).powi(2);
            }
        }
        acc += (s / (spec.rows * spec.cols) as f64).sqrt();
    }
    acc / pred.len() as f64
}

/// One-sided power spectrum of a mean-removed row by a naive DFT.
pub fn naive_power(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    let mean = row.iter().sum::<f64>() / n as f64;
    (0..=n / 2)
        .map(|m| {
            if m == 0 {
                return 0.0;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in row.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (m * j) as f64 / n as f64;
                re += (v - mean) * a.cos();
                im += (v - mean) * a.sin();
            }
            let p = (re * re + im * im) / (n * n) as f64;
            if 2 * m == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}
