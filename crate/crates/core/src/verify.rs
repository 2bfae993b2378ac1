//! Quick invariant suite behind the `verify` command. Each check builds
//! small models or random cases and compares against a direct
//! recomputation, so a healthy build passes in well under a minute.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use wm_offload::{OffloadConfig, OffloadEngine};
use wm_tensor::serialize::{read_params, write_params};
use wm_tensor::{no_grad, Tensor};

use crate::attention::{AttentionContext, NattenBlock};
use crate::config::ModelConfig;
use crate::data::{generate, Dataset, GenConfig, Normalizer};
use crate::eval::{blur_score, latitude_rmse, row_power};
use crate::grid::{flat_index, latitude_weights, neighborhood, Extents, GridSpec};
use crate::model::{LatentState, DEFAULT_SOURCE};
use crate::module::{Init, Module};
use crate::rollout::{forecast, greedy_plan, rollout, Initial, Recording, RolloutPlan};
use crate::train::{sample_dts, sample_loss, DtSchedule, Stage, TrainConfig, TrainSample, Trainer, PRETRAIN_TAG};
use crate::WeatherMesh;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("rollout-plans", plans),
    ("latent-composition", composition),
    ("offload-equivalence", offload),
    ("finite-differences", gradients),
    ("attention-geometry", geometry),
    ("metric-oracles", metrics),
    ("curriculum", curriculum),
    ("stage-freezing", freezing),
    ("full-scale-dry-run", full_shapes),
    ("file-roundtrips", roundtrips),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check whose name passes `filter`; panics count as failures.
pub fn run_suite(filter: impl Fn(&str) -> bool) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|(n, _)| filter(n))
        .map(|(name, f)| {
            let start = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("check panicked".into()));
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail, seconds }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn tiny_input(cfg: &ModelConfig, seed: u64) -> Result<crate::ModelInput, String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cells = cfg.grid.cells();
    let state = crate::data::WeatherState {
        time: 0,
        surface: uniform(&mut r, cfg.surface_out * cells),
        atmos: uniform(&mut r, cfg.atmos * cfg.levels * cells),
    };
    state.to_input(cfg).map_err(s)
}

fn plans() -> Result<String, String> {
    for dt in 0..=336u32 {
        let p = greedy_plan(dt as i64).map_err(s)?;
        ensure(p.total_hours() == dt && p.count(6) == (dt / 6) as usize && p.count(1) == (dt % 6) as usize, || {
            format!("dt {dt}: {:?}", p.steps())
        })?;
    }
    Ok("0..=336 h".into())
}

fn composition() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 1).map_err(s)?;
    let x = tiny_input(&cfg, 2)?;
    let (_, _, p0) = m.calls.snapshot();
    let f = forecast(&m, Initial::Single(&x), 12, Recording::Plain).map_err(s)?;
    let (_, _, p1) = m.calls.snapshot();
    let z = m.process(&m.process(&m.encode(&x).map_err(s)?, 6).map_err(s)?, 6).map_err(s)?;
    let manual = m.decode(&z).map_err(s)?;
    ensure(bits(f.atmos.values()) == bits(manual.atmos.values()), || "forecast(12) != decode(P6(P6(encode)))".into())?;
    ensure(p1 - p0 == 2, || format!("{} processor calls", p1 - p0))?;
    Ok("bitwise".into())
}

fn offload() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 3).map_err(s)?;
    let n = cfg.tokens() * cfg.hidden;
    let z0 = Tensor::param(uniform(&mut ChaCha8Rng::seed_from_u64(4), n), &[cfg.tokens(), cfg.hidden]).map_err(s)?;
    let grads = |rec: Recording| -> Result<Vec<Vec<u64>>, String> {
        let z = rollout(&m, &LatentState { time: 0, tokens: z0.clone() }, &RolloutPlan(vec![6; 4]), rec).map_err(s)?;
        let g = z.tokens.mul(&z.tokens).and_then(|t| t.sum()).and_then(|t| t.backward()).map_err(s)?;
        let mut out = Vec::new();
        m.visit("", &mut |_, t| out.push(bits(&g.get_or_zeros(t))));
        out.push(bits(&g.get_or_zeros(&z0)));
        Ok(out)
    };
    let ck = grads(Recording::Checkpoint)?;
    let engine = OffloadEngine::new(OffloadConfig::new(usize::MAX / 2)).map_err(s)?;
    let off = grads(Recording::Offload(&engine))?;
    ensure(ck == off, || "offloaded gradients differ".into())?;
    let stalls = engine.stats().demand_fetches;
    ensure(stalls == 0, || format!("{stalls} stalls"))?;
    Ok("4 steps bitwise, 0 stalls".into())
}

fn gradients() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 5).map_err(s)?;
    let state = |seed, time| -> Result<crate::data::WeatherState, String> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cells = cfg.grid.cells();
        Ok(crate::data::WeatherState {
            time,
            surface: uniform(&mut r, cfg.surface_out * cells),
            atmos: uniform(&mut r, cfg.atmos * cfg.levels * cells),
        })
    };
    let sample = TrainSample {
        sources: vec![(DEFAULT_SOURCE.into(), state(6, 0)?)],
        targets: vec![(12, state(7, 12)?)],
    };
    let loss = sample_loss(&m, &sample, Recording::Plain).map_err(s)?;
    let g = loss.backward().map_err(s)?;
    let mut flat = Vec::new();
    m.visit("", &mut |_, t| flat.extend(g.get_or_zeros(t)));
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let mut u = uniform(&mut r, flat.len());
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = flat.iter().zip(&u).map(|(a, b)| a * b).sum();
        let shifted = |step: f64| -> Result<f64, String> {
            let mut p = m.clone();
            let mut off = 0;
            p.visit_mut("", &mut |_, t| {
                let vals: Vec<f64> = t.values().iter().enumerate().map(|(i, v)| v + step * u[off + i]).collect();
                off += vals.len();
                *t = Tensor::param(vals, t.shape()).expect("same shape");
            });
            no_grad(|| sample_loss(&p, &sample, Recording::Plain).map(|l| l.item())).map_err(s)
        };
        let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("8 directions, worst relative error {worst:.1e}"))
}

fn geometry() -> Result<String, String> {
    for (grid, window) in [([3usize, 5, 10], [3usize, 3, 5]), ([5, 90, 180], [5, 7, 7])] {
        let want: usize = window.iter().product();
        for d in 0..grid[0] {
            for r in 0..grid[1] {
                for c in 0..grid[2] {
                    let mut n: Vec<usize> = neighborhood([d, r, c], window, grid)
                        .map_err(s)?
                        .iter()
                        .map(|t| flat_index(*t, grid))
                        .collect();
                    n.sort_unstable();
                    n.dedup();
                    ensure(n.len() == want, || format!("{:?} in {grid:?}: {} neighbours", [d, r, c], n.len()))?;
                }
            }
        }
    }
    let cfg = ModelConfig::desk();
    let natten = cfg.natten();
    let grid: Extents = cfg.latent_extents();
    let ctx = AttentionContext::new(grid, natten).map_err(s)?;
    let block = NattenBlock::new(0, &natten, &mut Init::new(9), false);
    let x = Tensor::new(uniform(&mut ChaCha8Rng::seed_from_u64(10), ctx.tokens() * natten.hidden), &[
        ctx.tokens(),
        natten.hidden,
    ])
    .map_err(s)?;
    let w = block.attention_weights(&x, &ctx).map_err(s)?;
    let err = w.chunks(ctx.window_size()).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure(err < 1e-12, || format!("softmax rows off by {err:e}"))?;
    Ok(format!("full windows, softmax error {err:.1e}"))
}

fn metrics() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (rows, cols) = (r.random_range(1..6), r.random_range(1..8));
        let spec = GridSpec::centered(rows, cols);
        let p = uniform(&mut r, rows * cols);
        let t = uniform(&mut r, rows * cols);
        let got = latitude_rmse(&[&p], &[&t], &latitude_weights(&spec), cols).map_err(s)?;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..rows {
            let w = spec.latitude(i).to_radians().cos();
            for j in 0..cols {
                num += w * (p[i * cols + j] - t[i * cols + j]).powi(2);
                den += 1.0;
            }
        }
        let want = (num / den).sqrt();
        ensure((got - want).abs() < 1e-12, || format!("rmse {got} vs {want}"))?;
    }
    let mut planner = FftPlanner::new();
    let row = uniform(&mut r, 37);
    let mean = row.iter().sum::<f64>() / 37.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0;
    let total: f64 = row_power(&row, &mut planner).iter().sum();
    ensure((total - var).abs() < 1e-10, || format!("Parseval {total} vs {var}"))?;
    ensure(blur_score(4.0).map_err(s)? == Some(0.5), || "blur(4) != 0.5".into())?;
    Ok("20 RMSE cases, Parseval, blur(4)".into())
}

fn curriculum() -> Result<String, String> {
    let sched = DtSchedule::pretrain();
    for (step, max) in [(0usize, 12u32), (1_000, 24), (15_000, 30), (21_000, 36), (26_000, 42), (30_000, 48)] {
        let want: Vec<u32> = (0..=max).step_by(6).collect();
        ensure(sched.admissible(step) == want.as_slice(), || format!("step {step}: {:?}", sched.admissible(step)))?;
    }
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for i in 0..1000usize {
        let adm = sched.admissible(i * 42);
        let d = sample_dts(adm, 5, &mut r).map_err(s)?;
        ensure(d.last() == adm.last(), || format!("draw {d:?} misses {:?}", adm.last()))?;
    }
    Ok("schedule rows, 1000 draws".into())
}

fn freezing() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let ds = generate(&GenConfig {
        grid: cfg.grid,
        channels: crate::data::Channels::of(&cfg),
        hours: 60,
        seed: 13,
        start: 0,
        advection_only: false,
    })
    .map_err(s)?;
    let norm = Normalizer::fit(&ds).map_err(s)?;
    let truth = norm.normalize_dataset(&ds);
    let mut m = WeatherMesh::new(cfg, 14).map_err(s)?;
    m.trained_stages.push(PRETRAIN_TAG.into());
    let frozen = |m: &WeatherMesh| -> Vec<Vec<u64>> {
        m.named_params("")
            .iter()
            .filter(|(n, _)| n.starts_with("enc.") || n.starts_with("dec."))
            .map(|(_, t)| bits(t.values()))
            .collect()
    };
    let before = frozen(&m);
    let tc = TrainConfig { steps: 2, max_lr: 0.02, ..TrainConfig::default() };
    Trainer::new(&mut m, Stage::OneHour, tc, &truth, vec![]).map_err(s)?.run(|_| {}).map_err(s)?;
    ensure(before == frozen(&m), || "1h stage touched the encoder or decoder".into())?;
    Ok("1h stage keeps encoder/decoder bytes".into())
}

fn full_shapes() -> Result<String, String> {
    let dry = ModelConfig::full().dry_run().map_err(s)?;
    ensure(dry.latent == [5, 90, 180], || format!("latent {:?}", dry.latent))?;
    Ok(format!("latent {:?}", dry.latent))
}

fn roundtrips() -> Result<String, String> {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 15).map_err(s)?;
    let params = m.named_params("");
    let mut buf = Vec::new();
    write_params(&mut buf, &params).map_err(s)?;
    let back = read_params(buf.as_slice()).map_err(s)?;
    ensure(
        back.len() == params.len()
            && back.iter().zip(&params).all(|(a, b)| a.0 == b.0 && bits(a.1.values()) == bits(b.1.values())),
        || "parameter file does not round-trip".into(),
    )?;
    let ds = generate(&GenConfig {
        grid: cfg.grid,
        channels: crate::data::Channels::of(&cfg),
        hours: 3,
        seed: 16,
        start: 0,
        advection_only: false,
    })
    .map_err(s)?;
    let mut buf = Vec::new();
    ds.write_to(&mut buf).map_err(s)?;
    ensure(Dataset::read_from(&mut buf.as_slice()).map_err(s)? == ds, || "dataset does not round-trip".into())?;
    Ok("parameters and dataset".into())
}
