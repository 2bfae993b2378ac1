//! Offload benchmark: a rollout of N six-hour steps with every step's
//! input offloaded, then one backward pass.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wm_offload::{OffloadConfig, OffloadEngine, StoreKind};
use wm_tensor::{Gradients, Tensor};

use crate::error::{config, Result};
use crate::model::{LatentState, WeatherMesh};
use crate::rollout::{rollout, Recording, RolloutPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub segments: usize,
    pub high_water: i64,
    /// Backward steps whose input had not been prefetched.
    pub stalls: usize,
    /// Prefetched inputs that arrived after backward asked for them.
    pub late_arrivals: usize,
    pub wall_time: Duration,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "segments,high_water_bytes,stalls,late_arrivals,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.segments,
            self.high_water,
            self.stalls,
            self.late_arrivals,
            self.wall_time.as_secs_f64()
        )
    }
}

pub struct BenchOptions {
    pub segments: usize,
    pub budget_bytes: usize,
    pub lookahead: usize,
    pub latency: Duration,
    pub store: StoreKind,
    pub seed: u64,
}

/// Runs the rollout and backward, failing if the arena budget was exceeded.
pub fn bench_offload(model: &WeatherMesh, opts: &BenchOptions) -> Result<BenchRow> {
    if opts.segments == 0 {
        return Err(config("benchmark needs at least one segment"));
    }
    let n = model.cfg.tokens() * model.cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tokens = Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[model.cfg.tokens(), model.cfg.hidden])?;
    let z0 = LatentState { time: 0, tokens };
    let plan = RolloutPlan(vec![6; opts.segments]);

    let start = Instant::now();
    let engine = OffloadEngine::new(OffloadConfig {
        budget_bytes: opts.budget_bytes,
        lookahead: opts.lookahead,
        store: opts.store,
        latency: opts.latency,
    })?;
    let z = rollout(model, &z0, &plan, Recording::Offload(&engine))?;
    let seed = vec![1.0; z.tokens.numel()];
    let mut grads = Gradients::default();
    z.tokens.backward_with_seed(seed, &mut grads)?;
    drop(z);
    let wall_time = start.elapsed();
    let stats = engine.stats();
    engine.check_budget()?;
    Ok(BenchRow {
        segments: opts.segments,
        high_water: stats.high_water,
        stalls: stats.demand_fetches,
        late_arrivals: stats.late_arrivals,
        wall_time,
    })
}
