//! Greedy mixed-horizon plans and latent-space rollout.

use std::rc::Rc;

use wm_offload::OffloadEngine;
use wm_tensor::{checkpoint, Segment};

use crate::error::{CoreError, Result};
use crate::model::{LatentState, ModelInput, Prediction, WeatherMesh};

pub const DEFAULT_MAX_DT: u32 = 336;

/// Processor horizons in application order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RolloutPlan(pub Vec<u32>);

impl RolloutPlan {
    pub fn total_hours(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn count(&self, horizon: u32) -> usize {
        self.0.iter().filter(|&&h| h == horizon).count()
    }

    pub fn steps(&self) -> &[u32] {
        &self.0
    }
}

/// `dt / 6` six-hour steps followed by `dt % 6` one-hour steps.
pub fn greedy_plan(dt: i64) -> Result<RolloutPlan> {
    greedy_plan_capped(dt, DEFAULT_MAX_DT)
}

pub fn greedy_plan_capped(dt: i64, max_dt: u32) -> Result<RolloutPlan> {
    if dt < 0 {
        return Err(CoreError::Plan(format!("lead time {dt}h is negative")));
    }
    if dt > max_dt as i64 {
        return Err(CoreError::Plan(format!("lead time {dt}h exceeds the {max_dt}h cap")));
    }
    let dt = dt as u32;
    let mut steps = vec![6; (dt / 6) as usize];
    steps.extend(std::iter::repeat_n(1, (dt % 6) as usize));
    Ok(RolloutPlan(steps))
}

/// How processor applications are recorded for backward.
#[derive(Clone, Copy, Default)]
pub enum Recording<'a> {
    /// Every intermediate kept.
    #[default]
    Plain,
    /// Each application recomputed during backward.
    Checkpoint,
    /// Each application is a checkpoint whose input lives in a host store.
    Offload(&'a OffloadEngine),
}

/// Applies single processor steps under one recording mode, building each
/// processor's checkpoint segment once.
pub struct Stepper<'m, 'e> {
    model: &'m WeatherMesh,
    rec: Recording<'e>,
    segments: Vec<(u32, Segment)>,
}

impl<'m, 'e> Stepper<'m, 'e> {
    pub fn new(model: &'m WeatherMesh, rec: Recording<'e>) -> Self {
        Stepper {
            model,
            rec,
            segments: Vec::new(),
        }
    }

    fn segment(&mut self, h: u32) -> Result<Segment> {
        if let Some((_, s)) = self.segments.iter().find(|(k, _)| *k == h) {
            return Ok(Rc::clone(s));
        }
        let s = self.model.processor(h)?.segment(self.model.context());
        self.segments.push((h, Rc::clone(&s)));
        Ok(s)
    }

    /// One application of the `h`-hour processor; `index` labels errors.
    pub fn step(&mut self, z: &LatentState, h: u32, index: usize) -> Result<LatentState> {
        let model = self.model;
        let next = match self.rec {
            Recording::Plain => model.process(z, h)?,
            Recording::Checkpoint => {
                let seg = self.segment(h)?;
                model.count_process();
                let tokens = checkpoint(&seg, &z.tokens)?;
                LatentState { time: z.time + h as i64, tokens }
            }
            Recording::Offload(engine) => {
                let seg = self.segment(h)?;
                model.count_process();
                let tokens = engine.checkpoint(&seg, &z.tokens)?;
                LatentState { time: z.time + h as i64, tokens }
            }
        };
        if !next.tokens.all_finite() {
            return Err(CoreError::NonFinite(format!("latent after rollout step {index}")));
        }
        Ok(next)
    }
}

/// Applies the plan's processors to `z0` without leaving latent space.
pub fn rollout(model: &WeatherMesh, z0: &LatentState, plan: &RolloutPlan, rec: Recording) -> Result<LatentState> {
    for &h in plan.steps() {
        model.processor(h)?;
    }
    let mut stepper = Stepper::new(model, rec);
    let mut z = z0.clone();
    for (i, &h) in plan.steps().iter().enumerate() {
        z = stepper.step(&z, h, i)?;
    }
    Ok(z)
}

/// Initial condition for a forecast: one analysis or several to blend.
pub enum Initial<'a> {
    Single(&'a ModelInput),
    Sources(&'a [(&'a str, &'a ModelInput)]),
}

/// `decode(rollout(encode(x), greedy_plan(dt)))`.
pub fn forecast(model: &WeatherMesh, init: Initial, dt: i64, rec: Recording) -> Result<Prediction> {
    let plan = greedy_plan(dt)?;
    let z0 = match init {
        Initial::Single(x) => model.encode(x)?,
        Initial::Sources(s) => model.blend_encode(s)?,
    };
    let z = rollout(model, &z0, &plan, rec)?;
    model.decode(&z)
}
