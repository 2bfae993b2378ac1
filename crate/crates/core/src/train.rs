//! Curriculum training: dt schedules, sampling, cosine learning rate, Adam,
//! and the pretrain / anneal / 1h / operational stages.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wm_offload::{OffloadConfig, OffloadEngine};
use wm_tensor::{Gradients, Tensor};

use crate::data::{Dataset, WeatherState};
use crate::error::{config, CoreError, Result};
use crate::model::{LatentState, ModelInput, Prediction, WeatherMesh};
use crate::module::{Init, Module};
use crate::rollout::{greedy_plan, Recording, Stepper};

/// Step-indexed admissible target lead times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtSchedule {
    /// `(first step, admissible dts)` with strictly increasing steps.
    pub thresholds: Vec<(usize, Vec<u32>)>,
}

fn multiples(step: u32, max: u32) -> Vec<u32> {
    (0..=max).step_by(step as usize).collect()
}

impl DtSchedule {
    /// The 6h-processor pretraining schedule.
    pub fn pretrain() -> Self {
        DtSchedule {
            thresholds: vec![
                (0, multiples(6, 12)),
                (1_000, multiples(6, 24)),
                (15_000, multiples(6, 30)),
                (21_000, multiples(6, 36)),
                (26_000, multiples(6, 42)),
                (30_000, multiples(6, 48)),
            ],
        }
    }

    /// Annealing cycle: every multiple of 6 up to 120 h from the start.
    pub fn anneal() -> Self {
        DtSchedule {
            thresholds: vec![(0, multiples(6, 120))],
        }
    }

    /// 1h-processor stage: every hour from 0 to 24.
    pub fn one_hour() -> Self {
        DtSchedule {
            thresholds: vec![(0, multiples(1, 24))],
        }
    }

    /// Operational fine-tuning: the first pretraining row.
    pub fn operational() -> Self {
        DtSchedule {
            thresholds: vec![(0, multiples(6, 12))],
        }
    }

    /// Thresholds multiplied by `factor` (rounded). Rows that collapse onto
    /// the same step keep the later, larger set.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out: Vec<(usize, Vec<u32>)> = Vec::new();
        for (s, dts) in &self.thresholds {
            let step = (*s as f64 * factor).round() as usize;
            match out.last_mut() {
                Some(last) if last.0 >= step => last.1 = dts.clone(),
                _ => out.push((step, dts.clone())),
            }
        }
        DtSchedule { thresholds: out }
    }

    pub fn validate(&self, horizon: u32) -> Result<()> {
        let Some(first) = self.thresholds.first() else {
            return Err(config("dt schedule has no rows"));
        };
        if first.0 != 0 {
            return Err(config("dt schedule must start at step 0"));
        }
        for (i, (s, dts)) in self.thresholds.iter().enumerate() {
            if dts.is_empty() {
                return Err(config(format!("schedule row at step {s} is empty")));
            }
            if let Some(bad) = dts.iter().find(|d| **d % horizon != 0) {
                return Err(config(format!("dt {bad} not a multiple of the {horizon}h horizon")));
            }
            if i > 0 {
                let (ps, pd) = &self.thresholds[i - 1];
                if s <= ps {
                    return Err(config(format!("schedule steps {ps} and {s} not increasing")));
                }
                if !pd.iter().all(|d| dts.contains(d)) {
                    return Err(config(format!("dt set at step {s} drops earlier dts")));
                }
            }
        }
        Ok(())
    }

    /// The set of the greatest threshold not after `step`.
    pub fn admissible(&self, step: usize) -> &[u32] {
        self.thresholds
            .iter()
            .rev()
            .find(|(s, _)| *s <= step)
            .map(|(_, d)| d.as_slice())
            .unwrap_or(&[])
    }
}

/// `k` distinct dts from `admissible`, always including its maximum, in
/// ascending order. The whole set when it has at most `k` entries.
pub fn sample_dts(admissible: &[u32], k: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let mut set: Vec<u32> = admissible.to_vec();
    set.sort_unstable();
    set.dedup();
    let Some(&max) = set.last() else {
        return Err(config("no admissible dts"));
    };
    if k == 0 {
        return Err(config("dt sample count must be at least 1"));
    }
    if set.len() <= k {
        return Ok(set);
    }
    let rest = &set[..set.len() - 1];
    let mut out: Vec<u32> = sample(rng, rest.len(), k - 1).into_iter().map(|i| rest[i]).collect();
    out.push(max);
    out.sort_unstable();
    Ok(out)
}

/// `k` distinct dts drawn uniformly, ascending.
pub fn sample_dts_uniform(admissible: &[u32], k: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if admissible.is_empty() || k == 0 {
        return Err(config("no admissible dts or zero sample count"));
    }
    if admissible.len() <= k {
        let mut v = admissible.to_vec();
        v.sort_unstable();
        return Ok(v);
    }
    let mut out: Vec<u32> = sample(rng, admissible.len(), k).into_iter().map(|i| admissible[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// `max · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(max: f64, step: usize, total: usize) -> f64 {
    let x = (step as f64 / total.max(1) as f64).min(1.0);
    max * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Anneal,
    #[serde(rename = "1h")]
    OneHour,
    Operational,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "anneal" => Ok(Stage::Anneal),
            "1h" => Ok(Stage::OneHour),
            "operational" => Ok(Stage::Operational),
            other => Err(config(format!("unknown stage {other:?} (pretrain, anneal, 1h, operational)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Anneal => "anneal",
            Stage::OneHour => "1h",
            Stage::Operational => "operational",
        }
    }

    /// Whether parameter `name` is updated in this stage.
    pub fn trains(self, name: &str, learnable_blend: bool) -> bool {
        match self {
            Stage::Pretrain | Stage::Anneal => {
                name.starts_with("enc.") || name.starts_with("dec.") || name.starts_with("p6.")
            }
            Stage::OneHour => name.starts_with("p1."),
            Stage::Operational => name.starts_with("enc.") || (learnable_blend && name.starts_with("blend.")),
        }
    }

    pub fn default_schedule(self) -> DtSchedule {
        match self {
            Stage::Pretrain => DtSchedule::pretrain(),
            Stage::Anneal => DtSchedule::anneal(),
            Stage::OneHour => DtSchedule::one_hour(),
            Stage::Operational => DtSchedule::operational(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub max_lr: f64,
    pub dt_samples: usize,
    pub seed: u64,
    /// Multiplier on the schedule's step thresholds.
    pub schedule_scale: f64,
    /// Replaces the stage's default schedule when set.
    pub schedule: Option<DtSchedule>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Recompute processor steps during backward.
    pub checkpoint: bool,
    /// Activation budget in bytes; enables offloading when set.
    pub offload_budget: Option<usize>,
    /// Learn the operational blend weights.
    pub learnable_blend: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            max_lr: 3e-4,
            dt_samples: 5,
            seed: 0,
            schedule_scale: 1.0,
            schedule: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            checkpoint: false,
            offload_budget: None,
            learnable_blend: false,
        }
    }
}

impl TrainConfig {
    /// Settings that train the desk model in a few hundred steps.
    pub fn desk(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            max_lr: 3e-3,
            seed,
            schedule_scale: steps as f64 / 42_000.0,
            ..TrainConfig::default()
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Default)]
pub struct Adam {
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl Adam {
    /// Applies one update to every `(name, grad)` pair.
    pub fn step(
        &mut self,
        model: &mut dyn Module,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut err = None;
        model.visit_mut("", &mut |name, t| {
            let Some(g) = grads.get(name) else {
                return;
            };
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut vals = t.to_vec();
            for i in 0..vals.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                vals[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
            match Tensor::param(vals, t.shape()) {
                Ok(n) => *t = n,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

/// Input state and per-dt targets in model (normalized) space.
pub struct TrainSample {
    pub sources: Vec<(String, WeatherState)>,
    pub targets: Vec<(u32, WeatherState)>,
}

fn flatten(p: &Prediction) -> Result<Tensor> {
    let s = p.surface.reshape(&[p.surface.numel()])?;
    let a = p.atmos.reshape(&[p.atmos.numel()])?;
    Ok(Tensor::concat(&[&s, &a], 0)?)
}

fn flatten_state(s: &WeatherState) -> Result<Tensor> {
    let mut v = s.surface.clone();
    v.extend_from_slice(&s.atmos);
    let n = v.len();
    Ok(Tensor::new(v, &[n])?)
}

/// Latents for several lead times from one encode, reusing the latent of
/// every shared plan prefix.
pub fn shared_rollouts(
    model: &WeatherMesh,
    z0: &LatentState,
    dts: &[u32],
    rec: Recording,
) -> Result<Vec<LatentState>> {
    let plans = dts
        .iter()
        .map(|&dt| greedy_plan(dt as i64))
        .collect::<Result<Vec<_>>>()?;
    for h in plans.iter().flat_map(|p| p.steps()) {
        model.processor(*h)?;
    }
    let mut stepper = Stepper::new(model, rec);
    let mut cache: HashMap<Vec<u32>, LatentState> = HashMap::new();
    let mut out = Vec::with_capacity(dts.len());
    for plan in &plans {
        let mut z = z0.clone();
        for k in 1..=plan.steps().len() {
            let prefix = plan.steps()[..k].to_vec();
            z = match cache.get(&prefix) {
                Some(c) => c.clone(),
                None => {
                    let next = stepper.step(&z, prefix[k - 1], k - 1)?;
                    cache.insert(prefix, next.clone());
                    next
                }
            };
        }
        out.push(z);
    }
    Ok(out)
}

/// Mean over dts of the MSE between decoded rollouts and targets.
pub fn sample_loss(model: &WeatherMesh, sample: &TrainSample, rec: Recording) -> Result<Tensor> {
    if sample.targets.is_empty() {
        return Err(config("sample has no targets"));
    }
    let inputs: Vec<(String, ModelInput)> = sample
        .sources
        .iter()
        .map(|(n, s)| Ok((n.clone(), s.to_input(&model.cfg)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(&str, &ModelInput)> = inputs.iter().map(|(n, x)| (n.as_str(), x)).collect();
    let z0 = model.blend_encode(&refs)?;
    let dts: Vec<u32> = sample.targets.iter().map(|(d, _)| *d).collect();
    let latents = shared_rollouts(model, &z0, &dts, rec)?;
    let mut total: Option<Tensor> = None;
    for (z, (_, target)) in latents.iter().zip(&sample.targets) {
        let pred = flatten(&model.decode(z)?)?;
        let l = pred.mse(&flatten_state(target)?)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / sample.targets.len() as f64)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dts: Vec<u32>,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,lr,loss,dts";

    pub fn csv_row(&self) -> String {
        let dts: Vec<String> = self.dts.iter().map(u32::to_string).collect();
        format!("{},{:e},{:e},{}", self.step, self.lr, self.loss, dts.join(";"))
    }
}

/// One training stage over normalized datasets.
pub struct Trainer<'a> {
    pub model: &'a mut WeatherMesh,
    pub cfg: TrainConfig,
    pub stage: Stage,
    schedule: DtSchedule,
    /// Normalized truth; targets come from here.
    truth: &'a Dataset,
    /// Normalized analyses per source name; the truth itself when empty.
    sources: Vec<(String, &'a Dataset)>,
    adam: Adam,
    rng: ChaCha8Rng,
}

pub const PRETRAIN_TAG: &str = "pretrain";

impl<'a> Trainer<'a> {
    /// Prepares a stage. The 1h and operational stages need a pretrained
    /// model; operational fine-tuning needs at least two sources and
    /// replaces the encoders by fresh ones named after them.
    pub fn new(
        model: &'a mut WeatherMesh,
        stage: Stage,
        cfg: TrainConfig,
        truth: &'a Dataset,
        sources: Vec<(String, &'a Dataset)>,
    ) -> Result<Self> {
        let schedule = cfg
            .schedule
            .clone()
            .unwrap_or_else(|| stage.default_schedule().scaled(if stage == Stage::Pretrain { cfg.schedule_scale } else { 1.0 }));
        let horizon = if stage == Stage::OneHour { 1 } else { 6 };
        schedule.validate(horizon)?;
        if cfg.steps == 0 || cfg.dt_samples == 0 || !(cfg.max_lr > 0.0) {
            return Err(config("steps, dt samples and max learning rate must be positive"));
        }
        let pretrained = model.trained_stages.iter().any(|s| s == PRETRAIN_TAG);
        match stage {
            Stage::OneHour | Stage::Operational if !pretrained => {
                return Err(config(format!("the {} stage needs a pretrained model", stage.name())));
            }
            Stage::OneHour if model.p1.is_none() => {
                return Err(config("model has no 1h processor"));
            }
            _ => {}
        }
        if stage == Stage::Operational {
            if sources.len() < 2 {
                return Err(config(format!(
                    "operational fine-tuning needs at least 2 sources, got {}",
                    sources.len()
                )));
            }
            let names: Vec<&str> = sources.iter().map(|(n, _)| n.as_str()).collect();
            let mut init = Init::new(cfg.seed ^ 0x0e4c_0de5);
            let mcfg = model.cfg.clone();
            model.encoders.replace(&names, &mcfg, &mut init);
            model.encoders.learnable_blend = cfg.learnable_blend;
        }
        for (n, ds) in &sources {
            if ds.grid != truth.grid || ds.channels != truth.channels || ds.times() != truth.times() {
                return Err(CoreError::Data(format!("source {n} does not align with the truth")));
            }
        }
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            stage,
            schedule,
            truth,
            sources,
            adam: Adam::default(),
        })
    }

    pub fn schedule(&self) -> &DtSchedule {
        &self.schedule
    }

    pub fn draw_dts(&mut self, step: usize) -> Result<Vec<u32>> {
        let adm = self.schedule.admissible(step).to_vec();
        match self.stage {
            Stage::OneHour => sample_dts_uniform(&adm, self.cfg.dt_samples, &mut self.rng),
            _ => sample_dts(&adm, self.cfg.dt_samples, &mut self.rng),
        }
    }

    /// Draws dts and an initial time and builds the sample.
    pub fn draw_sample(&mut self, step: usize) -> Result<TrainSample> {
        let dts = self.draw_dts(step)?;
        let max = *dts.last().expect("non-empty") as i64;
        let times = self.truth.times();
        let (first, last) = (times[0], *times.last().expect("non-empty"));
        if last - first < max {
            return Err(CoreError::Data(format!(
                "dataset spans {} hours, too short for dt {max}",
                last - first + 1
            )));
        }
        let t0 = self.rng.random_range(first..=last - max);
        let window = self.truth.window(t0, &dts)?;
        let sources = if self.sources.is_empty() {
            vec![(self.model.encoders.names()[0].clone(), window.input)]
        } else {
            self.sources
                .iter()
                .map(|(n, ds)| Ok((n.clone(), ds.at(t0)?.clone())))
                .collect::<Result<_>>()?
        };
        Ok(TrainSample {
            sources,
            targets: window.targets,
        })
    }

    pub fn step(&mut self, step: usize) -> Result<StepReport> {
        let sample = self.draw_sample(step)?;
        let lr = cosine_lr(self.cfg.max_lr, step, self.cfg.steps);
        let engine = match self.cfg.offload_budget {
            Some(b) => Some(OffloadEngine::new(OffloadConfig::new(b))?),
            None => None,
        };
        let rec = match (&engine, self.cfg.checkpoint) {
            (Some(e), _) => Recording::Offload(e),
            (None, true) => Recording::Checkpoint,
            (None, false) => Recording::Plain,
        };
        let loss = sample_loss(self.model, &sample, rec)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(CoreError::Training {
                step,
                detail: format!("loss is {value} for dts {:?}", dts_of(&sample)),
            });
        }
        let grads = loss.backward()?;
        drop(loss);
        drop(engine);
        let mut update = self.collect(&grads);
        clip(&mut update, self.cfg.clip_norm);
        self.adam.step(self.model, &update, lr, &self.cfg)?;
        if self.stage == Stage::Operational && self.model.encoders.learnable_blend {
            let w = self.model.encoders.weights();
            self.model.encoders.set_weights(&w)?;
        }
        Ok(StepReport {
            step,
            lr,
            loss: value,
            dts: dts_of(&sample),
        })
    }

    fn collect(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        let learnable = self.model.encoders.learnable_blend;
        self.model.visit("", &mut |name, t| {
            if self.stage.trains(name, learnable) {
                out.insert(name.to_string(), grads.get_or_zeros(t));
            }
        });
        out
    }

    /// Runs every step, calling `log` after each.
    pub fn run(&mut self, mut log: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(self.cfg.steps);
        for s in 0..self.cfg.steps {
            let r = self.step(s)?;
            log(&r);
            reports.push(r);
        }
        self.mark_trained();
        Ok(reports)
    }

    /// Records the stage as completed on the model.
    pub fn mark_trained(&mut self) {
        let tag = match self.stage {
            Stage::Pretrain => PRETRAIN_TAG,
            other => other.name(),
        };
        if !self.model.trained_stages.iter().any(|s| s == tag) {
            self.model.trained_stages.push(tag.to_string());
        }
    }
}

fn dts_of(s: &TrainSample) -> Vec<u32> {
    s.targets.iter().map(|(d, _)| *d).collect()
}

fn clip(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut().flatten() {
            *g *= s;
        }
    }
}
