use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::json;
use wm_core::bench::{bench_offload as run_bench, BenchOptions, BenchRow};
use wm_core::data::{
    generate, perturbed_source, source_name, source_path, Channels, Dataset, GenConfig, Normalizer, WeatherState,
};
use wm_core::eval::{equivalent_wavelength_km, latitude_rmse, mean_blur, scorecard as score, ForecastSet};
use wm_core::grid::latitude_weights;
use wm_core::persist;
use wm_core::rollout::{forecast as run_forecast, Initial, Recording};
use wm_core::train::{Stage, StepReport, TrainConfig, Trainer};
use wm_core::verify::{check_names, run_suite};
use wm_core::{CoreError, ModelConfig, ModelInput, WeatherMesh};
use wm_offload::{OffloadConfig, OffloadEngine, StoreKind};
use wm_tensor::no_grad;

use crate::manifest::{output_path, RunManifest};
use crate::{BenchArgs, EvaluateArgs, ForecastArgs, GenDataArgs, ScorecardArgs, TrainArgs, VerifyArgs};

/// Unlimited arena budget; large enough to never bind, small enough to add to.
const UNLIMITED: usize = usize::MAX / 2;

#[derive(Debug)]
pub enum Failure {
    Core(CoreError),
    Usage(String),
    Verify(String),
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.category(),
            Failure::Usage(_) => "usage",
            Failure::Verify(_) => "verify",
        }
    }

    pub fn status(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Usage(m) | Failure::Verify(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Core(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// A preset name, or else a path to a model config TOML.
fn resolve_config(s: &str) -> Result<ModelConfig> {
    match ModelConfig::preset(s) {
        Ok(cfg) => Ok(cfg),
        Err(_) => Ok(ModelConfig::load(Path::new(s))?),
    }
}

fn read(path: &Path) -> Result<Dataset> {
    Dataset::read(path).map_err(|e| match e {
        CoreError::Io(io) => CoreError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
    .map_err(Failure::from)
}

fn check_fits(ds: &Dataset, cfg: &ModelConfig, what: &Path) -> Result<()> {
    if ds.grid != cfg.grid || ds.channels != Channels::of(cfg) {
        return Err(CoreError::Data(format!("{} does not match the model grid and channels", what.display())).into());
    }
    Ok(())
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CoreError::from)?;
    }
    Ok(())
}

fn finish(m: RunManifest, primary: &Path, start: Instant) -> Result<()> {
    let took: Duration = start.elapsed();
    let path = m.write_for(primary, took)?;
    eprintln!("wrote {} ({:.1} s)", path.display(), took.as_secs_f64());
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = resolve_config(&a.spec)?;
    if !(a.source_noise >= 0.0) {
        return Err(usage("--source-noise must be non-negative"));
    }
    let gc = GenConfig {
        grid: cfg.grid,
        channels: Channels::of(&cfg),
        hours: a.hours,
        seed: a.seed,
        start: a.start,
        advection_only: a.advection_only,
    };
    let truth = generate(&gc)?;
    let out = output_path(&a.out);
    create_parent(&out)?;
    truth.write(&out)?;
    let mut m = RunManifest::new(
        "gen-data",
        json!({
            "spec": a.spec, "model": cfg, "hours": a.hours, "start": a.start,
            "sources": a.sources, "source_noise": a.source_noise, "advection_only": a.advection_only,
        }),
        a.seed,
    );
    m.output(&out);
    for k in 0..a.sources {
        let p = source_path(&out, &source_name(k));
        perturbed_source(&truth, a.seed, k, a.source_noise).write(&p)?;
        m.output(&p);
    }
    finish(m, &out, start)
}

fn discover_sources(data: &Path) -> Vec<String> {
    (0..)
        .map(source_name)
        .take_while(|n| source_path(data, n).is_file())
        .collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let stage = Stage::parse(&a.stage)?;
    let data = read(&a.data)?;
    let (mut model, norm) = match &a.init_model {
        Some(dir) => {
            let saved = persist::load(dir)?;
            (saved.model, saved.normalizer)
        }
        None => {
            let cfg = resolve_config(&a.config)?;
            let norm = Normalizer::fit(&data)?;
            (WeatherMesh::new(cfg, a.seed)?, norm)
        }
    };
    check_fits(&data, &model.cfg, &a.data)?;
    let truth = norm.normalize_dataset(&data);

    let names = match (stage, a.sources.is_empty()) {
        (Stage::Operational, true) => discover_sources(&a.data),
        (_, _) => a.sources.clone(),
    };
    let mut source_data = Vec::new();
    for n in &names {
        let p = source_path(&a.data, n);
        let ds = read(&p)?;
        check_fits(&ds, &model.cfg, &p)?;
        source_data.push((n.clone(), norm.normalize_dataset(&ds)));
    }
    let sources: Vec<(String, &Dataset)> = source_data.iter().map(|(n, d)| (n.clone(), d)).collect();

    let mut tc = TrainConfig::desk(a.steps, a.seed);
    if let Some(lr) = a.lr {
        tc.max_lr = lr;
    }
    tc.learnable_blend = a.learnable_blend;
    tc.offload_budget = a.offload_budget;

    let out = output_path(&a.out);
    std::fs::create_dir_all(&out).map_err(CoreError::from)?;
    let mut log = vec![StepReport::CSV_HEADER.to_string()];
    let mut m = RunManifest::new(
        "train",
        json!({ "model": model.cfg, "train": tc, "stage": stage.name(), "sources": names,
                "init_model": a.init_model, "data": a.data }),
        a.seed,
    );
    println!("{}", StepReport::CSV_HEADER);
    let mut trainer = Trainer::new(&mut model, stage, tc.clone(), &truth, sources)?;
    for s in 0..tc.steps {
        let r = trainer.step(s)?;
        println!("{}", r.csv_row());
        log.push(r.csv_row());
        if a.checkpoint_every > 0 && (s + 1) % a.checkpoint_every == 0 && s + 1 < tc.steps {
            let dir = out.join("checkpoints").join(format!("step-{:06}", s + 1));
            persist::save(&dir, trainer.model, &norm)?;
            m.output(&dir);
        }
    }
    trainer.mark_trained();
    drop(trainer);
    persist::save(&out, &model, &norm)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log.join("\n") + "\n").map_err(CoreError::from)?;
    m.output(&out);
    m.output(&log_path);
    finish(m, &out, start)
}

fn state_of(p: &wm_core::Prediction) -> WeatherState {
    WeatherState {
        time: p.time,
        surface: p.surface.to_vec(),
        atmos: p.atmos.to_vec(),
    }
}

pub fn forecast(a: ForecastArgs) -> Result<()> {
    let start = Instant::now();
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let saved = persist::load(&a.model)?;
    let (model, norm) = (saved.model, saved.normalizer);
    let cfg = model.cfg.clone();
    let init = read(&a.init)?;
    check_fits(&init, &cfg, &a.init)?;
    let mut sources = Vec::new();
    for n in &a.sources {
        let p = source_path(&a.init, n);
        let ds = read(&p)?;
        check_fits(&ds, &cfg, &p)?;
        sources.push((n.clone(), ds));
    }
    let cells = cfg.grid.cells();
    let first = a.start.unwrap_or(init.states[0].time);
    let engine = if a.offload {
        Some(OffloadEngine::new(OffloadConfig::new(a.budget.unwrap_or(UNLIMITED))).map_err(CoreError::from)?)
    } else {
        None
    };
    let mut states = Vec::with_capacity(a.count);
    for t in first..first + a.count as i64 {
        let rec = match &engine {
            Some(e) => Recording::Offload(e),
            None => Recording::Plain,
        };
        let input = |ds: &Dataset| -> Result<ModelInput> { Ok(norm.normalize(ds.at(t)?, cells).to_input(&cfg)?) };
        let pred = if sources.is_empty() {
            let x = input(&init)?;
            no_grad(|| run_forecast(&model, Initial::Single(&x), a.dt, rec))?
        } else {
            let xs: Vec<(&str, ModelInput)> =
                sources.iter().map(|(n, ds)| Ok((n.as_str(), input(ds)?))).collect::<Result<_>>()?;
            let refs: Vec<(&str, &ModelInput)> = xs.iter().map(|(n, x)| (*n, x)).collect();
            no_grad(|| run_forecast(&model, Initial::Sources(&refs), a.dt, rec))?
        };
        let state = norm.denormalize(&state_of(&pred), cells);
        if !state.all_finite() {
            return Err(CoreError::NonFinite(format!("forecast from hour {t}")).into());
        }
        states.push(state);
    }
    let out = output_path(&a.out);
    create_parent(&out)?;
    Dataset { grid: init.grid, channels: init.channels, states }.write(&out)?;
    let mut m = RunManifest::new(
        "forecast",
        json!({ "model": a.model, "model_config": cfg, "init": a.init, "dt": a.dt, "sources": a.sources,
                "offload": a.offload, "budget": a.budget, "start": first, "count": a.count }),
        0,
    );
    m.output(&out);
    finish(m, &out, start)
}

/// Field indices for `--vars`, all fields when empty.
fn select_vars(channels: &Channels, vars: &[String]) -> Result<Vec<(String, usize)>> {
    let names = channels.field_names();
    if vars.is_empty() {
        return Ok(names.into_iter().enumerate().map(|(i, n)| (n, i)).collect());
    }
    vars.iter()
        .map(|v| match names.iter().position(|n| n == v) {
            Some(i) => Ok((v.clone(), i)),
            None => Err(usage(format!("unknown variable {v:?}; fields are {}", names.join(",")))),
        })
        .collect()
}

fn aligned(ds: &Dataset, truth: &Dataset, what: &Path) -> Result<()> {
    if ds.grid != truth.grid || ds.channels != truth.channels {
        return Err(CoreError::Data(format!("{} is not on the truth's grid and channels", what.display())).into());
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    if a.pred.len() != a.lead_times.len() {
        return Err(usage(format!("{} forecast files but {} lead times", a.pred.len(), a.lead_times.len())));
    }
    let truth = read(&a.truth)?;
    let vars = select_vars(&truth.channels, &a.vars)?;
    let spec = truth.grid;
    let cells = spec.cells();
    let weights = latitude_weights(&spec);
    let wavelength = equivalent_wavelength_km(&spec);
    let mut csv = vec!["variable,lead_hours,samples,rmse,blur_score".to_string()];
    for (path, lead) in a.pred.iter().zip(&a.lead_times) {
        let pred = read(path)?;
        aligned(&pred, &truth, path)?;
        let pairs: Vec<(&WeatherState, &WeatherState)> =
            pred.states.iter().filter_map(|p| truth.at(p.time).ok().map(|t| (p, t))).collect();
        if pairs.is_empty() {
            return Err(CoreError::Data(format!("{} has no valid times inside the truth", path.display())).into());
        }
        for (name, f) in &vars {
            let p: Vec<&[f64]> = pairs.iter().map(|(p, _)| p.field(*f, cells)).collect();
            let t: Vec<&[f64]> = pairs.iter().map(|(_, t)| t.field(*f, cells)).collect();
            let rmse = latitude_rmse(&p, &t, &weights, spec.cols)?;
            // Grids too coarse to resolve the wavelength get an empty blur column.
            let blur = match mean_blur(&p, &spec, wavelength) {
                Ok(b) => b.map(|b| format!("{b:e}")).unwrap_or_default(),
                Err(CoreError::Data(_)) => String::new(),
                Err(e) => return Err(e.into()),
            };
            csv.push(format!("{name},{lead},{},{rmse:e},{blur}", pairs.len()));
        }
    }
    let out = output_path(&a.out);
    create_parent(&out)?;
    std::fs::write(&out, csv.join("\n") + "\n").map_err(CoreError::from)?;
    let mut m = RunManifest::new(
        "evaluate",
        json!({ "pred": a.pred, "truth": a.truth, "vars": vars.iter().map(|v| &v.0).collect::<Vec<_>>(),
                "lead_times": a.lead_times, "wavelength_km": wavelength }),
        0,
    );
    m.output(&out);
    finish(m, &out, start)
}

fn pick<'d>(ds: &'d Dataset, times: &[i64], f: usize, cells: usize) -> Vec<&'d [f64]> {
    times.iter().map(|t| ds.at(*t).expect("time checked").field(f, cells)).collect()
}

pub fn scorecard(a: ScorecardArgs) -> Result<()> {
    let start = Instant::now();
    let n = a.lead_times.len();
    if a.a.len() != n || a.b.len() != n {
        return Err(usage(format!("{} A files, {} B files and {n} lead times", a.a.len(), a.b.len())));
    }
    let truth = read(&a.truth)?;
    let vars = select_vars(&truth.channels, &a.vars)?;
    let cells = truth.grid.cells();
    let mut loaded = Vec::new();
    for (pa, pb) in a.a.iter().zip(&a.b) {
        let (da, db) = (read(pa)?, read(pb)?);
        aligned(&da, &truth, pa)?;
        aligned(&db, &truth, pb)?;
        loaded.push((da, db));
    }
    let (mut sa, mut sb, mut st) = (Vec::new(), Vec::new(), Vec::new());
    for ((da, db), lead) in loaded.iter().zip(&a.lead_times) {
        // Score both sets on the valid times they share with the truth.
        let times: Vec<i64> = da
            .times()
            .into_iter()
            .filter(|t| db.at(*t).is_ok() && truth.at(*t).is_ok())
            .collect();
        if times.is_empty() {
            return Err(CoreError::Data(format!("no common valid times at lead {lead}")).into());
        }
        for (name, f) in &vars {
            sa.push(ForecastSet { variable: name, lead: *lead, fields: pick(da, &times, *f, cells) });
            sb.push(ForecastSet { variable: name, lead: *lead, fields: pick(db, &times, *f, cells) });
            st.push(ForecastSet { variable: name, lead: *lead, fields: pick(&truth, &times, *f, cells) });
        }
    }
    let card = score(&sa, &sb, &st, &truth.grid)?;
    let out = output_path(&a.out);
    create_parent(&out)?;
    std::fs::write(&out, card.to_csv()).map_err(CoreError::from)?;
    let mut m = RunManifest::new(
        "scorecard",
        json!({ "a": a.a, "b": a.b, "truth": a.truth, "lead_times": a.lead_times,
                "vars": vars.iter().map(|v| &v.0).collect::<Vec<_>>() }),
        0,
    );
    m.output(&out);
    finish(m, &out, start)
}

pub fn bench_offload(a: BenchArgs) -> Result<()> {
    let start = Instant::now();
    let store = match a.store.as_str() {
        "memory" => StoreKind::Memory,
        "file" => StoreKind::File,
        other => return Err(usage(format!("unknown store {other:?} (memory, file)"))),
    };
    let cfg = resolve_config(&a.config)?;
    let model = WeatherMesh::new(cfg.clone(), a.seed)?;
    let mut csv = vec![BenchRow::CSV_HEADER.to_string()];
    println!("{}", BenchRow::CSV_HEADER);
    for &segments in &a.segments {
        let row = run_bench(
            &model,
            &BenchOptions {
                segments,
                budget_bytes: a.budget.unwrap_or(UNLIMITED),
                lookahead: a.lookahead,
                latency: Duration::from_micros(a.latency_us),
                store,
                seed: a.seed,
            },
        )?;
        println!("{}", row.csv_row());
        csv.push(row.csv_row());
    }
    let Some(out) = a.out.as_deref().map(output_path) else {
        return Ok(());
    };
    create_parent(&out)?;
    std::fs::write(&out, csv.join("\n") + "\n").map_err(CoreError::from)?;
    let mut m = RunManifest::new(
        "bench-offload",
        json!({ "model": cfg, "segments": a.segments, "budget": a.budget, "lookahead": a.lookahead,
                "latency_us": a.latency_us, "store": a.store }),
        a.seed,
    );
    m.output(&out);
    finish(m, &out, start)
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let names = check_names();
    if a.list {
        names.iter().for_each(|n| println!("{n}"));
        return Ok(());
    }
    if let Some(bad) = a.only.iter().find(|o| !names.contains(&o.as_str())) {
        return Err(usage(format!("unknown check {bad:?}; see --list")));
    }
    let outcomes = run_suite(|n| a.only.is_empty() || a.only.iter().any(|o| o == n));
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        println!("{tag} {}: {} [{:.2} s]", o.name, o.detail, o.seconds);
    }
    if failed > 0 {
        return Err(Failure::Verify(format!("{failed} of {} checks failed", outcomes.len())));
    }
    Ok(())
}
