mod common;

use std::collections::BTreeMap;

use common::{bits, dataset_for, fd_directions, random_state, rel_err, rng};
use proptest::prelude::*;
use wm_core::data::{perturbed_source, source_name, Normalizer, WeatherState};
use wm_core::model::DEFAULT_SOURCE;
use wm_core::rollout::Recording;
use wm_core::train::{
    cosine_lr, sample_dts, sample_dts_uniform, sample_loss, Adam, DtSchedule, Stage, TrainConfig, TrainSample,
    Trainer, PRETRAIN_TAG,
};
use wm_core::{CoreError, Module, ModelConfig, WeatherMesh};
use wm_tensor::Tensor;

fn snapshot(m: &WeatherMesh, prefix: &str) -> Vec<(String, Vec<u64>)> {
    m.named_params("")
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n, bits(t.values())))
        .collect()
}

fn tiny_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        max_lr: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_schedule_rows() {
    let s = DtSchedule::pretrain();
    let mult = |max: u32| (0..=max).step_by(6).collect::<Vec<u32>>();
    let rows = [
        (0, mult(12)),
        (999, mult(12)),
        (1_000, mult(24)),
        (15_000, mult(30)),
        (21_000, mult(36)),
        (26_000, mult(42)),
        (30_000, mult(48)),
        (41_999, mult(48)),
    ];
    for (step, want) in rows {
        assert_eq!(s.admissible(step), &want[..], "step {step}");
    }
    s.validate(6).unwrap();
    assert_eq!(DtSchedule::anneal().admissible(0), &mult(120)[..]);
    assert_eq!(DtSchedule::operational().admissible(5), &[0, 6, 12]);
    assert_eq!(DtSchedule::one_hour().admissible(0), &(0..=24).collect::<Vec<u32>>()[..]);
}

#[test]
fn scaled_schedule_keeps_rows_in_order() {
    let s = DtSchedule::pretrain().scaled(200.0 / 42_000.0);
    s.validate(6).unwrap();
    assert_eq!(s.admissible(0), &[0, 6, 12]);
    assert_eq!(s.admissible(199).last(), Some(&48));
    let collapsed = DtSchedule::pretrain().scaled(1e-6);
    assert_eq!(collapsed.thresholds.len(), 1);
    assert_eq!(collapsed.admissible(0).last(), Some(&48));
}

#[test]
fn invalid_schedules_are_rejected() {
    let bad = |t: Vec<(usize, Vec<u32>)>| DtSchedule { thresholds: t }.validate(6).is_err();
    assert!(bad(vec![]));
    assert!(bad(vec![(5, vec![0, 6])]));
    assert!(bad(vec![(0, vec![0, 7])]));
    assert!(bad(vec![(0, vec![0, 6]), (0, vec![0, 6, 12])]));
    assert!(bad(vec![(0, vec![0, 6]), (10, vec![12])]));
    assert!(DtSchedule::one_hour().validate(1).is_ok());
}

#[test]
fn every_draw_contains_the_largest_admissible_dt() {
    let s = DtSchedule::pretrain();
    let mut r = rng(42);
    for i in 0..10_000 {
        let step = (i * 7) % 42_000;
        let adm = s.admissible(step);
        let d = sample_dts(adm, 5, &mut r).unwrap();
        assert_eq!(d.last(), adm.iter().max());
        assert_eq!(d.len(), adm.len().min(5));
        assert!(d.windows(2).all(|w| w[0] < w[1]));
        assert!(d.iter().all(|x| adm.contains(x)));
    }
    assert!(sample_dts(&[], 5, &mut r).is_err());
    assert!(sample_dts(&[6], 0, &mut r).is_err());
}

#[test]
fn one_hour_draws_are_uniform_without_a_forced_maximum() {
    let adm: Vec<u32> = (0..=24).collect();
    let mut r = rng(1);
    let mut counts = [0usize; 25];
    let draws = 4_000;
    for _ in 0..draws {
        for d in sample_dts_uniform(&adm, 5, &mut r).unwrap() {
            counts[d as usize] += 1;
        }
    }
    // Each dt appears with probability 5/25.
    let expect = draws as f64 * 5.0 / 25.0;
    for c in counts {
        assert!((c as f64 - expect).abs() < 0.15 * expect, "{counts:?}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(3e-4, 0, 200) - 3e-4).abs() < 1e-12);
    assert!(cosine_lr(3e-4, 200, 200).abs() < 1e-12);
    assert!((cosine_lr(3e-4, 100, 200) - 1.5e-4).abs() < 1e-12);
    let lrs: Vec<f64> = (0..=200).map(|s| cosine_lr(1.0, s, 200)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn stage_parameter_ownership() {
    assert!(Stage::Pretrain.trains("enc.era5.proj_w", false));
    assert!(Stage::Pretrain.trains("p6.blocks.blocks.0.w_qkv", false));
    assert!(!Stage::Pretrain.trains("p1.blocks.blocks.0.w_qkv", false));
    assert!(!Stage::Pretrain.trains("blend.era5", true));
    assert!(Stage::OneHour.trains("p1.x", false));
    assert!(!Stage::OneHour.trains("dec.x", false));
    assert!(Stage::Operational.trains("enc.src-a.x", false));
    assert!(!Stage::Operational.trains("blend.src-a", false));
    assert!(Stage::Operational.trains("blend.src-a", true));
    assert!(!Stage::Operational.trains("p6.x", true));
    assert_eq!(Stage::parse("1h").unwrap(), Stage::OneHour);
    assert!(Stage::parse("finetune").is_err());
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut m = WeatherMesh::new(ModelConfig::tiny(), 0).unwrap();
    let (name, t) = m.named_params("").into_iter().find(|(n, _)| n.starts_with("dec.")).unwrap();
    let g: Vec<f64> = (0..t.numel()).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
    let mut grads = BTreeMap::new();
    grads.insert(name.clone(), g.clone());
    let before = t.to_vec();
    let mut adam = Adam::default();
    adam.step(&mut m, &grads, 0.01, &TrainConfig::default()).unwrap();
    let after = m.named_params("").into_iter().find(|(n, _)| *n == name).unwrap().1.to_vec();
    for ((b, a), gi) in before.iter().zip(&after).zip(&g) {
        assert!((b - a - 0.01 * gi.signum()).abs() < 1e-9);
    }
}

fn sample_for(m: &WeatherMesh, dts: &[u32], seed: u64) -> TrainSample {
    TrainSample {
        sources: vec![(DEFAULT_SOURCE.to_string(), random_state(&m.cfg, 0, seed))],
        targets: dts.iter().map(|&d| (d, random_state(&m.cfg, d as i64, seed + 1 + d as u64))).collect(),
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let m = WeatherMesh::new(ModelConfig::tiny(), 3).unwrap();
    let mut s = sample_for(&m, &[0, 6, 7], 1);
    let x = s.sources[0].1.to_input(&m.cfg).unwrap();
    for (dt, target) in &mut s.targets {
        let p = wm_core::rollout::forecast(&m, wm_core::rollout::Initial::Single(&x), *dt as i64, Recording::Plain)
            .unwrap();
        *target = WeatherState {
            time: p.time,
            surface: p.surface.to_vec(),
            atmos: p.atmos.to_vec(),
        };
    }
    assert_eq!(sample_loss(&m, &s, Recording::Plain).unwrap().item(), 0.0);
}

#[test]
fn loss_gradient_is_the_mean_of_per_dt_gradients() {
    let m = WeatherMesh::new(ModelConfig::tiny(), 3).unwrap();
    let both = sample_for(&m, &[6, 12], 2);
    let single = |k: usize| TrainSample {
        sources: both.sources.clone(),
        targets: vec![both.targets[k].clone()],
    };
    let grads = |s: &TrainSample| {
        let g = sample_loss(&m, s, Recording::Plain).unwrap().backward().unwrap();
        let mut v = Vec::new();
        m.visit("", &mut |_, t| v.extend(g.get_or_zeros(t)));
        v
    };
    let (g, a, b) = (grads(&both), grads(&single(0)), grads(&single(1)));
    for ((gi, ai), bi) in g.iter().zip(&a).zip(&b) {
        assert!((gi - 0.5 * (ai + bi)).abs() < 1e-12 * gi.abs().max(1.0));
    }
}

#[test]
fn two_step_rollout_loss_gradient_matches_finite_differences() {
    let m = WeatherMesh::new(ModelConfig::tiny(), 5).unwrap();
    let s = sample_for(&m, &[12], 3);
    let pairs = fd_directions(&m, |mm| sample_loss(mm, &s, Recording::Checkpoint).unwrap(), 4, 9, 1e-5);
    for (a, n) in pairs {
        assert!(rel_err(a, n) < 1e-4, "{a} vs {n}");
    }
}

#[test]
fn one_hour_stage_only_moves_the_one_hour_processor() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 60, 1);
    let norm = Normalizer::fit(&ds).unwrap();
    let nds = norm.normalize_dataset(&ds);
    let mut m = WeatherMesh::new(cfg, 2).unwrap();
    assert!(Trainer::new(&mut m, Stage::OneHour, tiny_cfg(2, 1), &nds, vec![]).is_err());
    m.trained_stages.push(PRETRAIN_TAG.into());
    let frozen = [snapshot(&m, "enc."), snapshot(&m, "dec."), snapshot(&m, "p6."), snapshot(&m, "blend.")];
    let p1 = snapshot(&m, "p1.");
    let mut t = Trainer::new(&mut m, Stage::OneHour, tiny_cfg(3, 1), &nds, vec![]).unwrap();
    t.run(|_| {}).unwrap();
    assert_eq!(frozen, [snapshot(&m, "enc."), snapshot(&m, "dec."), snapshot(&m, "p6."), snapshot(&m, "blend.")]);
    assert_ne!(p1, snapshot(&m, "p1."));
    assert_eq!(m.trained_stages, ["pretrain", "1h"]);
}

#[test]
fn operational_stage_only_moves_encoders_and_blend() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 60, 1);
    let norm = Normalizer::fit(&ds).unwrap();
    let truth = norm.normalize_dataset(&ds);
    let a = norm.normalize_dataset(&perturbed_source(&ds, 7, 0, 0.05));
    let b = norm.normalize_dataset(&perturbed_source(&ds, 7, 1, 0.05));
    let mut m = WeatherMesh::new(cfg, 2).unwrap();
    m.trained_stages.push(PRETRAIN_TAG.into());
    let one = vec![(source_name(0), &a)];
    assert!(matches!(
        Trainer::new(&mut m, Stage::Operational, tiny_cfg(2, 1), &truth, one).map(|_| ()),
        Err(CoreError::Config(_))
    ));
    let frozen = [snapshot(&m, "dec."), snapshot(&m, "p6."), snapshot(&m, "p1.")];
    let cfg = TrainConfig {
        learnable_blend: true,
        max_lr: 0.05,
        ..tiny_cfg(4, 2)
    };
    let sources = vec![(source_name(0), &a), (source_name(1), &b)];
    let mut t = Trainer::new(&mut m, Stage::Operational, cfg, &truth, sources).unwrap();
    let enc0 = snapshot(t.model, "enc.");
    let blend0 = t.model.encoders.weights();
    t.run(|_| {}).unwrap();
    assert_eq!(frozen, [snapshot(&m, "dec."), snapshot(&m, "p6."), snapshot(&m, "p1.")]);
    assert_ne!(enc0, snapshot(&m, "enc."));
    let w = m.encoders.weights();
    assert_ne!(w, blend0);
    assert!(w.iter().all(|x| *x >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(m.encoders.names(), ["src-a", "src-b"]);
}

#[test]
fn pretraining_leaves_the_one_hour_processor_alone_and_is_reproducible() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 80, 1);
    let nds = Normalizer::fit(&ds).unwrap().normalize_dataset(&ds);
    let run = || {
        let mut m = WeatherMesh::new(cfg.clone(), 2).unwrap();
        let p1 = snapshot(&m, "p1.");
        let mut t = Trainer::new(&mut m, Stage::Pretrain, tiny_cfg(4, 3), &nds, vec![]).unwrap();
        let losses: Vec<u64> = t.run(|_| {}).unwrap().iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(p1, snapshot(&m, "p1."));
        (losses, snapshot(&m, ""))
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_is_a_training_error() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 40, 1);
    let nds = Normalizer::fit(&ds).unwrap().normalize_dataset(&ds);
    let mut m = WeatherMesh::new(cfg, 2).unwrap();
    m.visit_mut("", &mut |name, t| {
        if name == "dec.head_sfc_b" {
            *t = Tensor::param(vec![f64::NAN; t.numel()], t.shape()).unwrap();
        }
    });
    let mut t = Trainer::new(&mut m, Stage::Pretrain, tiny_cfg(2, 3), &nds, vec![]).unwrap();
    let err = t.step(0).unwrap_err();
    assert!(matches!(err, CoreError::Training { step: 0, .. }));
    assert_eq!(err.category(), "training");
}

#[test]
fn short_dataset_is_reported() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 10, 1);
    let mut m = WeatherMesh::new(cfg, 2).unwrap();
    let mut t = Trainer::new(&mut m, Stage::Pretrain, tiny_cfg(2, 3), &ds, vec![]).unwrap();
    assert!(matches!(t.step(0), Err(CoreError::Data(_))));
}

#[test]
fn tiny_model_learns() {
    let cfg = ModelConfig::tiny();
    let ds = dataset_for(&cfg, 120, 4);
    let nds = Normalizer::fit(&ds).unwrap().normalize_dataset(&ds);
    let mut m = WeatherMesh::new(cfg, 2).unwrap();
    let tc = TrainConfig {
        schedule: Some(DtSchedule::operational()),
        ..tiny_cfg(60, 5)
    };
    let mut t = Trainer::new(&mut m, Stage::Pretrain, tc, &nds, vec![]).unwrap();
    let r = t.run(|_| {}).unwrap();
    let head: f64 = r[..5].iter().map(|x| x.loss).sum::<f64>() / 5.0;
    let tail: f64 = r[r.len() - 5..].iter().map(|x| x.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(r[0].csv_row().starts_with("0,1e-2,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_sets_are_distinct_subsets(len in 1usize..30, k in 1usize..8, seed in 0u64..1000) {
        let adm: Vec<u32> = (0..len as u32).map(|i| 6 * i).collect();
        let mut r = rng(seed);
        let d = sample_dts(&adm, k, &mut r).unwrap();
        prop_assert_eq!(d.len(), k.min(len));
        prop_assert_eq!(*d.last().unwrap(), 6 * (len as u32 - 1));
        prop_assert!(d.windows(2).all(|w| w[0] < w[1]));
        let u = sample_dts_uniform(&adm, k, &mut r).unwrap();
        prop_assert_eq!(u.len(), k.min(len));
        prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cosine_lr_stays_in_range(step in 0usize..500, total in 1usize..500) {
        let lr = cosine_lr(2.0, step, total);
        prop_assert!((0.0..=2.0).contains(&lr));
    }
}
