mod common;

use common::{bits, fd_directions, probe, random_input, rel_err};
use wm_core::grid::{roll_columns, static_fields, STATIC_CHANNELS};
use wm_core::model::{project_simplex, Encoder, DEFAULT_SOURCE};
use wm_core::module::Init;
use wm_core::persist;
use wm_core::rollout::{forecast, Initial, Recording};
use wm_core::data::Normalizer;
use wm_core::{CoreError, Module, ModelConfig, ModelInput, WeatherMesh};
use wm_tensor::Tensor;

fn roll_input(x: &ModelInput, cols: usize, shift: isize) -> ModelInput {
    let r = |t: &Tensor| Tensor::new(roll_columns(t.values(), cols, shift), t.shape()).unwrap();
    ModelInput {
        time: x.time,
        surface: r(&x.surface),
        atmos: r(&x.atmos),
    }
}

#[test]
fn forward_shapes_match_the_dry_run() {
    let cfg = ModelConfig::desk();
    let dry = cfg.dry_run().unwrap();
    let m = WeatherMesh::new(cfg.clone(), 1).unwrap();
    let z = m.encode(&random_input(&cfg, 2)).unwrap();
    assert_eq!(dry.latent, [3, 5, 10]);
    assert_eq!(z.tokens.shape(), [dry.tokens, cfg.hidden]);
    let p = m.decode(&m.process(&z, 6).unwrap()).unwrap();
    let shape = |name: &str| dry.shapes.iter().find(|(n, _)| n == name).unwrap().1.clone();
    assert_eq!(p.surface.shape(), shape("decoder output surface"));
    assert_eq!(p.atmos.shape(), shape("decoder output atmosphere"));
    assert_eq!(p.time, 6);

    let count = |prefix: &str| {
        let mut n = 0;
        m.visit("", &mut |name, t| {
            if name.starts_with(prefix) {
                n += t.numel();
            }
        });
        n
    };
    assert_eq!(count("enc."), dry.encoder_params);
    assert_eq!(count("dec."), dry.decoder_params);
    assert_eq!(count("p6."), dry.processor_params);
    assert_eq!(count("p1."), dry.processor_params);
}

#[test]
fn full_config_dry_run_has_a_90_by_180_latent() {
    let dry = ModelConfig::full().dry_run().unwrap();
    assert_eq!(dry.latent, [5, 90, 180]);
    assert_eq!(dry.tokens, 5 * 90 * 180);
}

#[test]
fn construction_and_forward_are_deterministic() {
    let cfg = ModelConfig::tiny();
    let a = WeatherMesh::new(cfg.clone(), 9).unwrap();
    let b = WeatherMesh::new(cfg.clone(), 9).unwrap();
    let c = WeatherMesh::new(cfg.clone(), 10).unwrap();
    let flat = |m: &WeatherMesh| m.named_params("").into_iter().flat_map(|(_, t)| bits(t.values())).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    let x = random_input(&cfg, 3);
    let pa = a.decode(&a.encode(&x).unwrap()).unwrap();
    let pb = b.decode(&b.encode(&x).unwrap()).unwrap();
    assert_eq!(bits(pa.atmos.values()), bits(pb.atmos.values()));
}

#[test]
fn parameter_names_are_unique_and_prefixed() {
    let m = WeatherMesh::new(ModelConfig::tiny(), 0).unwrap();
    let names: Vec<String> = m.named_params("").into_iter().map(|(n, _)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    for n in &names {
        assert!(["enc.", "blend.", "dec.", "p6.", "p1."].iter().any(|p| n.starts_with(p)), "{n}");
    }
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 0).unwrap();
    let mut x = random_input(&cfg, 1);
    x.surface = Tensor::zeros(&[cfg.surface_in + 1, cfg.grid.rows, cfg.grid.cols]);
    assert!(matches!(m.encode(&x), Err(CoreError::Shape(_))));
    let bad = wm_core::LatentState {
        time: 0,
        tokens: Tensor::zeros(&[3, cfg.hidden]),
    };
    assert!(matches!(m.decode(&bad), Err(CoreError::Shape(_))));
}

#[test]
fn single_source_blend_is_the_plain_encoding() {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 4).unwrap();
    let x = random_input(&cfg, 5);
    let a = m.encode(&x).unwrap();
    let b = m.blend_encode(&[(DEFAULT_SOURCE, &x)]).unwrap();
    assert_eq!(bits(a.tokens.values()), bits(b.tokens.values()));
}

#[test]
fn blend_is_the_weighted_mean_of_source_latents() {
    let cfg = ModelConfig::tiny();
    let mut m = WeatherMesh::new(cfg.clone(), 4).unwrap();
    let mut init = Init::new(77);
    m.encoders.insert("gfs", Encoder::new(&cfg, &mut init));
    m.encoders.set_weights(&[0.25, 0.75]).unwrap();
    let (x, y) = (random_input(&cfg, 5), random_input(&cfg, 6));
    let za = m.encode_source(DEFAULT_SOURCE, &x, None).unwrap().tokens.to_vec();
    let zb = m.encode_source("gfs", &y, None).unwrap().tokens.to_vec();
    let blend = m.blend_encode(&[(DEFAULT_SOURCE, &x), ("gfs", &y)]).unwrap().tokens.to_vec();
    for ((a, b), z) in za.iter().zip(&zb).zip(&blend) {
        assert!((0.25 * a + 0.75 * b - z).abs() < 1e-12);
    }
    // Identical encoders on identical inputs blend to the same latent.
    let mut twin = WeatherMesh::new(cfg.clone(), 4).unwrap();
    let e = twin.encoders.get(DEFAULT_SOURCE).unwrap().clone();
    twin.encoders.insert("copy", e);
    let one = twin.encode(&x).unwrap().tokens.to_vec();
    let both = twin.blend_encode(&[(DEFAULT_SOURCE, &x), ("copy", &x)]).unwrap().tokens.to_vec();
    for (a, b) in one.iter().zip(&both) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn blend_rejects_unknown_duplicate_and_misaligned_sources() {
    let cfg = ModelConfig::tiny();
    let mut m = WeatherMesh::new(cfg.clone(), 4).unwrap();
    m.encoders.insert("gfs", Encoder::new(&cfg, &mut Init::new(1)));
    let x = random_input(&cfg, 5);
    let mut late = x.clone();
    late.time = 6;
    assert!(m.blend_encode(&[("ifs", &x)]).is_err());
    assert!(m.blend_encode(&[("gfs", &x), ("gfs", &x)]).is_err());
    assert!(matches!(m.blend_encode(&[(DEFAULT_SOURCE, &x), ("gfs", &late)]), Err(CoreError::Data(_))));
    assert!(m.blend_encode(&[]).is_err());
}

#[test]
fn blend_weights_are_projected_onto_the_simplex() {
    assert_eq!(project_simplex(&[-1.0, 1.0, 3.0]), vec![0.0, 0.25, 0.75]);
    assert_eq!(project_simplex(&[-1.0, -2.0]), vec![0.5, 0.5]);
    let cfg = ModelConfig::tiny();
    let mut m = WeatherMesh::new(cfg.clone(), 4).unwrap();
    m.encoders.insert("gfs", Encoder::new(&cfg, &mut Init::new(1)));
    m.encoders.set_weights(&[2.0, 6.0]).unwrap();
    assert_eq!(m.encoders.weights(), vec![0.25, 0.75]);
    assert!(m.encoders.set_weights(&[1.0]).is_err());
    assert!(m.encoders.set_weights(&[f64::NAN, 1.0]).is_err());
}

#[test]
fn model_commutes_with_rolls_by_whole_latent_columns() {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 12).unwrap();
    let cols = cfg.grid.cols;
    let x = random_input(&cfg, 13);
    let shift = cfg.downsample as isize;
    let statics = Tensor::new(
        roll_columns(&static_fields(&cfg.grid), cols, shift),
        &[STATIC_CHANNELS, cfg.grid.rows, cfg.grid.cols],
    )
    .unwrap();
    let base = m.decode(&m.process(&m.encode(&x).unwrap(), 6).unwrap()).unwrap();
    let z = m.encode_source(DEFAULT_SOURCE, &roll_input(&x, cols, shift), Some(&statics)).unwrap();
    let rolled = m.decode(&m.process(&z, 6).unwrap()).unwrap();
    for (a, b) in [(&base.surface, &rolled.surface), (&base.atmos, &rolled.atmos)] {
        let expect = roll_columns(a.values(), cols, shift);
        for (e, v) in expect.iter().zip(b.values()) {
            assert!((e - v).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_and_decoder_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let m = WeatherMesh::new(cfg.clone(), 21).unwrap();
    let x = random_input(&cfg, 22);
    let enc = m.encoders.get(DEFAULT_SOURCE).unwrap().clone();
    let ctx = m.context().clone();
    let statics = m.statics().clone();
    for (a, n) in fd_directions(&enc, |e| probe(&e.forward(&cfg, &x, &statics, &ctx).unwrap(), 1), 6, 3, 1e-5) {
        assert!(rel_err(a, n) < 1e-4, "encoder {a} vs {n}");
    }
    let z = m.encode(&x).unwrap().tokens.detach();
    let dec = m.decoder.clone();
    let loss = |d: &wm_core::model::Decoder| {
        let (s, a) = d.forward(&cfg, &z, &ctx).unwrap();
        probe(&s, 2).add(&probe(&a, 3)).unwrap()
    };
    for (a, n) in fd_directions(&dec, loss, 6, 4, 1e-5) {
        assert!(rel_err(a, n) < 1e-4, "decoder {a} vs {n}");
    }
}

#[test]
fn saved_model_round_trips() {
    let cfg = ModelConfig::tiny();
    let mut m = WeatherMesh::new(cfg.clone(), 31).unwrap();
    m.encoders.insert("src-b", Encoder::new(&cfg, &mut Init::new(2)));
    m.encoders.set_weights(&[0.3, 0.7]).unwrap();
    m.trained_stages = vec!["pretrain".into(), "operational".into()];
    let norm = Normalizer {
        mean: (0..4).map(|i| i as f64).collect(),
        std: vec![2.0; 4],
    };
    let dir = tempfile::tempdir().unwrap();
    persist::save(dir.path(), &m, &norm).unwrap();
    let back = persist::load(dir.path()).unwrap();
    assert_eq!(back.normalizer, norm);
    assert_eq!(back.model.cfg, cfg);
    assert_eq!(back.model.trained_stages, m.trained_stages);
    assert_eq!(back.model.encoders.names(), m.encoders.names());
    let pa = m.named_params("");
    let pb = back.model.named_params("");
    assert_eq!(pa.len(), pb.len());
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        assert_eq!(na, nb);
        assert_eq!(bits(ta.values()), bits(tb.values()));
    }
    let x = random_input(&cfg, 3);
    let fa = forecast(&m, Initial::Single(&x), 7, Recording::Plain).unwrap();
    let fb = forecast(&back.model, Initial::Single(&x), 7, Recording::Plain).unwrap();
    assert_eq!(bits(fa.atmos.values()), bits(fb.atmos.values()));
}

#[test]
fn loading_rejects_mismatched_parameters() {
    let cfg = ModelConfig::tiny();
    let mut m = WeatherMesh::new(cfg.clone(), 31).unwrap();
    let mut params = m.named_params("");
    params.pop();
    assert!(matches!(persist::assign(&mut m, params), Err(CoreError::Format(_))));
    let mut params = m.named_params("");
    params[0].1 = Tensor::zeros(&[1]);
    assert!(matches!(persist::assign(&mut m, params), Err(CoreError::Format(_))));
    let mut params = m.named_params("");
    params.push(("extra".into(), Tensor::zeros(&[1])));
    assert!(matches!(persist::assign(&mut m, params), Err(CoreError::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let norm = Normalizer { mean: vec![0.0; 4], std: vec![1.0; 4] };
    persist::save(dir.path(), &m, &norm).unwrap();
    let mut other = cfg.clone();
    other.hidden = 12;
    other.heads = 2;
    std::fs::write(dir.path().join(persist::CONFIG_FILE), other.to_toml()).unwrap();
    assert!(matches!(persist::load(dir.path()), Err(CoreError::Format(_))));
    let missing = tempfile::tempdir().unwrap();
    let err = persist::load(missing.path()).err().unwrap();
    assert_eq!(err.category(), "io");
}
