//! Model directories: `config.toml`, `params.lmtw`, `normalizer.lmtw` and
//! `meta.toml` with the encoder sources and completed stages.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wm_tensor::serialize::{read_params, write_params};
use wm_tensor::Tensor;

use crate::config::ModelConfig;
use crate::data::Normalizer;
use crate::error::{CoreError, Result};
use crate::model::WeatherMesh;
use crate::module::{Init, Module};

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.lmtw";
pub const NORMALIZER_FILE: &str = "normalizer.lmtw";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    sources: Vec<String>,
    trained_stages: Vec<String>,
    one_hour_processor: bool,
    learnable_blend: bool,
}

/// A model together with the normalization it was trained under.
pub struct SavedModel {
    pub model: WeatherMesh,
    pub normalizer: Normalizer,
}

pub fn save(dir: &Path, model: &WeatherMesh, normalizer: &Normalizer) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), model.cfg.to_toml())?;
    let meta = Meta {
        sources: model.encoders.names().to_vec(),
        trained_stages: model.trained_stages.clone(),
        one_hour_processor: model.p1.is_some(),
        learnable_blend: model.encoders.learnable_blend,
    };
    std::fs::write(dir.join(META_FILE), toml::to_string_pretty(&meta).expect("meta serializes"))?;
    write_params(BufWriter::new(File::create(dir.join(PARAMS_FILE))?), &model.named_params(""))?;
    write_params(BufWriter::new(File::create(dir.join(NORMALIZER_FILE))?), &normalizer.to_params()?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SavedModel> {
    let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?;
    let meta_path = dir.join(META_FILE);
    let meta: Meta = toml::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| CoreError::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.sources.is_empty() {
        return Err(CoreError::Format("model lists no encoder sources".into()));
    }
    let mut model = WeatherMesh::new(cfg.clone(), 0)?;
    let names: Vec<&str> = meta.sources.iter().map(String::as_str).collect();
    model.encoders.replace(&names, &cfg, &mut Init::new(0));
    model.encoders.learnable_blend = meta.learnable_blend;
    if !meta.one_hour_processor {
        model.p1 = None;
    }
    model.trained_stages = meta.trained_stages;

    let stored = read_params(BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
    assign(&mut model, stored)?;
    let normalizer = Normalizer::from_params(&read_params(BufReader::new(File::open(dir.join(NORMALIZER_FILE))?))?)?;
    let fields = cfg.surface_out + cfg.atmos * cfg.levels;
    if normalizer.mean.len() != fields {
        return Err(CoreError::Format(format!(
            "normalizer covers {} fields, model has {fields}",
            normalizer.mean.len()
        )));
    }
    Ok(SavedModel { model, normalizer })
}

/// Overwrites every parameter by name. Missing, surplus or misshapen
/// entries are errors.
pub fn assign(model: &mut WeatherMesh, params: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (n, t) in params {
        if by_name.insert(n.clone(), t).is_some() {
            return Err(CoreError::Format(format!("parameter {n} stored twice")));
        }
    }
    let mut err = None;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => err = Some(CoreError::Format(format!("parameter {name} missing"))),
            Some(v) if v.shape() != t.shape() => {
                err = Some(CoreError::Format(format!(
                    "parameter {name} stored as {:?}, model expects {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            Some(v) => *t = Tensor::param(v.to_vec(), v.shape()).expect("shape checked"),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(CoreError::Format(format!("unexpected parameter {extra}")));
    }
    Ok(())
}
