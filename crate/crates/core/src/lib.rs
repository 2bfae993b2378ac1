//! Encoder-processor-decoder weather model on a latitude-longitude grid:
//! neighborhood attention, latent rollout over mixed 6h/1h processors,
//! curriculum training, forecast metrics and a synthetic atmosphere.

pub mod attention;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod module;
pub mod persist;
pub mod rollout;
pub mod train;
pub mod verify;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use model::{LatentState, ModelInput, Prediction, WeatherMesh};
pub use module::Module;
