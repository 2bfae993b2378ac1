//! Activation offloading for chains of checkpointed segments.
//!
//! Each segment input is written to a host store after the forward pass and
//! streamed back by a background worker during backward, so the live
//! activation footprint stays bounded by one segment's working set plus the
//! prefetch window, independent of chain length.

mod arena;
mod engine;
mod error;
mod schedule;
mod store;

pub use arena::ActivationArena;
pub use engine::{OffloadConfig, OffloadEngine, OffloadStats};
pub use error::{OffloadError, Result};
pub use schedule::{prefetch_schedule, PipelineEvent};
pub use store::{StoreKind, TransferWorker};
