use std::sync::Arc;

use wm_tensor::memory::{self, MemTracker};

use crate::error::{OffloadError, Result};

/// Fast activation memory of one compute thread, measured by the tensor
/// allocation tracker relative to the level at creation.
///
/// Residency counts live tensor buffers plus bytes reserved for in-flight
/// prefetches. The high-water mark only grows while the arena exists.
#[derive(Debug)]
pub struct ActivationArena {
    budget: i64,
    baseline: i64,
    tracker: Arc<MemTracker>,
}

impl ActivationArena {
    pub fn new(budget_bytes: usize) -> Self {
        let tracker = memory::tracker();
        tracker.reset_peak();
        ActivationArena {
            budget: budget_bytes as i64,
            baseline: tracker.current(),
            tracker,
        }
    }

    pub fn budget(&self) -> i64 {
        self.budget
    }

    pub fn residency(&self) -> i64 {
        self.tracker.current() - self.baseline
    }

    pub fn high_water(&self) -> i64 {
        self.tracker.peak() - self.baseline
    }

    pub(crate) fn tracker(&self) -> &Arc<MemTracker> {
        &self.tracker
    }

    pub(crate) fn reserve(&self, bytes: usize) {
        self.tracker.alloc(bytes);
    }

    pub(crate) fn release(&self, bytes: usize) {
        self.tracker.free(bytes);
    }

    /// Fails when `working_set` more bytes would not fit.
    pub fn ensure_room(&self, working_set: i64) -> Result<()> {
        let required = self.residency().max(0) + working_set;
        if required > self.budget {
            return Err(OffloadError::Budget {
                budget: self.budget,
                required,
            });
        }
        Ok(())
    }

    /// Fails when the high-water mark has gone past the budget.
    pub fn check(&self) -> Result<()> {
        let high_water = self.high_water();
        if high_water > self.budget {
            return Err(OffloadError::BudgetExceeded {
                budget: self.budget,
                high_water,
            });
        }
        Ok(())
    }
}
