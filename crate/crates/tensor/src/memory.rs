//! Per-thread accounting of tensor storage.
//!
//! Every tensor buffer registers its byte size with the tracker of the thread
//! that allocated it and deregisters on drop, wherever the drop happens. The
//! tracker therefore measures live activation residency for one compute loop
//! even when buffers are shared with helper threads.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct MemTracker {
    live: AtomicI64,
    peak: AtomicI64,
}

impl MemTracker {
    pub fn alloc(&self, bytes: usize) {
        let live = self.live.fetch_add(bytes as i64, Ordering::SeqCst) + bytes as i64;
        self.peak.fetch_max(live, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        self.live.fetch_sub(bytes as i64, Ordering::SeqCst);
    }

    /// Bytes currently held (tensor buffers plus reservations).
    pub fn current(&self) -> i64 {
        self.live.load(Ordering::SeqCst)
    }

    /// High-water mark since creation or the last [`MemTracker::reset_peak`].
    pub fn peak(&self) -> i64 {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::SeqCst);
    }

    /// Runs `f` and reports the largest rise of live bytes above the level
    /// at entry. The overall high-water mark is preserved.
    pub fn measure_rise<R>(&self, f: impl FnOnce() -> R) -> (R, i64) {
        let outer_peak = self.peak();
        let start = self.current();
        self.peak.store(start, Ordering::SeqCst);
        let r = f();
        let rise = self.peak() - start;
        self.peak.fetch_max(outer_peak, Ordering::SeqCst);
        (r, rise)
    }
}

thread_local! {
    static TRACKER: Arc<MemTracker> = Arc::new(MemTracker::default());
}

/// The tracker of the calling thread.
pub fn tracker() -> Arc<MemTracker> {
    TRACKER.with(Arc::clone)
}

pub fn current_bytes() -> i64 {
    TRACKER.with(|t| t.current())
}

pub fn peak_bytes() -> i64 {
    TRACKER.with(|t| t.peak())
}

pub fn reset_peak() {
    TRACKER.with(|t| t.reset_peak())
}

/// Owned f64 storage registered with an allocation tracker.
#[derive(Debug)]
pub struct Buffer {
    values: Vec<f64>,
    tracker: Arc<MemTracker>,
}

impl Buffer {
    pub fn new(values: Vec<f64>) -> Self {
        let tracker = tracker();
        tracker.alloc(values.len() * std::mem::size_of::<f64>());
        Buffer { values, tracker }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        self.tracker.free(self.bytes());
    }
}
