use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use wm_tensor::{
    no_grad, recompute_segment, with_grad_mode, BackwardOp, Buffer, Gradients, Segment, Tensor,
    TensorError,
};

use crate::arena::ActivationArena;
use crate::error::Result;
use crate::schedule::{PipelineEvent, Planner};
use crate::store::{StoreKind, TransferWorker};

/// Engine settings.
#[derive(Debug, Clone)]
pub struct OffloadConfig {
    pub budget_bytes: usize,
    /// Segments fetched ahead of the one being recomputed.
    pub lookahead: usize,
    pub store: StoreKind,
    /// Artificial delay per transfer, to model a slow host link.
    pub latency: Duration,
}

impl OffloadConfig {
    pub fn new(budget_bytes: usize) -> Self {
        OffloadConfig {
            budget_bytes,
            lookahead: 2,
            store: StoreKind::Memory,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OffloadStats {
    pub segments: usize,
    pub evictions: usize,
    pub fetches: usize,
    /// Fetches issued only when backward already needed the data.
    pub demand_fetches: usize,
    /// Prefetches that had not arrived when backward reached them.
    pub late_arrivals: usize,
    pub wait_time: Duration,
    pub high_water: i64,
    pub working_set: i64,
}

struct State {
    planner: Planner,
    sizes: Vec<usize>,
    events: Vec<PipelineEvent>,
    stats: OffloadStats,
    working_sets: HashMap<usize, i64>,
}

struct Inner {
    arena: ActivationArena,
    worker: TransferWorker,
    state: RefCell<State>,
}

/// Runs a chain of segments with each segment input moved to host storage
/// after the forward pass and fetched back, ahead of need, for backward.
///
/// One engine serves one forward/backward pass on the thread that created
/// it. Its arena baseline is the tracker level at construction.
#[derive(Clone)]
pub struct OffloadEngine {
    inner: Rc<Inner>,
}

impl OffloadEngine {
    pub fn new(config: OffloadConfig) -> Result<Self> {
        let planner = Planner::new(0, config.lookahead)?;
        let worker = TransferWorker::spawn(config.store, config.latency, config.lookahead)?;
        Ok(OffloadEngine {
            inner: Rc::new(Inner {
                arena: ActivationArena::new(config.budget_bytes),
                worker,
                state: RefCell::new(State {
                    planner,
                    sizes: Vec::new(),
                    events: Vec::new(),
                    stats: OffloadStats::default(),
                    working_sets: HashMap::new(),
                }),
            }),
        })
    }

    pub fn arena(&self) -> &ActivationArena {
        &self.inner.arena
    }

    /// Peak arena bytes needed to recompute and differentiate `segment` on
    /// `input`, including the fetched input and the retained output.
    /// Measured once per segment function.
    pub fn working_set(&self, segment: &Segment, input: &Tensor) -> Result<i64> {
        let key = Rc::as_ptr(segment) as *const () as usize;
        if let Some(ws) = self.inner.state.borrow().working_sets.get(&key) {
            return Ok(*ws);
        }
        let tracker = Arc::clone(self.inner.arena_tracker());
        let (res, rise) = tracker.measure_rise(|| -> wm_tensor::Result<usize> {
            let x = Tensor::leaf_from_buffer(Arc::new(Buffer::new(input.to_vec())), input.shape())?;
            let out = with_grad_mode(true, || segment(&x))?;
            let n = out.bytes();
            let mut scratch = Gradients::default();
            out.backward_with_seed(vec![1.0; out.numel()], &mut scratch)?;
            Ok(n)
        });
        let ws = rise + res? as i64;
        let mut st = self.inner.state.borrow_mut();
        st.working_sets.insert(key, ws);
        st.stats.working_set = st.stats.working_set.max(ws);
        Ok(ws)
    }

    /// Applies `segment` to `input` without recording, evicts `input` to the
    /// host store, and returns an output whose backward fetches the input
    /// back and recomputes. Fails before any compute when the arena cannot
    /// hold the segment's working set.
    ///
    /// Callers should drop `input` afterwards so its arena bytes are freed.
    pub fn checkpoint(&self, segment: &Segment, input: &Tensor) -> Result<Tensor> {
        let ws = self.working_set(segment, input)?;
        self.inner.arena.ensure_room(ws)?;
        let out = no_grad(|| segment(input))?;
        let slot = {
            let mut st = self.inner.state.borrow_mut();
            let slot = st.planner.push();
            st.sizes.push(input.bytes());
            st.stats.segments += 1;
            st.stats.evictions += 1;
            slot
        };
        self.inner.worker.evict(slot, Arc::clone(input.buffer()))?;
        let op = OffloadBackward {
            engine: Rc::clone(&self.inner),
            segment: Rc::clone(segment),
            slot,
            shape: input.shape().to_vec(),
        };
        let t = Tensor::from_op_buffer(Arc::clone(out.buffer()), out.shape(), op, &[input], true)?;
        self.record_high_water();
        Ok(t)
    }

    fn record_high_water(&self) {
        let hw = self.inner.arena.high_water();
        let mut st = self.inner.state.borrow_mut();
        st.stats.high_water = st.stats.high_water.max(hw);
    }

    pub fn stats(&self) -> OffloadStats {
        self.record_high_water();
        self.inner.state.borrow().stats.clone()
    }

    pub fn events(&self) -> Vec<PipelineEvent> {
        self.inner.state.borrow().events.clone()
    }

    /// Fails when the recorded high-water mark went past the budget.
    pub fn check_budget(&self) -> Result<()> {
        self.inner.arena.check()
    }
}

impl Inner {
    fn arena_tracker(&self) -> &Arc<wm_tensor::memory::MemTracker> {
        self.arena.tracker()
    }

    fn issue(&self, st: &mut State, slots: Vec<usize>) -> Result<()> {
        for s in slots {
            self.arena.reserve(st.sizes[s]);
            st.events.push(PipelineEvent::Fetch(s));
            st.stats.fetches += 1;
            self.worker.fetch(s)?;
        }
        Ok(())
    }

    fn begin_backward(&self) -> Result<()> {
        let mut st = self.state.borrow_mut();
        let first = st.planner.begin();
        self.issue(&mut st, first)
    }

    /// Returns the input of `slot` once it has arrived.
    fn acquire(&self, slot: usize) -> Result<Arc<Buffer>> {
        {
            let mut st = self.state.borrow_mut();
            let step = st.planner.consume(slot)?;
            self.issue(&mut st, step.fetches)?;
            if step.demand {
                st.stats.demand_fetches += 1;
                self.issue(&mut st, vec![slot])?;
            }
            st.events.push(PipelineEvent::Backward(slot));
        }
        let start = Instant::now();
        let (values, waited) = self.worker.take_arrived(slot)?;
        let mut st = self.state.borrow_mut();
        if waited {
            st.stats.late_arrivals += 1;
            st.stats.wait_time += start.elapsed();
        }
        self.arena.release(st.sizes[slot]);
        Ok(Arc::new(Buffer::new(values)))
    }
}

struct OffloadBackward {
    engine: Rc<Inner>,
    segment: Segment,
    slot: usize,
    shape: Vec<usize>,
}

impl BackwardOp for OffloadBackward {
    fn name(&self) -> &'static str {
        "offload"
    }

    fn prepare(&self) {
        // A failed send means the worker is gone; `acquire` reports it.
        let _ = self.engine.begin_backward();
    }

    fn backward(&self, g: &[f64], grads: &mut Gradients) -> wm_tensor::Result<Vec<Option<Vec<f64>>>> {
        let input = self.engine.acquire(self.slot).map_err(TensorError::from)?;
        let gx = recompute_segment(&self.segment, input, &self.shape, g, grads)?;
        let hw = self.engine.arena.high_water();
        let mut st = self.engine.state.borrow_mut();
        st.stats.high_water = st.stats.high_water.max(hw);
        Ok(vec![Some(gx)])
    }
}
