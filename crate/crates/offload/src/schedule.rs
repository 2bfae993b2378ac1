use crate::error::{OffloadError, Result};

/// One step of the backward pipeline as seen by the compute thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineEvent {
    /// A host-to-arena transfer of segment `k`'s input was issued.
    Fetch(usize),
    /// The backward recomputation of segment `k` started.
    Backward(usize),
}

/// Decides when each evicted segment input is fetched back.
///
/// Backward consumes segments in reverse. Before the first one runs, the
/// last `lookahead` inputs are requested; when segment `k` starts, the
/// inputs of `k - 1 ..= k - lookahead` that are still outstanding are
/// requested. A segment whose input was never requested is fetched on
/// demand and counts as a stall.
#[derive(Debug, Clone)]
pub(crate) struct Planner {
    lookahead: usize,
    issued: Vec<bool>,
    next: Option<usize>,
    begun: bool,
}

/// Fetches to issue before segment `k` runs, and whether `k` itself had to
/// be demand-fetched.
#[derive(Debug, Default)]
pub(crate) struct Step {
    pub fetches: Vec<usize>,
    pub demand: bool,
}

impl Planner {
    pub fn new(segments: usize, lookahead: usize) -> Result<Self> {
        if lookahead == 0 {
            return Err(OffloadError::ZeroLookahead);
        }
        Ok(Planner {
            lookahead,
            issued: vec![false; segments],
            next: segments.checked_sub(1),
            begun: false,
        })
    }

    /// Registers one more segment (forward pass); only valid before backward.
    pub fn push(&mut self) -> usize {
        debug_assert!(!self.begun);
        self.issued.push(false);
        self.next = Some(self.issued.len() - 1);
        self.issued.len() - 1
    }

    fn issue_below(&mut self, top: usize, count: usize) -> Vec<usize> {
        let lo = top.saturating_sub(count - 1);
        let mut out = Vec::new();
        for s in (lo..=top).rev() {
            if !self.issued[s] {
                self.issued[s] = true;
                out.push(s);
            }
        }
        out
    }

    /// Initial prefetches; idempotent.
    pub fn begin(&mut self) -> Vec<usize> {
        if self.begun {
            return Vec::new();
        }
        self.begun = true;
        match self.next {
            Some(top) => self.issue_below(top, self.lookahead),
            None => Vec::new(),
        }
    }

    pub fn consume(&mut self, slot: usize) -> Result<Step> {
        let mut step = Step {
            fetches: self.begin(),
            demand: false,
        };
        if self.next != Some(slot) {
            return Err(OffloadError::Order {
                expected: self.next,
                got: slot,
            });
        }
        if slot > 0 {
            step.fetches.extend(self.issue_below(slot - 1, self.lookahead));
        }
        if !self.issued[slot] {
            self.issued[slot] = true;
            step.demand = true;
        }
        self.next = slot.checked_sub(1);
        Ok(step)
    }
}

/// The order of fetches and backward steps for `segments` offloaded segments
/// with the given lookahead. The engine follows exactly this order.
pub fn prefetch_schedule(segments: usize, lookahead: usize) -> Result<Vec<PipelineEvent>> {
    let mut planner = Planner::new(segments, lookahead)?;
    let mut events: Vec<PipelineEvent> =
        planner.begin().into_iter().map(PipelineEvent::Fetch).collect();
    for k in (0..segments).rev() {
        let step = planner.consume(k)?;
        events.extend(step.fetches.into_iter().map(PipelineEvent::Fetch));
        if step.demand {
            events.push(PipelineEvent::Fetch(k));
        }
        events.push(PipelineEvent::Backward(k));
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_order_consumption_is_an_error() {
        let mut p = Planner::new(3, 1).unwrap();
        assert!(matches!(
            p.consume(1),
            Err(OffloadError::Order { expected: Some(2), got: 1 })
        ));
        p.consume(2).unwrap();
        p.consume(1).unwrap();
        p.consume(0).unwrap();
        assert!(matches!(p.consume(0), Err(OffloadError::Order { expected: None, .. })));
    }

    #[test]
    fn lookahead_larger_than_chain_fetches_everything_up_front() {
        let ev = prefetch_schedule(2, 5).unwrap();
        use PipelineEvent::*;
        assert_eq!(ev, vec![Fetch(1), Fetch(0), Backward(1), Backward(0)]);
    }
}
