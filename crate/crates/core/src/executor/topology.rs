//! Per-submission bookkeeping: join counters, iteration control, the
//! completion ticket, and the optional execution trace.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::device::DeviceBuffer;
use crate::error::{RunError, TaskError};
use crate::graph::GraphCore;
use crate::placement::PlacementResult;

/// How many times a submission iterates.
pub(crate) enum RunMode {
    Count { total: u64 },
    /// Re-dispatches until the predicate returns true; evaluated after each
    /// completed iteration, on the worker that finished it.
    Until { predicate: Mutex<Box<dyn FnMut() -> bool + Send>> },
}

/// The runtime record of one graph submission.
pub(crate) struct Topology {
    pub(crate) graph: Arc<GraphCore>,
    pub(crate) placement: PlacementResult,
    /// Remaining unfinished predecessors per node; zero means ready.
    pub(crate) join: Vec<AtomicUsize>,
    /// Predecessor counts, for re-arming `join` between iterations.
    preds: Vec<usize>,
    /// Nodes with no predecessors; dispatched at every iteration start.
    pub(crate) sources: Vec<usize>,
    /// Dispatched-but-unfinished node count for the current iteration. The
    /// worker that drops it to zero owns iteration completion.
    pub(crate) live: AtomicUsize,
    pub(crate) iterations_done: AtomicU64,
    pub(crate) mode: RunMode,
    /// First task failure wins; `failed` is the fast-path flag that makes the
    /// remaining in-flight tasks drain without executing.
    failure: Mutex<Option<RunError>>,
    pub(crate) failed: AtomicBool,
    pub(crate) ticket: CompletionTicket,
    /// Device buffer per pull node, reused across iterations while the span
    /// size is stable, freed when the topology finishes.
    pub(crate) buffers: Mutex<HashMap<usize, DeviceBuffer>>,
    pub(crate) trace: Option<Arc<ExecutionTrace>>,
}

impl Topology {
    pub(crate) fn new(
        graph: Arc<GraphCore>,
        placement: PlacementResult,
        mode: RunMode,
        trace: Option<Arc<ExecutionTrace>>,
    ) -> Arc<Self> {
        let (preds, sources) = {
            let state = graph.read();
            let preds: Vec<usize> =
                state.nodes.iter().map(|n| n.predecessors.len()).collect();
            let sources: Vec<usize> =
                preds.iter().enumerate().filter(|(_, &p)| p == 0).map(|(i, _)| i).collect();
            (preds, sources)
        };
        let join = preds.iter().map(|&p| AtomicUsize::new(p)).collect();
        let live = AtomicUsize::new(sources.len());
        Arc::new(Topology {
            graph,
            placement,
            join,
            preds,
            sources,
            live,
            iterations_done: AtomicU64::new(0),
            mode,
            failure: Mutex::new(None),
            failed: AtomicBool::new(false),
            ticket: CompletionTicket::pending(),
            buffers: Mutex::new(HashMap::new()),
            trace,
        })
    }

    /// Re-arms join counters and the live count for the next iteration. Only
    /// called by the single worker that completed the previous iteration.
    pub(crate) fn reset_iteration(&self) {
        for (join, &preds) in self.join.iter().zip(&self.preds) {
            join.store(preds, Ordering::Relaxed);
        }
        self.live.store(self.sources.len(), Ordering::Release);
    }

    /// Records a task failure; the first one is kept.
    pub(crate) fn record_failure(&self, node: String, error: TaskError) {
        let mut slot = self.failure.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            *slot = Some(RunError::Task { node, source: error });
        }
        drop(slot);
        self.failed.store(true, Ordering::Release);
    }

    pub(crate) fn take_failure(&self) -> Option<RunError> {
        self.failure.lock().unwrap_or_else(|e| e.into_inner()).take()
    }

    pub(crate) fn node_name(&self, node: usize) -> String {
        self.graph.read().nodes[node].name.clone()
    }
}

/// One globally ordered start/finish record per task execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub node: usize,
    /// 0-based iteration the execution belonged to.
    pub iteration: u64,
    pub worker: usize,
    /// Sequence number drawn when the payload began.
    pub start: u64,
    /// Sequence number drawn when the payload finished.
    pub finish: u64,
}

/// Execution log for dependency auditing: sequence numbers come from one
/// shared counter, so for any edge a→b within an iteration, a's finish
/// number is smaller than b's start number.
#[derive(Default)]
pub struct ExecutionTrace {
    counter: AtomicU64,
    events: Mutex<Vec<TraceEvent>>,
}

impl ExecutionTrace {
    pub(crate) fn new() -> Arc<Self> {
        Arc::new(ExecutionTrace::default())
    }

    pub(crate) fn next_seq(&self) -> u64 {
        self.counter.fetch_add(1, Ordering::SeqCst)
    }

    pub(crate) fn record(&self, event: TraceEvent) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(event);
    }

    /// All recorded executions, in no particular order.
    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

struct TicketInner {
    state: Mutex<Option<Result<(), RunError>>>,
    ready: Condvar,
}

/// One-shot waitable outcome of a submission. Cloneable; every clone observes
/// the same result.
#[derive(Clone)]
pub struct CompletionTicket {
    inner: Arc<TicketInner>,
}

impl CompletionTicket {
    pub(crate) fn pending() -> Self {
        CompletionTicket {
            inner: Arc::new(TicketInner { state: Mutex::new(None), ready: Condvar::new() }),
        }
    }

    pub(crate) fn resolved(result: Result<(), RunError>) -> Self {
        let ticket = Self::pending();
        ticket.resolve(result);
        ticket
    }

    /// Publishes the result. Only the first resolution counts.
    pub(crate) fn resolve(&self, result: Result<(), RunError>) {
        let mut state = self.lock();
        if state.is_none() {
            *state = Some(result);
            self.inner.ready.notify_all();
        }
    }

    /// Blocks until the submission finishes and returns its outcome.
    pub fn wait(&self) -> Result<(), RunError> {
        let mut state = self.lock();
        while state.is_none() {
            state = self.inner.ready.wait(state).unwrap_or_else(|e| e.into_inner());
        }
        state.clone().expect("checked above")
    }

    /// Like [`wait`](Self::wait) with an upper bound; `None` on timeout.
    pub fn wait_timeout(&self, limit: Duration) -> Option<Result<(), RunError>> {
        let deadline = std::time::Instant::now() + limit;
        let mut state = self.lock();
        while state.is_none() {
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let (guard, _) = self
                .inner
                .ready
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner());
            state = guard;
        }
        state.clone()
    }

    /// The result if already available; never blocks.
    pub fn try_result(&self) -> Option<Result<(), RunError>> {
        self.lock().clone()
    }

    pub fn is_ready(&self) -> bool {
        self.lock().is_some()
    }

    fn lock(&self) -> MutexGuard<'_, Option<Result<(), RunError>>> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}
