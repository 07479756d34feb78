//! The work-stealing executor.
//!
//! `N` worker threads each own a LIFO deque. A worker drains its own queue;
//! when empty it becomes a thief: it first grabs a batch from the shared
//! injector (where submissions land), then tries to steal one task from the
//! FIFO end of a uniformly random victim. After `2·N` consecutive failed
//! rounds it parks on the executor's notifier, with a final re-check ordered
//! so that no wake-up can be lost. Submissions and newly ready tasks wake one
//! thief when nobody is searching; a successful thief wakes the next while
//! visible work remains, so sleepers cascade awake exactly as fast as there
//! is work to take.
//!
//! Task execution is a visitor over the node kind. Device tasks run inside a
//! [`ScopedDeviceContext`] and drain their per-(worker, device) stream before
//! completing, so a finished task's device effects are visible to its
//! successors regardless of which worker or stream runs them.

mod notifier;
mod topology;

pub use topology::{CompletionTicket, ExecutionTrace, TraceEvent};

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crossbeam_deque::{Injector, Steal, Stealer, Worker as WorkerQueue};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::alloc::DEFAULT_CAPACITY;
use crate::device::{
    create_devices, panic_message, Device, DeviceMemoryStats, DrainStatus, ResolvedArg,
    ScopedDeviceContext,
};
use crate::error::{ConfigError, RunError, TaskError};
use crate::graph::{ArgSpec, TaskGraph, Work};
use crate::placement;
use notifier::Notifier;
use topology::{RunMode, Topology};

/// One schedulable unit: a node of a submitted topology.
struct Runnable {
    topo: Arc<Topology>,
    node: usize,
}

#[derive(Default)]
struct WorkerCounters {
    executed: AtomicU64,
    steal_attempts: AtomicU64,
    steal_hits: AtomicU64,
}

/// Counters describing steal traffic between worker deques.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StealStats {
    pub attempted: u64,
    pub succeeded: u64,
}

/// Point-in-time executor statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutorStats {
    /// Task payload executions per worker.
    pub per_worker_tasks: Vec<u64>,
    pub steals: StealStats,
    pub per_device: Vec<DeviceMemoryStats>,
    /// Completed topology iterations across all submissions.
    pub iterations_completed: u64,
}

/// Sampled scheduler state, for observing the adaptive-thief behaviour.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerSnapshot {
    pub worker_count: usize,
    /// Workers currently inside a task payload.
    pub active: usize,
    /// Workers currently hunting for work.
    pub searching: usize,
    /// Workers asleep on the notifier.
    pub parked: usize,
    /// Whether any queue visibly held work at the sampling instant.
    pub work_visible: bool,
}

struct Inner {
    injector: Injector<Runnable>,
    stealers: Vec<Stealer<Runnable>>,
    devices: Vec<Device>,
    notifier: Notifier,
    shutdown: AtomicBool,
    /// Unfinished submissions; guards wait_for_all.
    pending: Mutex<u64>,
    all_done: Condvar,
    searching: AtomicUsize,
    parked: AtomicUsize,
    active: AtomicUsize,
    counters: Vec<WorkerCounters>,
    iterations: AtomicU64,
}

impl Inner {
    fn work_visible(&self) -> bool {
        !self.injector.is_empty() || self.stealers.iter().any(|s| !s.is_empty())
    }

    /// Wakes one thief if nobody is currently searching. Called after making
    /// work visible; the notifier epoch makes this race-free against workers
    /// about to park.
    fn wake_for_work(&self) {
        if self.searching.load(Ordering::SeqCst) == 0 {
            self.notifier.notify_one();
        }
    }

    fn finish_submission(&self) {
        let mut pending = self.pending.lock().unwrap_or_else(|e| e.into_inner());
        *pending -= 1;
        if *pending == 0 {
            self.all_done.notify_all();
        }
    }
}

/// Configures worker count, device count, and device memory capacity.
pub struct ExecutorBuilder {
    workers: usize,
    devices: usize,
    device_capacity: usize,
}

impl ExecutorBuilder {
    pub fn new() -> Self {
        ExecutorBuilder { workers: 1, devices: 0, device_capacity: DEFAULT_CAPACITY }
    }

    pub fn workers(mut self, count: usize) -> Self {
        self.workers = count;
        self
    }

    pub fn devices(mut self, count: usize) -> Self {
        self.devices = count;
        self
    }

    /// Byte capacity of each device pool; must be a power of two.
    pub fn device_capacity(mut self, bytes: usize) -> Self {
        self.device_capacity = bytes;
        self
    }

    pub fn build(self) -> Result<Executor, ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::NoWorkers);
        }
        let devices = create_devices(self.devices, self.device_capacity)?;
        let queues: Vec<WorkerQueue<Runnable>> =
            (0..self.workers).map(|_| WorkerQueue::new_lifo()).collect();
        let inner = Arc::new(Inner {
            injector: Injector::new(),
            stealers: queues.iter().map(|q| q.stealer()).collect(),
            devices,
            notifier: Notifier::new(),
            shutdown: AtomicBool::new(false),
            pending: Mutex::new(0),
            all_done: Condvar::new(),
            searching: AtomicUsize::new(0),
            parked: AtomicUsize::new(0),
            active: AtomicUsize::new(0),
            counters: (0..self.workers).map(|_| WorkerCounters::default()).collect(),
            iterations: AtomicU64::new(0),
        });
        let threads = queues
            .into_iter()
            .enumerate()
            .map(|(index, queue)| {
                let inner = Arc::clone(&inner);
                std::thread::Builder::new()
                    .name(format!("worker-{index}"))
                    .spawn(move || worker_main(inner, index, queue))
                    .expect("failed to spawn worker thread")
            })
            .collect();
        Ok(Executor { inner, threads: Mutex::new(threads) })
    }
}

impl Default for ExecutorBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Work-stealing runtime over `N` CPU workers and `M` simulated devices.
///
/// All submission methods are non-blocking and thread-safe; results arrive
/// through [`CompletionTicket`]s. Dropping the executor waits for running
/// submissions, then stops the workers.
pub struct Executor {
    inner: Arc<Inner>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Executor {
    /// Executor with `workers` CPU threads and `devices` simulated devices of
    /// default capacity.
    pub fn new(workers: usize, devices: usize) -> Result<Self, ConfigError> {
        Self::builder().workers(workers).devices(devices).build()
    }

    pub fn builder() -> ExecutorBuilder {
        ExecutorBuilder::new()
    }

    pub fn worker_count(&self) -> usize {
        self.inner.stealers.len()
    }

    pub fn device_count(&self) -> usize {
        self.inner.devices.len()
    }

    /// The device at `index`, for inspection.
    pub fn device(&self, index: usize) -> Option<&Device> {
        self.inner.devices.get(index)
    }

    /// Runs the graph once. Equivalent to `run_n(graph, 1)`.
    pub fn run(&self, graph: &TaskGraph) -> CompletionTicket {
        self.submit(graph, RunMode::Count { total: 1 }, false).0
    }

    /// Runs the graph `n` times; every node executes exactly once per
    /// iteration. `n == 0` succeeds immediately.
    pub fn run_n(&self, graph: &TaskGraph, n: u64) -> CompletionTicket {
        self.submit(graph, RunMode::Count { total: n }, false).0
    }

    /// Runs iterations until `predicate()` returns true; the predicate is
    /// evaluated after each completed iteration, on a worker thread.
    pub fn run_until(
        &self,
        graph: &TaskGraph,
        predicate: impl FnMut() -> bool + Send + 'static,
    ) -> CompletionTicket {
        self.submit(
            graph,
            RunMode::Until { predicate: Mutex::new(Box::new(predicate)) },
            false,
        )
        .0
    }

    /// Like [`run_n`](Self::run_n), additionally recording a per-execution
    /// start/finish sequence log for dependency auditing.
    pub fn run_n_traced(
        &self,
        graph: &TaskGraph,
        n: u64,
    ) -> (CompletionTicket, Arc<ExecutionTrace>) {
        let (ticket, trace) = self.submit(graph, RunMode::Count { total: n }, true);
        (ticket, trace.expect("tracing was requested"))
    }

    fn submit(
        &self,
        graph: &TaskGraph,
        mode: RunMode,
        traced: bool,
    ) -> (CompletionTicket, Option<Arc<ExecutionTrace>>) {
        let trace = traced.then(ExecutionTrace::new);
        let core = Arc::clone(graph.core());
        if !core.try_mark_running() {
            return (CompletionTicket::resolved(Err(RunError::AlreadyRunning)), trace);
        }
        if let Err(issues) = graph.validate() {
            core.clear_running();
            return (CompletionTicket::resolved(Err(RunError::Invalid(issues))), trace);
        }
        let placement = match placement::place(graph, self.inner.devices.len()) {
            Ok(p) => p,
            Err(e) => {
                core.clear_running();
                return (CompletionTicket::resolved(Err(RunError::Placement(e))), trace);
            }
        };

        // Nothing to schedule: an empty graph, or a zero-iteration request.
        let trivial = graph.node_count() == 0 || matches!(mode, RunMode::Count { total: 0 });
        if trivial {
            core.clear_running();
            return (CompletionTicket::resolved(Ok(())), trace);
        }

        let topo = Topology::new(core, placement, mode, trace.clone());
        let ticket = topo.ticket.clone();
        {
            let mut pending = self.inner.pending.lock().unwrap_or_else(|e| e.into_inner());
            *pending += 1;
        }
        for &source in &topo.sources {
            self.inner.injector.push(Runnable { topo: Arc::clone(&topo), node: source });
        }
        self.inner.wake_for_work();
        (ticket, trace)
    }

    /// Blocks until every submission made before this call has completed.
    pub fn wait_for_all(&self) {
        let mut pending = self.inner.pending.lock().unwrap_or_else(|e| e.into_inner());
        while *pending > 0 {
            pending = self.inner.all_done.wait(pending).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn stats(&self) -> ExecutorStats {
        let per_worker_tasks =
            self.inner.counters.iter().map(|c| c.executed.load(Ordering::Relaxed)).collect();
        let attempted =
            self.inner.counters.iter().map(|c| c.steal_attempts.load(Ordering::Relaxed)).sum();
        let succeeded =
            self.inner.counters.iter().map(|c| c.steal_hits.load(Ordering::Relaxed)).sum();
        ExecutorStats {
            per_worker_tasks,
            steals: StealStats { attempted, succeeded },
            per_device: self.inner.devices.iter().map(|d| d.memory_stats()).collect(),
            iterations_completed: self.inner.iterations.load(Ordering::Relaxed),
        }
    }

    pub fn scheduler_snapshot(&self) -> SchedulerSnapshot {
        SchedulerSnapshot {
            worker_count: self.worker_count(),
            active: self.inner.active.load(Ordering::SeqCst),
            searching: self.inner.searching.load(Ordering::SeqCst),
            parked: self.inner.parked.load(Ordering::SeqCst),
            work_visible: self.inner.work_visible(),
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.wait_for_all();
        self.inner.shutdown.store(true, Ordering::Release);
        self.inner.notifier.notify_all();
        let threads = std::mem::take(&mut *self.threads.lock().unwrap_or_else(|e| e.into_inner()));
        for t in threads {
            let _ = t.join();
        }
    }
}

fn worker_main(inner: Arc<Inner>, me: usize, queue: WorkerQueue<Runnable>) {
    // Distinct deterministic stream per worker; victim choice needs no more.
    let mut rng = SmallRng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ (me as u64));
    loop {
        while let Some(task) = queue.pop() {
            run_chain(&inner, me, &queue, task);
        }
        if !steal_phase(&inner, me, &queue, &mut rng) {
            return;
        }
    }
}

/// Executes `task` and then any successor it retained, until the chain ends.
fn run_chain(inner: &Arc<Inner>, me: usize, queue: &WorkerQueue<Runnable>, task: Runnable) {
    let mut next = Some(task);
    while let Some(task) = next.take() {
        next = execute_node(inner, me, queue, task);
    }
}

/// The thief state machine. Returns false only on shutdown. On success the
/// stolen task (and everything that follows locally) is executed before
/// returning true.
fn steal_phase(
    inner: &Arc<Inner>,
    me: usize,
    queue: &WorkerQueue<Runnable>,
    rng: &mut SmallRng,
) -> bool {
    inner.searching.fetch_add(1, Ordering::SeqCst);
    let workers = inner.stealers.len();
    let mut rounds = 0;
    loop {
        if inner.shutdown.load(Ordering::Acquire) {
            inner.searching.fetch_sub(1, Ordering::SeqCst);
            return false;
        }

        let mut found = None;
        // Submissions land in the injector; grab a batch when there is one.
        loop {
            match inner.injector.steal_batch_and_pop(queue) {
                Steal::Success(task) => {
                    found = Some(task);
                    break;
                }
                Steal::Empty => break,
                Steal::Retry => {}
            }
        }
        // One attempt at one uniformly random victim, then re-randomize.
        if found.is_none() && workers > 1 {
            let victim = rng.random_range(0..workers);
            if victim != me {
                inner.counters[me].steal_attempts.fetch_add(1, Ordering::Relaxed);
                if let Steal::Success(task) = inner.stealers[victim].steal() {
                    inner.counters[me].steal_hits.fetch_add(1, Ordering::Relaxed);
                    found = Some(task);
                }
            }
        }

        if let Some(task) = found {
            let was_searching = inner.searching.fetch_sub(1, Ordering::SeqCst);
            // Keep the thief cascade going while there is work to take.
            if was_searching == 1 && inner.parked.load(Ordering::SeqCst) > 0 && inner.work_visible()
            {
                inner.notifier.notify_one();
            }
            run_chain(inner, me, queue, task);
            return true;
        }

        rounds += 1;
        if rounds < 2 * workers {
            std::hint::spin_loop();
            continue;
        }
        rounds = 0;

        // Park protocol: leave `searching` first, then capture the epoch,
        // then re-check. A submitter that makes work visible after our
        // re-check must observe searching == 0 and bump the epoch, which
        // park() notices.
        inner.searching.fetch_sub(1, Ordering::SeqCst);
        inner.parked.fetch_add(1, Ordering::SeqCst);
        let seen = inner.notifier.epoch();
        if inner.work_visible() || inner.shutdown.load(Ordering::Acquire) {
            inner.parked.fetch_sub(1, Ordering::SeqCst);
            inner.searching.fetch_add(1, Ordering::SeqCst);
            continue;
        }
        inner.notifier.park(seen);
        inner.parked.fetch_sub(1, Ordering::SeqCst);
        inner.searching.fetch_add(1, Ordering::SeqCst);
    }
}

/// Runs one node, propagates readiness to successors, and handles iteration
/// completion. Returns a retained successor to execute immediately, if any.
fn execute_node(
    inner: &Arc<Inner>,
    me: usize,
    queue: &WorkerQueue<Runnable>,
    task: Runnable,
) -> Option<Runnable> {
    let Runnable { topo, node } = task;
    let aborting = topo.failed.load(Ordering::Acquire);

    let mut retained = None;
    if !aborting {
        inner.active.fetch_add(1, Ordering::SeqCst);
        let started = topo.trace.as_ref().map(|t| t.next_seq());
        let outcome = invoke(inner, me, &topo, node);
        inner.counters[me].executed.fetch_add(1, Ordering::Relaxed);
        if let (Some(trace), Some(start)) = (&topo.trace, started) {
            let finish = trace.next_seq();
            trace.record(TraceEvent {
                node,
                iteration: topo.iterations_done.load(Ordering::Relaxed),
                worker: me,
                start,
                finish,
            });
        }
        inner.active.fetch_sub(1, Ordering::SeqCst);

        match outcome {
            Ok(()) => {
                // Make ready successors runnable: first one is retained for
                // immediate execution, the rest go to our LIFO queue.
                let state = topo.graph.read();
                let mut pushed = false;
                for &s in &state.nodes[node].successors {
                    if topo.join[s].fetch_sub(1, Ordering::AcqRel) == 1 {
                        topo.live.fetch_add(1, Ordering::AcqRel);
                        let runnable = Runnable { topo: Arc::clone(&topo), node: s };
                        if retained.is_none() {
                            retained = Some(runnable);
                        } else {
                            queue.push(runnable);
                            pushed = true;
                        }
                    }
                }
                drop(state);
                if pushed {
                    inner.wake_for_work();
                }
            }
            Err(error) => {
                // First failure wins; ready successors are not dispatched.
                topo.record_failure(topo.node_name(node), error);
            }
        }
    }

    // This execution leaves the live set; the worker that empties it owns
    // iteration completion.
    if topo.live.fetch_sub(1, Ordering::AcqRel) == 1 {
        debug_assert!(retained.is_none(), "retained successor implies live > 0");
        retained = complete_iteration(inner, me, queue, &topo);
    }
    retained
}

/// Runs on the single worker that finished an iteration's last node: decide
/// between failing, finishing, and re-arming for the next iteration.
fn complete_iteration(
    inner: &Arc<Inner>,
    me: usize,
    queue: &WorkerQueue<Runnable>,
    topo: &Arc<Topology>,
) -> Option<Runnable> {
    let _ = me;
    if let Some(error) = topo.take_failure() {
        finalize(inner, topo, Err(error));
        return None;
    }

    let done = topo.iterations_done.fetch_add(1, Ordering::AcqRel) + 1;
    inner.iterations.fetch_add(1, Ordering::Relaxed);
    let finished = match &topo.mode {
        RunMode::Count { total } => done >= *total,
        RunMode::Until { predicate } => {
            (predicate.lock().unwrap_or_else(|e| e.into_inner()))()
        }
    };
    if finished {
        finalize(inner, topo, Ok(()));
        return None;
    }

    // Next iteration: re-arm counters, then dispatch the sources. We are the
    // only worker touching this topology right now.
    topo.reset_iteration();
    let mut retained = None;
    let mut pushed = false;
    for &source in &topo.sources {
        let runnable = Runnable { topo: Arc::clone(topo), node: source };
        if retained.is_none() {
            retained = Some(runnable);
        } else {
            queue.push(runnable);
            pushed = true;
        }
    }
    if pushed {
        inner.wake_for_work();
    }
    retained
}

/// Releases per-topology resources and publishes the result.
fn finalize(inner: &Arc<Inner>, topo: &Arc<Topology>, result: Result<(), RunError>) {
    let buffers: Vec<_> = {
        let mut table = topo.buffers.lock().unwrap_or_else(|e| e.into_inner());
        table.drain().map(|(_, buf)| buf).collect()
    };
    for buf in buffers {
        // A free failure here is unreachable short of an internal bug, and
        // the topology outcome is already decided; do not mask it.
        let _ = inner.devices[buf.device].free(buf.id);
    }
    topo.graph.clear_running();
    topo.ticket.resolve(result);
    inner.finish_submission();
}

/// Visitor dispatch on the node kind.
fn invoke(inner: &Inner, me: usize, topo: &Topology, node: usize) -> Result<(), TaskError> {
    let state = topo.graph.read();
    let node_ref = &state.nodes[node];
    let mut work_guard = node_ref.work.lock().unwrap_or_else(|e| e.into_inner());
    let work = work_guard
        .as_mut()
        .ok_or_else(|| TaskError::Internal("placeholder payload survived validation".into()))?;

    match work {
        Work::Host(callable) => catch_unwind(AssertUnwindSafe(callable))
            .map_err(|p| TaskError::Panic(panic_message(p))),

        Work::Pull(span) => {
            let span = span.clone();
            let device_id = topo
                .placement
                .device_of(node)
                .ok_or_else(|| TaskError::Internal("pull task missing placement".into()))?;
            let _scope = ScopedDeviceContext::enter(device_id);
            let device = &inner.devices[device_id];

            let info = span.resolve().map_err(|e| TaskError::Span(e.0))?;
            let bytes = info.byte_len();
            let buffer = {
                let mut table = topo.buffers.lock().unwrap_or_else(|e| e.into_inner());
                let reusable = table
                    .get(&node)
                    .copied()
                    .filter(|b| b.requested == bytes && b.elem_size == info.elem_size);
                match reusable {
                    Some(existing) => existing,
                    None => {
                        // Span shape changed between iterations: replace the
                        // buffer.
                        if let Some(stale) = table.remove(&node) {
                            inner.devices[stale.device].free(stale.id).map_err(|e| {
                                TaskError::Internal(format!("stale buffer free failed: {e}"))
                            })?;
                        }
                        let fresh = device
                            .allocate(bytes, info.elem_size)
                            .map_err(TaskError::from_device)?;
                        table.insert(node, fresh);
                        fresh
                    }
                }
            };

            let event = device.record_event(me);
            device.enqueue_h2d(me, span, buffer.id).map_err(TaskError::from_device)?;
            device.wait_event(me, event).map_err(TaskError::from_device)?;
            drain_fully(device, me)
        }

        Work::Push { source, span } => {
            let (source, span) = (*source, span.clone());
            let device_id = topo.placement.device_of(source).ok_or_else(|| {
                TaskError::Internal("push source missing placement".into())
            })?;
            let _scope = ScopedDeviceContext::enter(device_id);
            let device = &inner.devices[device_id];
            let buffer = topo
                .buffers
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .get(&source)
                .copied()
                .ok_or_else(|| {
                    TaskError::Internal("push ran before its pull allocated a buffer".into())
                })?;

            let event = device.record_event(me);
            device.enqueue_d2h(me, buffer.id, span).map_err(TaskError::from_device)?;
            device.wait_event(me, event).map_err(TaskError::from_device)?;
            drain_fully(device, me)
        }

        Work::Kernel { func, args } => {
            let device_id = topo
                .placement
                .device_of(node)
                .ok_or_else(|| TaskError::Internal("kernel task missing placement".into()))?;
            let _scope = ScopedDeviceContext::enter(device_id);
            let device = &inner.devices[device_id];

            let resolved = {
                let table = topo.buffers.lock().unwrap_or_else(|e| e.into_inner());
                let mut resolved = Vec::with_capacity(args.len());
                for arg in args.iter() {
                    resolved.push(match arg {
                        ArgSpec::Value(v) => ResolvedArg::Value(*v),
                        ArgSpec::Source(pull) => {
                            let buffer = table.get(pull).copied().ok_or_else(|| {
                                TaskError::Internal(
                                    "kernel ran before its source pull allocated a buffer".into(),
                                )
                            })?;
                            if buffer.device != device_id {
                                return Err(TaskError::Internal(format!(
                                    "placement violation: kernel on device {device_id}, \
                                     source buffer on device {}",
                                    buffer.device
                                )));
                            }
                            ResolvedArg::Buffer(buffer.id)
                        }
                    });
                }
                resolved
            };

            let event = device.record_event(me);
            device
                .enqueue_kernel(me, func.clone(), node_ref.config, resolved)
                .map_err(TaskError::from_device)?;
            device.wait_event(me, event).map_err(TaskError::from_device)?;
            drain_fully(device, me)
        }
    }
}

fn drain_fully(device: &Device, worker: usize) -> Result<(), TaskError> {
    match device.drain(worker).map_err(TaskError::from_device)? {
        DrainStatus::Drained => Ok(()),
        DrainStatus::Stalled(_) => {
            Err(TaskError::Internal("stream stalled on its own event".into()))
        }
    }
}
