//! Task graphs: typed nodes, explicit dependency edges, validation, and DOT
//! export.
//!
//! A [`TaskGraph`] owns an ordered list of nodes. Four node kinds exist:
//! `HOST` (a CPU callable), `PULL` (host-to-device copy), `PUSH`
//! (device-to-host copy from a pull's buffer), and `KERNEL` (a device
//! function whose pull arguments become device-buffer views). Dependencies
//! are only ever created explicitly through [`TaskHandle::precede`] /
//! [`TaskHandle::succeed`]; nothing is inferred from data flow.
//!
//! Graphs are built single-threaded, then submitted to an
//! [`Executor`](crate::executor::Executor), which validates them (acyclicity,
//! no placeholders, no dangling push sources) before running.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::device::KernelArgs;
use crate::error::{GraphError, ValidationIssue};
use crate::span::SpanSpec;

/// The four task types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Host,
    Pull,
    Push,
    Kernel,
}

impl TaskKind {
    fn lower(self) -> &'static str {
        match self {
            TaskKind::Host => "host",
            TaskKind::Pull => "pull",
            TaskKind::Push => "push",
            TaskKind::Kernel => "kernel",
        }
    }

    /// True for the kinds that execute on a device (and therefore need
    /// placement): transfers and kernels.
    pub fn is_device(self) -> bool {
        !matches!(self, TaskKind::Host)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Host => "HOST",
            TaskKind::Pull => "PULL",
            TaskKind::Push => "PUSH",
            TaskKind::Kernel => "KERNEL",
        };
        f.write_str(s)
    }
}

/// Launch shape for a kernel task. `grid` and `block` are carried as metadata
/// and handed to the kernel function for its own indexing; the runtime does
/// not emulate per-thread execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub grid: (u32, u32, u32),
    pub block: (u32, u32, u32),
    /// Shared-memory bytes; metadata only under the simulated backend.
    pub shm: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { grid: (1, 1, 1), block: (1, 1, 1), shm: 0 }
    }
}

/// A plain (non-buffer) kernel argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarValue {
    I64(i64),
    U64(u64),
    F64(f64),
}

impl ScalarValue {
    pub fn as_i64(self) -> i64 {
        match self {
            ScalarValue::I64(v) => v,
            ScalarValue::U64(v) => v as i64,
            ScalarValue::F64(v) => v as i64,
        }
    }

    pub fn as_u64(self) -> u64 {
        match self {
            ScalarValue::I64(v) => v as u64,
            ScalarValue::U64(v) => v,
            ScalarValue::F64(v) => v as u64,
        }
    }

    pub fn as_usize(self) -> usize {
        self.as_u64() as usize
    }

    pub fn as_f64(self) -> f64 {
        match self {
            ScalarValue::I64(v) => v as f64,
            ScalarValue::U64(v) => v as f64,
            ScalarValue::F64(v) => v,
        }
    }
}

macro_rules! impl_scalar_from {
    ($($ty:ty => $variant:ident as $as:ty),*) => {$(
        impl From<$ty> for ScalarValue {
            fn from(v: $ty) -> Self {
                ScalarValue::$variant(v as $as)
            }
        }
        impl From<$ty> for KernelArg {
            fn from(v: $ty) -> Self {
                KernelArg::Value(ScalarValue::$variant(v as $as))
            }
        }
    )*};
}

impl_scalar_from!(
    i8 => I64 as i64, i16 => I64 as i64, i32 => I64 as i64, i64 => I64 as i64,
    u8 => U64 as u64, u16 => U64 as u64, u32 => U64 as u64, u64 => U64 as u64,
    usize => U64 as u64, f32 => F64 as f64, f64 => F64 as f64
);

/// An argument passed to [`TaskGraph::kernel`]: either a plain value or a
/// PULL task handle whose device buffer the kernel will see as a view.
#[derive(Debug, Clone)]
pub enum KernelArg {
    Value(ScalarValue),
    Buffer(TaskHandle),
}

impl From<ScalarValue> for KernelArg {
    fn from(v: ScalarValue) -> Self {
        KernelArg::Value(v)
    }
}

impl From<&TaskHandle> for KernelArg {
    fn from(h: &TaskHandle) -> Self {
        KernelArg::Buffer(h.clone())
    }
}

impl From<TaskHandle> for KernelArg {
    fn from(h: TaskHandle) -> Self {
        KernelArg::Buffer(h)
    }
}

/// A kernel body. Receives the launch configuration and the resolved
/// arguments (plain values pass through; pull handles arrive as device-buffer
/// views). It must only touch device memory through those views.
pub type KernelFn = Arc<dyn Fn(&KernelConfig, &KernelArgs<'_>) + Send + Sync>;

/// Kernel argument after graph-side resolution: plain value, or the node
/// index of the source pull task.
#[derive(Clone)]
pub(crate) enum ArgSpec {
    Value(ScalarValue),
    Source(usize),
}

/// Node payload.
pub(crate) enum Work {
    Host(Box<dyn FnMut() + Send>),
    Pull(SpanSpec),
    Push { source: usize, span: SpanSpec },
    Kernel { func: KernelFn, args: Vec<ArgSpec> },
}

pub(crate) struct Node {
    pub(crate) kind: TaskKind,
    pub(crate) name: String,
    /// `None` marks a placeholder. Behind a mutex so workers can run `FnMut`
    /// host callables through a shared graph reference.
    pub(crate) work: Mutex<Option<Work>>,
    pub(crate) successors: Vec<usize>,
    pub(crate) predecessors: Vec<usize>,
    /// KERNEL only: node indices of its gateway pull tasks, deduplicated.
    pub(crate) sources: Vec<usize>,
    /// KERNEL only: launch shape.
    pub(crate) config: KernelConfig,
}

pub(crate) struct GraphState {
    pub(crate) nodes: Vec<Node>,
    pub(crate) edges: usize,
}

pub(crate) struct GraphCore {
    pub(crate) name: String,
    pub(crate) state: RwLock<GraphState>,
    /// Set while a submission of this graph is in flight.
    running: AtomicBool,
}

impl GraphCore {
    pub(crate) fn read(&self) -> RwLockReadGuard<'_, GraphState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, GraphState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn try_mark_running(&self) -> bool {
        !self.running.swap(true, Ordering::AcqRel)
    }

    pub(crate) fn clear_running(&self) {
        self.running.store(false, Ordering::Release);
    }
}

/// Summary of one node, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInfo {
    pub index: usize,
    pub name: String,
    pub kind: TaskKind,
    pub has_payload: bool,
}

/// A directed acyclic graph of host, pull, push, and kernel tasks.
pub struct TaskGraph {
    core: Arc<GraphCore>,
}

impl TaskGraph {
    pub fn new(name: impl Into<String>) -> Self {
        TaskGraph {
            core: Arc::new(GraphCore {
                name: name.into(),
                state: RwLock::new(GraphState { nodes: Vec::new(), edges: 0 }),
                running: AtomicBool::new(false),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.core.name
    }

    pub fn node_count(&self) -> usize {
        self.core.read().nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.core.read().edges
    }

    pub(crate) fn core(&self) -> &Arc<GraphCore> {
        &self.core
    }

    fn add_node(&self, kind: TaskKind, work: Option<Work>, sources: Vec<usize>) -> TaskHandle {
        let mut state = self.core.write();
        let index = state.nodes.len();
        state.nodes.push(Node {
            kind,
            name: format!("{}_{}", kind.lower(), index),
            work: Mutex::new(work),
            successors: Vec::new(),
            predecessors: Vec::new(),
            sources,
            config: KernelConfig::default(),
        });
        TaskHandle { link: Some((Arc::clone(&self.core), index)) }
    }

    /// Adds a HOST task running `callable` on some CPU worker.
    pub fn host(&self, callable: impl FnMut() + Send + 'static) -> TaskHandle {
        self.add_node(TaskKind::Host, Some(Work::Host(Box::new(callable))), Vec::new())
    }

    /// Adds a PULL task copying the span's bytes to a device buffer. The span
    /// is resolved when the task executes, not now.
    pub fn pull(&self, span: impl Into<SpanSpec>) -> TaskHandle {
        self.add_node(TaskKind::Pull, Some(Work::Pull(span.into())), Vec::new())
    }

    /// Adds a PUSH task copying `source`'s device buffer back into the span.
    /// `source` must be a PULL task of this graph.
    pub fn push(
        &self,
        source: &TaskHandle,
        span: impl Into<SpanSpec>,
    ) -> Result<TaskHandle, GraphError> {
        let source_index = self.check_pull_source(source)?;
        Ok(self.add_node(
            TaskKind::Push,
            Some(Work::Push { source: source_index, span: span.into() }),
            Vec::new(),
        ))
    }

    /// Adds a KERNEL task. Each argument is a plain value or a PULL handle of
    /// this graph; pull arguments become the kernel's data sources and arrive
    /// as device-buffer views when the kernel runs.
    pub fn kernel(
        &self,
        func: impl Fn(&KernelConfig, &KernelArgs<'_>) + Send + Sync + 'static,
        args: impl IntoIterator<Item = KernelArg>,
    ) -> Result<TaskHandle, GraphError> {
        let (work, sources) = self.build_kernel_work(Arc::new(func), args)?;
        Ok(self.add_node(TaskKind::Kernel, Some(work), sources))
    }

    /// Adds a node of fixed `kind` with no payload yet. The payload must be
    /// assigned via the matching `assign_*` method before submission; only
    /// the payload is late-bound, the kind never changes.
    pub fn placeholder(&self, kind: TaskKind) -> TaskHandle {
        self.add_node(kind, None, Vec::new())
    }

    /// Fills a HOST placeholder.
    pub fn assign_host(
        &self,
        handle: &TaskHandle,
        callable: impl FnMut() + Send + 'static,
    ) -> Result<(), GraphError> {
        self.assign(handle, TaskKind::Host, Work::Host(Box::new(callable)), None)
    }

    /// Fills a PULL placeholder.
    pub fn assign_pull(
        &self,
        handle: &TaskHandle,
        span: impl Into<SpanSpec>,
    ) -> Result<(), GraphError> {
        self.assign(handle, TaskKind::Pull, Work::Pull(span.into()), None)
    }

    /// Fills a PUSH placeholder.
    pub fn assign_push(
        &self,
        handle: &TaskHandle,
        source: &TaskHandle,
        span: impl Into<SpanSpec>,
    ) -> Result<(), GraphError> {
        let source_index = self.check_pull_source(source)?;
        self.assign(
            handle,
            TaskKind::Push,
            Work::Push { source: source_index, span: span.into() },
            None,
        )
    }

    /// Fills a KERNEL placeholder.
    pub fn assign_kernel(
        &self,
        handle: &TaskHandle,
        func: impl Fn(&KernelConfig, &KernelArgs<'_>) + Send + Sync + 'static,
        args: impl IntoIterator<Item = KernelArg>,
    ) -> Result<(), GraphError> {
        let (work, sources) = self.build_kernel_work(Arc::new(func), args)?;
        self.assign(handle, TaskKind::Kernel, work, Some(sources))
    }

    fn assign(
        &self,
        handle: &TaskHandle,
        expected: TaskKind,
        work: Work,
        sources: Option<Vec<usize>>,
    ) -> Result<(), GraphError> {
        let index = self.index_in_self(handle)?;
        let mut state = self.core.write();
        let node = &mut state.nodes[index];
        if node.kind != expected {
            return Err(GraphError::KindMismatch { expected, found: node.kind });
        }
        let mut slot = lock(&node.work);
        if slot.is_some() {
            return Err(GraphError::PayloadAlreadySet { name: node.name.clone() });
        }
        *slot = Some(work);
        drop(slot);
        if let Some(sources) = sources {
            node.sources = sources;
        }
        Ok(())
    }

    fn build_kernel_work(
        &self,
        func: KernelFn,
        args: impl IntoIterator<Item = KernelArg>,
    ) -> Result<(Work, Vec<usize>), GraphError> {
        let mut specs = Vec::new();
        let mut sources = Vec::new();
        for arg in args {
            match arg {
                KernelArg::Value(v) => specs.push(ArgSpec::Value(v)),
                KernelArg::Buffer(h) => {
                    let index = self.check_pull_source(&h)?;
                    specs.push(ArgSpec::Source(index));
                    // The same pull may be passed twice as an argument; the
                    // source set keeps one entry per pull.
                    if !sources.contains(&index) {
                        sources.push(index);
                    }
                }
            }
        }
        Ok((Work::Kernel { func, args: specs }, sources))
    }

    /// Checks that `handle` is a non-empty PULL task of this graph and
    /// returns its node index.
    fn check_pull_source(&self, handle: &TaskHandle) -> Result<usize, GraphError> {
        let index = self.index_in_self(handle)?;
        let state = self.core.read();
        let kind = state.nodes[index].kind;
        if kind != TaskKind::Pull {
            return Err(GraphError::KindMismatch { expected: TaskKind::Pull, found: kind });
        }
        Ok(index)
    }

    fn index_in_self(&self, handle: &TaskHandle) -> Result<usize, GraphError> {
        let (core, index) = handle.link.as_ref().ok_or(GraphError::EmptyHandle)?;
        if !Arc::ptr_eq(core, &self.core) {
            return Err(GraphError::GraphMismatch);
        }
        Ok(*index)
    }

    /// A handle to the node at `index`, if it exists.
    pub fn handle(&self, index: usize) -> Option<TaskHandle> {
        if index < self.node_count() {
            Some(TaskHandle { link: Some((Arc::clone(&self.core), index)) })
        } else {
            None
        }
    }

    /// Snapshot of all nodes.
    pub fn nodes(&self) -> Vec<TaskInfo> {
        let state = self.core.read();
        state
            .nodes
            .iter()
            .enumerate()
            .map(|(index, n)| TaskInfo {
                index,
                name: n.name.clone(),
                kind: n.kind,
                has_payload: lock(&n.work).is_some(),
            })
            .collect()
    }

    /// Snapshot of all dependency edges as `(from, to)` node indices.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let state = self.core.read();
        let mut out = Vec::with_capacity(state.edges);
        for (i, node) in state.nodes.iter().enumerate() {
            for &s in &node.successors {
                out.push((i, s));
            }
        }
        out
    }

    /// For every KERNEL node, its index and the indices of its source pulls.
    pub fn kernel_sources(&self) -> Vec<(usize, Vec<usize>)> {
        let state = self.core.read();
        state
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == TaskKind::Kernel)
            .map(|(i, n)| (i, n.sources.clone()))
            .collect()
    }

    /// Structural checks run automatically at submission: acyclicity (one
    /// offending cycle is reported if any exist), placeholder payloads, and
    /// push tasks whose source pull is itself a placeholder.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let state = self.core.read();
        let mut issues = Vec::new();

        for node in &state.nodes {
            if lock(&node.work).is_none() {
                issues.push(ValidationIssue::MissingPayload { name: node.name.clone() });
            }
        }
        for node in &state.nodes {
            if let Some(Work::Push { source, .. }) = &*lock(&node.work) {
                let source_node = &state.nodes[*source];
                if lock(&source_node.work).is_none() {
                    issues.push(ValidationIssue::UnresolvedPushSource {
                        push: node.name.clone(),
                        source: source_node.name.clone(),
                    });
                }
            }
        }
        if let Some(cycle) = find_cycle(&state) {
            issues.push(ValidationIssue::Cycle {
                names: cycle.into_iter().map(|i| state.nodes[i].name.clone()).collect(),
            });
        }

        if issues.is_empty() { Ok(()) } else { Err(issues) }
    }

    /// Serializes the graph in DOT format: one node statement per task
    /// (identifier `n<index>`, label `name\nKIND`) and one edge statement per
    /// dependency.
    pub fn dump_dot(&self) -> String {
        let state = self.core.read();
        let mut out = format!("digraph \"{}\" {{\n", dot_escape(&self.core.name));
        for (i, node) in state.nodes.iter().enumerate() {
            out.push_str(&format!(
                "  \"n{i}\" [label=\"{}\\n{}\"];\n",
                dot_escape(&node.name),
                node.kind
            ));
        }
        for (i, node) in state.nodes.iter().enumerate() {
            for &s in &node.successors {
                out.push_str(&format!("  \"n{i}\" -> \"n{s}\";\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

/// Kahn's algorithm; on a cycle, returns the nodes of one cycle in walk order.
fn find_cycle(state: &GraphState) -> Option<Vec<usize>> {
    let n = state.nodes.len();
    let mut indegree: Vec<usize> = state.nodes.iter().map(|n| n.predecessors.len()).collect();
    let mut queue: VecDeque<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut processed = 0;
    while let Some(i) = queue.pop_front() {
        processed += 1;
        for &s in &state.nodes[i].successors {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                queue.push_back(s);
            }
        }
    }
    if processed == n {
        return None;
    }

    // A remaining node always keeps a remaining predecessor (an edge is
    // consumed exactly when its source is processed), so walking
    // predecessors inside the remaining set must revisit a node even when we
    // start downstream of the cycle; the revisited stretch is the cycle,
    // walked backwards.
    let remaining: Vec<bool> = indegree.iter().map(|&d| d > 0).collect();
    let start = remaining.iter().position(|&r| r).expect("cycle nodes exist");
    let mut path = Vec::new();
    let mut position = vec![usize::MAX; n];
    let mut current = start;
    loop {
        if position[current] != usize::MAX {
            let mut cycle = path.split_off(position[current]);
            cycle.reverse();
            return Some(cycle);
        }
        position[current] = path.len();
        path.push(current);
        current = *state.nodes[current]
            .predecessors
            .iter()
            .find(|&&p| remaining[p])
            .expect("remaining node keeps a remaining predecessor");
    }
}

fn add_edge(state: &mut GraphState, from: usize, to: usize) {
    if state.nodes[from].successors.contains(&to) {
        return;
    }
    state.nodes[from].successors.push(to);
    state.nodes[to].predecessors.push(from);
    state.edges += 1;
}

/// A cheap, cloneable reference to one node of a [`TaskGraph`].
///
/// Handles returned by the graph's constructors are always non-empty;
/// [`TaskHandle::empty`] gives the detached default. Every mutating method on
/// an empty handle fails with [`GraphError::EmptyHandle`].
#[derive(Clone, Default)]
pub struct TaskHandle {
    link: Option<(Arc<GraphCore>, usize)>,
}

impl TaskHandle {
    /// A handle referring to no node.
    pub fn empty() -> Self {
        TaskHandle { link: None }
    }

    pub fn is_empty(&self) -> bool {
        self.link.is_none()
    }

    /// Node index within its graph.
    pub fn index(&self) -> Option<usize> {
        self.link.as_ref().map(|(_, i)| *i)
    }

    pub fn kind(&self) -> Option<TaskKind> {
        self.with_node(|n| n.kind)
    }

    pub fn name(&self) -> Option<String> {
        self.with_node(|n| n.name.clone())
    }

    /// Renames the node and returns the handle, for chaining at construction.
    /// No-op on an empty handle (there is nothing to name).
    pub fn named(self, name: impl Into<String>) -> Self {
        if let Some((core, index)) = &self.link {
            core.write().nodes[*index].name = name.into();
        }
        self
    }

    /// Adds an edge from this task to each of `others`: they may start only
    /// after this task finishes. Duplicate edges are ignored. All handles
    /// must be non-empty and belong to one graph; on error no edge is added.
    pub fn precede<'a>(
        &self,
        others: impl IntoIterator<Item = &'a TaskHandle>,
    ) -> Result<&Self, GraphError> {
        self.link_edges(others, true)
    }

    /// Mirror of [`precede`](Self::precede): adds an edge from each of
    /// `others` to this task.
    pub fn succeed<'a>(
        &self,
        others: impl IntoIterator<Item = &'a TaskHandle>,
    ) -> Result<&Self, GraphError> {
        self.link_edges(others, false)
    }

    fn link_edges<'a>(
        &self,
        others: impl IntoIterator<Item = &'a TaskHandle>,
        forward: bool,
    ) -> Result<&Self, GraphError> {
        let (core, index) = self.link.as_ref().ok_or(GraphError::EmptyHandle)?;
        let mut targets = Vec::new();
        for other in others {
            let (ocore, oindex) = other.link.as_ref().ok_or(GraphError::EmptyHandle)?;
            if !Arc::ptr_eq(core, ocore) {
                return Err(GraphError::GraphMismatch);
            }
            targets.push(*oindex);
        }
        let mut state = core.write();
        for t in targets {
            if forward {
                add_edge(&mut state, *index, t);
            } else {
                add_edge(&mut state, t, *index);
            }
        }
        Ok(self)
    }

    /// Current launch configuration, for KERNEL nodes.
    pub fn kernel_config(&self) -> Option<KernelConfig> {
        self.with_node(|n| n.config)
    }

    pub fn grid(&self, x: u32, y: u32, z: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.grid = (x, y, z))
    }

    pub fn grid_x(&self, x: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.grid.0 = x)
    }

    pub fn grid_y(&self, y: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.grid.1 = y)
    }

    pub fn grid_z(&self, z: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.grid.2 = z)
    }

    pub fn block(&self, x: u32, y: u32, z: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.block = (x, y, z))
    }

    pub fn block_x(&self, x: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.block.0 = x)
    }

    pub fn block_y(&self, y: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.block.1 = y)
    }

    pub fn block_z(&self, z: u32) -> Result<&Self, GraphError> {
        self.update_config(|c| c.block.2 = z)
    }

    /// Sets the shared-memory byte count (metadata under simulation).
    pub fn shm(&self, bytes: usize) -> Result<&Self, GraphError> {
        self.update_config(|c| c.shm = bytes)
    }

    fn update_config(&self, f: impl FnOnce(&mut KernelConfig)) -> Result<&Self, GraphError> {
        let (core, index) = self.link.as_ref().ok_or(GraphError::EmptyHandle)?;
        let mut state = core.write();
        let node = &mut state.nodes[*index];
        if node.kind != TaskKind::Kernel {
            return Err(GraphError::KindMismatch {
                expected: TaskKind::Kernel,
                found: node.kind,
            });
        }
        let mut config = node.config;
        f(&mut config);
        let (gx, gy, gz) = config.grid;
        let (bx, by, bz) = config.block;
        if gx == 0 || gy == 0 || gz == 0 || bx == 0 || by == 0 || bz == 0 {
            return Err(GraphError::ZeroLaunchDimension);
        }
        node.config = config;
        Ok(self)
    }

    fn with_node<R>(&self, f: impl FnOnce(&Node) -> R) -> Option<R> {
        let (core, index) = self.link.as_ref()?;
        let state = core.read();
        Some(f(&state.nodes[*index]))
    }
}

impl fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.name(), &self.kind()) {
            (Some(name), Some(kind)) => write!(f, "TaskHandle({kind} {name:?})"),
            _ => write!(f, "TaskHandle(<empty>)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::HostBuffer;

    fn noop_kernel() -> impl Fn(&KernelConfig, &KernelArgs<'_>) + Send + Sync + 'static {
        |_, _| {}
    }

    /// The seven-task example graph: two host fills feeding two pulls, one
    /// kernel, two pushes back out.
    fn saxpy_like() -> (TaskGraph, Vec<TaskHandle>) {
        let g = TaskGraph::new("saxpy");
        let x = HostBuffer::<f32>::new();
        let y = HostBuffer::<f32>::new();
        let hx = {
            let x = x.clone();
            g.host(move || x.resize(16, 1.0)).named("host_x")
        };
        let hy = {
            let y = y.clone();
            g.host(move || y.resize(16, 2.0)).named("host_y")
        };
        let px = g.pull(&x).named("pull_x");
        let py = g.pull(&y).named("pull_y");
        let k = g
            .kernel(noop_kernel(), [16i64.into(), 2.0f32.into(), (&px).into(), (&py).into()])
            .unwrap()
            .named("kernel");
        let sx = g.push(&px, &x).unwrap().named("push_x");
        let sy = g.push(&py, &y).unwrap().named("push_y");
        hx.precede([&px]).unwrap();
        hy.precede([&py]).unwrap();
        k.precede([&sx, &sy]).unwrap().succeed([&px, &py]).unwrap();
        (g, vec![hx, hy, px, py, k, sx, sy])
    }

    #[test]
    fn nodes_get_default_names_and_kinds() {
        let g = TaskGraph::new("g");
        let h = g.host(|| {});
        let p = g.pull(&HostBuffer::<u8>::new());
        assert_eq!(h.name().unwrap(), "host_0");
        assert_eq!(h.kind(), Some(TaskKind::Host));
        assert_eq!(p.name().unwrap(), "pull_1");
        assert_eq!(p.kind(), Some(TaskKind::Pull));
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn saxpy_shape_has_seven_nodes_six_edges() {
        let (g, _) = saxpy_like();
        assert_eq!(g.node_count(), 7);
        assert_eq!(g.edge_count(), 6);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn kernel_records_pull_sources_in_order_and_dedups() {
        let g = TaskGraph::new("g");
        let a = g.pull(&HostBuffer::<u8>::new());
        let b = g.pull(&HostBuffer::<u8>::new());
        let k = g
            .kernel(noop_kernel(), [(&b).into(), 1i64.into(), (&a).into(), (&b).into()])
            .unwrap();
        let sources = g.kernel_sources();
        assert_eq!(sources, vec![(k.index().unwrap(), vec![b.index().unwrap(), a.index().unwrap()])]);
    }

    #[test]
    fn kernel_with_only_plain_values_has_no_sources() {
        let g = TaskGraph::new("g");
        let k = g.kernel(noop_kernel(), [1i64.into(), 2.5f64.into()]).unwrap();
        assert_eq!(g.kernel_sources(), vec![(k.index().unwrap(), vec![])]);
    }

    #[test]
    fn kernel_rejects_empty_and_non_pull_args() {
        let g = TaskGraph::new("g");
        let h = g.host(|| {});
        assert_eq!(
            g.kernel(noop_kernel(), [TaskHandle::empty().into()]).unwrap_err(),
            GraphError::EmptyHandle
        );
        assert_eq!(
            g.kernel(noop_kernel(), [(&h).into()]).unwrap_err(),
            GraphError::KindMismatch { expected: TaskKind::Pull, found: TaskKind::Host }
        );
    }

    #[test]
    fn push_rejects_bad_sources() {
        let g = TaskGraph::new("g");
        let other = TaskGraph::new("other");
        let buf = HostBuffer::<u8>::new();
        let h = g.host(|| {});
        let foreign = other.pull(&buf);
        assert_eq!(g.push(&TaskHandle::empty(), &buf).unwrap_err(), GraphError::EmptyHandle);
        assert_eq!(
            g.push(&h, &buf).unwrap_err(),
            GraphError::KindMismatch { expected: TaskKind::Pull, found: TaskKind::Host }
        );
        assert_eq!(g.push(&foreign, &buf).unwrap_err(), GraphError::GraphMismatch);
    }

    #[test]
    fn precede_and_succeed_are_symmetric_and_idempotent() {
        let g = TaskGraph::new("g");
        let a = g.host(|| {});
        let b = g.host(|| {});
        a.precede([&b]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edges(), vec![(0, 1)]);

        // The same edge expressed either way adds nothing.
        a.precede([&b]).unwrap();
        b.succeed([&a]).unwrap();
        assert_eq!(g.edge_count(), 1);

        let c = g.host(|| {});
        c.succeed([&a, &b]).unwrap();
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn linking_rejects_empty_and_cross_graph_handles_without_partial_effect() {
        let g = TaskGraph::new("g");
        let other = TaskGraph::new("other");
        let a = g.host(|| {});
        let b = g.host(|| {});
        let foreign = other.host(|| {});
        assert_eq!(a.precede([&b, &TaskHandle::empty()]).unwrap_err(), GraphError::EmptyHandle);
        assert_eq!(a.precede([&b, &foreign]).unwrap_err(), GraphError::GraphMismatch);
        assert_eq!(TaskHandle::empty().precede([&a]).unwrap_err(), GraphError::EmptyHandle);
        assert_eq!(g.edge_count(), 0, "failed call must not leave a partial edge set");
    }

    #[test]
    fn kernel_config_defaults_and_per_axis_updates() {
        let g = TaskGraph::new("g");
        let k = g.kernel(noop_kernel(), []).unwrap();
        assert_eq!(k.kernel_config().unwrap(), KernelConfig::default());

        let n: u32 = 65536;
        k.block_x(256).unwrap().grid_x(n.div_ceil(256)).unwrap();
        let c = k.kernel_config().unwrap();
        assert_eq!(c.block, (256, 1, 1));
        assert_eq!(c.grid, (256, 1, 1));
        assert_eq!(c.shm, 0);

        // Last writer wins per axis.
        k.grid(4, 2, 1).unwrap().grid_x(8).unwrap();
        assert_eq!(k.kernel_config().unwrap().grid, (8, 2, 1));
        k.shm(1024).unwrap();
        assert_eq!(k.kernel_config().unwrap().shm, 1024);
    }

    #[test]
    fn zero_launch_dimensions_are_rejected_and_leave_config_unchanged() {
        let g = TaskGraph::new("g");
        let k = g.kernel(noop_kernel(), []).unwrap();
        let h = g.host(|| {});
        assert_eq!(k.grid_x(0).unwrap_err(), GraphError::ZeroLaunchDimension);
        assert_eq!(k.block(1, 0, 1).unwrap_err(), GraphError::ZeroLaunchDimension);
        assert_eq!(k.kernel_config().unwrap(), KernelConfig::default());
        assert_eq!(
            h.grid_x(2).unwrap_err(),
            GraphError::KindMismatch { expected: TaskKind::Kernel, found: TaskKind::Host }
        );
    }

    #[test]
    fn placeholders_fill_once_and_keep_their_kind() {
        let g = TaskGraph::new("g");
        let p = g.placeholder(TaskKind::Host);
        assert_eq!(p.kind(), Some(TaskKind::Host));
        assert!(!g.nodes()[0].has_payload);

        // Wrong-kind payload is rejected; the kind is fixed at creation.
        assert_eq!(
            g.assign_pull(&p, &HostBuffer::<u8>::new()).unwrap_err(),
            GraphError::KindMismatch { expected: TaskKind::Pull, found: TaskKind::Host }
        );

        g.assign_host(&p, || {}).unwrap();
        assert!(g.nodes()[0].has_payload);
        assert!(matches!(
            g.assign_host(&p, || {}).unwrap_err(),
            GraphError::PayloadAlreadySet { .. }
        ));
        assert!(g.validate().is_ok());
    }

    #[test]
    fn placeholders_can_be_wired_before_assignment() {
        let g = TaskGraph::new("g");
        let p = g.placeholder(TaskKind::Kernel);
        let h = g.host(|| {});
        h.precede([&p]).unwrap();
        assert_eq!(g.edge_count(), 1);

        let err = g.validate().unwrap_err();
        assert_eq!(err, vec![ValidationIssue::MissingPayload { name: "kernel_0".into() }]);

        g.assign_kernel(&p, noop_kernel(), []).unwrap();
        assert!(g.validate().is_ok());
    }

    #[test]
    fn validate_reports_a_cycle_with_its_nodes() {
        let g = TaskGraph::new("g");
        let a = g.host(|| {}).named("a");
        let b = g.host(|| {}).named("b");
        a.precede([&b]).unwrap();
        b.precede([&a]).unwrap();
        let issues = g.validate().unwrap_err();
        assert_eq!(issues.len(), 1);
        match &issues[0] {
            ValidationIssue::Cycle { names } => {
                let mut sorted = names.clone();
                sorted.sort();
                assert_eq!(sorted, vec!["a", "b"]);
            }
            other => panic!("expected cycle issue, got {other:?}"),
        }
    }

    #[test]
    fn validate_reports_push_with_placeholder_source() {
        let g = TaskGraph::new("g");
        let p = g.placeholder(TaskKind::Pull).named("src");
        let buf = HostBuffer::<u8>::new();
        let push = g.push(&p, &buf).unwrap().named("out");
        let _ = push;
        let issues = g.validate().unwrap_err();
        assert!(issues.contains(&ValidationIssue::MissingPayload { name: "src".into() }));
        assert!(issues.contains(&ValidationIssue::UnresolvedPushSource {
            push: "out".into(),
            source: "src".into(),
        }));
    }

    #[test]
    fn dot_empty_graph_has_no_statements() {
        let g = TaskGraph::new("empty");
        assert_eq!(g.dump_dot(), "digraph \"empty\" {\n}\n");
    }

    #[test]
    fn dot_lists_every_node_and_edge() {
        let (g, _) = saxpy_like();
        let dot = g.dump_dot();
        assert!(dot.starts_with("digraph \"saxpy\" {\n"));
        assert!(dot.ends_with("}\n"));
        assert_eq!(dot.matches("[label=").count(), 7);
        assert_eq!(dot.matches(" -> ").count(), 6);
        assert!(dot.contains("\"n4\" [label=\"kernel\\nKERNEL\"];"));
        assert!(dot.contains("\"n2\" -> \"n4\";"));
    }

    #[test]
    fn dot_escapes_quotes_and_newlines_in_names() {
        let g = TaskGraph::new("a\"b");
        g.host(|| {}).named("line1\nline2\"q\"");
        let dot = g.dump_dot();
        assert!(dot.starts_with("digraph \"a\\\"b\" {\n"));
        assert!(dot.contains("[label=\"line1\\nline2\\\"q\\\"\\nHOST\"];"));
    }

    #[test]
    fn handles_never_change_a_nodes_kind() {
        let (g, handles) = saxpy_like();
        let kinds: Vec<_> = handles.iter().map(|h| h.kind().unwrap()).collect();
        // Exercise every handle-level mutation that compiles.
        handles[4].grid_x(3).unwrap();
        handles[0].precede([&handles[6]]).unwrap();
        let renamed = handles[1].clone().named("renamed");
        assert_eq!(renamed.kind(), Some(TaskKind::Host));
        for (h, k) in handles.iter().zip(kinds) {
            assert_eq!(h.kind(), Some(k));
        }
        assert_eq!(g.nodes().len(), 7);
    }

    #[test]
    fn empty_handle_operations_fail_cleanly() {
        let e = TaskHandle::empty();
        assert!(e.is_empty());
        assert_eq!(e.kind(), None);
        assert_eq!(e.name(), None);
        assert_eq!(e.grid_x(1).unwrap_err(), GraphError::EmptyHandle);
        assert_eq!(e.precede([]).unwrap_err(), GraphError::EmptyHandle);
    }
}
