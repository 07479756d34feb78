//! Error types shared across the crate.

use thiserror::Error;

use crate::graph::TaskKind;

/// Errors raised while building or mutating a task graph.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    /// The handle does not refer to any node.
    #[error("task handle is empty")]
    EmptyHandle,
    /// Two handles passed to the same call belong to different graphs.
    #[error("task handles belong to different graphs")]
    GraphMismatch,
    /// An operation required a task of one kind but the handle points at another.
    #[error("expected a {expected} task, found {found}")]
    KindMismatch { expected: TaskKind, found: TaskKind },
    /// A payload was assigned to a node that already has one.
    #[error("task {name:?} already has a payload")]
    PayloadAlreadySet { name: String },
    /// Kernel launch shapes must have at least one unit along every axis.
    #[error("kernel grid/block dimensions must be non-zero")]
    ZeroLaunchDimension,
}

/// A structural problem found by [`TaskGraph::validate`](crate::graph::TaskGraph::validate).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    /// The dependency relation contains a cycle; one offending cycle is listed.
    Cycle { names: Vec<String> },
    /// A node was created as a placeholder and never assigned a payload.
    MissingPayload { name: String },
    /// A push task's source transfer is a placeholder, so the device buffer it
    /// would copy from can never exist.
    UnresolvedPushSource { push: String, source: String },
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationIssue::Cycle { names } => {
                write!(f, "dependency cycle: {}", names.join(" -> "))
            }
            ValidationIssue::MissingPayload { name } => {
                write!(f, "task {name:?} has no payload")
            }
            ValidationIssue::UnresolvedPushSource { push, source } => {
                write!(f, "push task {push:?} reads from {source:?}, which has no payload")
            }
        }
    }
}

/// Errors raised when constructing an executor or a device pool.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("executor needs at least one worker thread")]
    NoWorkers,
    #[error("device capacity must be a power of two, got {0}")]
    CapacityNotPowerOfTwo(usize),
    #[error("minimum block size must be a power of two no larger than the capacity")]
    InvalidMinBlock,
}

/// Errors from the device memory pool.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    /// No free block large enough for the request exists.
    #[error("pool exhausted: no free block of {requested} bytes")]
    Exhausted { requested: usize },
    /// Offset passed to `deallocate` does not match a live allocation.
    #[error("offset {offset} is not a live allocation")]
    UnknownBlock { offset: usize },
}

/// Errors from simulated-device operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device {device} out of memory ({requested} bytes requested)")]
    OutOfMemory { device: usize, requested: usize },
    #[error("buffer is not live on device {device}")]
    UnknownBuffer { device: usize },
    #[error("event belongs to device {event_device}, not device {device}")]
    ForeignEvent { device: usize, event_device: usize },
    #[error("host span is {host} bytes but the device buffer holds {device} bytes")]
    SizeMismatch { host: usize, device: usize },
    #[error("span access failed: {0}")]
    Span(String),
    #[error("kernel panicked: {0}")]
    KernelPanic(String),
    #[error("device invariant violated: {0}")]
    Internal(String),
}

/// Why a task failed during execution.
#[derive(Debug, Clone, Error)]
pub enum TaskError {
    #[error("device {device} out of memory ({requested} bytes requested)")]
    DeviceOutOfMemory { device: usize, requested: usize },
    #[error("span access failed: {0}")]
    Span(String),
    #[error("host span is {host} bytes but the device buffer holds {device} bytes")]
    SpanSizeMismatch { host: usize, device: usize },
    #[error("task panicked: {0}")]
    Panic(String),
    #[error("runtime invariant violated: {0}")]
    Internal(String),
}

impl TaskError {
    pub(crate) fn from_device(err: DeviceError) -> Self {
        match err {
            DeviceError::OutOfMemory { device, requested } => {
                TaskError::DeviceOutOfMemory { device, requested }
            }
            DeviceError::SizeMismatch { host, device } => {
                TaskError::SpanSizeMismatch { host, device }
            }
            DeviceError::Span(msg) => TaskError::Span(msg),
            DeviceError::KernelPanic(msg) => TaskError::Panic(msg),
            other => TaskError::Internal(other.to_string()),
        }
    }
}

/// Errors from device placement.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    /// The graph contains transfer or kernel tasks but the executor has no devices.
    #[error("graph has {gpu_tasks} device tasks but no devices are configured")]
    NoDevices { gpu_tasks: usize },
}

/// Terminal outcome of a failed submission, delivered through a
/// [`CompletionTicket`](crate::executor::CompletionTicket).
#[derive(Debug, Clone, Error)]
pub enum RunError {
    /// The graph failed structural validation.
    #[error("graph validation failed: {}", format_issues(.0))]
    Invalid(Vec<ValidationIssue>),
    /// Device placement could not be computed.
    #[error(transparent)]
    Placement(#[from] PlacementError),
    /// A task payload failed; the first failure in the topology wins.
    #[error("task {node:?} failed: {source}")]
    Task {
        node: String,
        #[source]
        source: TaskError,
    },
    /// The graph was submitted while a previous submission was still in flight.
    #[error("graph is already running")]
    AlreadyRunning,
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}
