//! Task-graph runtime for mixed CPU / simulated-accelerator workloads.
//!
//! Applications describe work as a directed acyclic graph of four task kinds:
//!
//! - **HOST** — an arbitrary callable on a CPU worker;
//! - **PULL** — copy a host span into device memory;
//! - **KERNEL** — run a compute callable over device buffers;
//! - **PUSH** — copy device memory back out to a host span.
//!
//! Dependencies are explicit and only explicit: `a.precede(b)` / `b.succeed(a)`
//! edges decide execution order, never argument or data relationships. Spans
//! are resolved when a task *runs*, so a graph built once can be re-run over
//! inputs whose shape changes between iterations.
//!
//! An [`Executor`] owns `N` worker threads and `M` simulated devices. On
//! submission the graph is validated, connected device-task groups are
//! discovered with a disjoint-set pass, and whole groups are packed onto
//! devices longest-processing-time-first so per-device byte loads stay
//! balanced. Workers then run the graph with work stealing: each worker owns
//! a LIFO deque, steals FIFO from random victims when idle, and parks once
//! the system quiesces.
//!
//! ```
//! use taskfabric::{Executor, HostBuffer, KernelArg, TaskGraph};
//!
//! let x = HostBuffer::from_vec(vec![1.0f32; 1024]);
//! let y = HostBuffer::from_vec(vec![2.0f32; 1024]);
//!
//! let graph = TaskGraph::new("saxpy");
//! let pull_x = graph.pull(&x);
//! let pull_y = graph.pull(&y);
//! let saxpy = graph
//!     .kernel(
//!         |cfg, args| {
//!             let a = args.value(0).as_f64() as f32;
//!             let x = args.buffer(1);
//!             let y = args.buffer(2);
//!             let threads = (cfg.grid.0 * cfg.block.0) as usize;
//!             for i in (0..y.len_as::<f32>()).step_by(threads.max(1)) {
//!                 y.write::<f32>(i, a * x.read::<f32>(i) + y.read::<f32>(i));
//!             }
//!         },
//!         [KernelArg::from(2.0f32), KernelArg::from(&pull_x), KernelArg::from(&pull_y)],
//!     )
//!     .unwrap();
//! let push_y = graph.push(&pull_y, &y).unwrap();
//!
//! pull_x.precede([&saxpy]).unwrap();
//! pull_y.precede([&saxpy]).unwrap();
//! saxpy.precede([&push_y]).unwrap();
//!
//! let executor = Executor::new(2, 1).unwrap();
//! executor.run(&graph).wait().unwrap();
//! assert!(y.to_vec().iter().all(|&v| v == 4.0));
//! ```

pub mod alloc;
pub mod device;
pub mod error;
pub mod executor;
pub mod graph;
pub mod placement;
pub mod span;

pub use alloc::{Block, BuddyAllocator, DEFAULT_CAPACITY};
pub use device::{
    create_devices, ArgView, BufferId, Device, DeviceBuffer, DeviceMemoryStats, DeviceView,
    DrainStatus, EventId, KernelArgs, ResolvedArg, ScopedDeviceContext,
};
pub use error::{
    AllocError, ConfigError, DeviceError, GraphError, PlacementError, RunError, TaskError,
    ValidationIssue,
};
pub use executor::{
    CompletionTicket, ExecutionTrace, Executor, ExecutorBuilder, ExecutorStats, SchedulerSnapshot,
    StealStats, TraceEvent,
};
pub use graph::{KernelArg, KernelConfig, KernelFn, ScalarValue, TaskGraph, TaskHandle, TaskInfo, TaskKind};
pub use placement::{DisjointSet, PlacementResult};
pub use span::{DeviceScalar, HostBuffer, SpanError, SpanInfo, SpanResolve, SpanSpec};
