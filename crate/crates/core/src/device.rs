//! Simulated accelerator devices.
//!
//! Each [`Device`] owns a fixed-capacity byte store managed by a
//! [`BuddyAllocator`], a set of FIFO command streams (one per worker thread,
//! created lazily), and one-way completion events. Workers enqueue H2D/D2H
//! copies, kernel launches, and event markers, then [`Device::drain`] their
//! stream: synchronization ops are handled under the device lock, but copies
//! and kernel bodies run outside it, so streams of different workers make
//! progress concurrently. Device bytes are atomics, which keeps concurrent
//! kernels on one device data-race-free without locking the whole store.

use std::cell::Cell;
use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Mutex, MutexGuard};

use crate::alloc::BuddyAllocator;
use crate::error::{ConfigError, DeviceError};
use crate::graph::{KernelConfig, KernelFn, ScalarValue};
use crate::span::{DeviceScalar, SpanSpec};

pub use crate::alloc::DEFAULT_CAPACITY;

/// Identifier of a live device buffer. Only meaningful on the device that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(u64);

/// Descriptor of a live allocation on a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceBuffer {
    pub id: BufferId,
    pub device: usize,
    pub offset: usize,
    /// Power-of-two block size reserved in the pool; at least `requested`.
    pub size: usize,
    /// Byte length the caller asked for; transfers copy exactly this many.
    pub requested: usize,
    /// Element size of the span that filled the buffer, kept for views.
    pub elem_size: usize,
}

/// A stream-ordered synchronization marker with a one-way completion flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventId {
    pub device: usize,
    index: usize,
}

/// Kernel argument after the executor has looked up pull buffers.
#[derive(Debug, Clone, Copy)]
pub enum ResolvedArg {
    Value(ScalarValue),
    Buffer(BufferId),
}

/// Outcome of [`Device::drain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrainStatus {
    /// The stream is empty.
    Drained,
    /// The stream's front op waits on an event that has not completed; the
    /// op stays queued.
    Stalled(EventId),
}

/// Per-device memory counters, in the shape reported by executor statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct DeviceMemoryStats {
    /// Cumulative block bytes allocated over the device's lifetime.
    pub allocated_bytes: u64,
    /// High-water mark of live block bytes.
    pub peak_bytes: u64,
}

enum StreamOp {
    H2D { buffer: BufferId, span: SpanSpec },
    D2H { buffer: BufferId, span: SpanSpec },
    Kernel { func: KernelFn, config: KernelConfig, args: Vec<ResolvedArg> },
    EventRecord { index: usize },
    EventWait { index: usize },
}

#[derive(Clone, Copy)]
struct BufferMeta {
    offset: usize,
    requested: usize,
    elem_size: usize,
}

struct DeviceInner {
    pool: BuddyAllocator,
    buffers: HashMap<u64, BufferMeta>,
    next_buffer: u64,
    /// FIFO command queue per worker id, created on first use.
    streams: HashMap<usize, VecDeque<StreamOp>>,
    /// Completion flag per issued event; events complete once and stay so.
    events: Vec<bool>,
}

/// One simulated accelerator.
pub struct Device {
    id: usize,
    memory: Box<[AtomicU8]>,
    inner: Mutex<DeviceInner>,
}

/// What the drain loop decided to do with the front op, resolved under the
/// device lock.
enum DrainStep {
    Done,
    Stalled(usize),
    Run(StreamOp),
    Again,
}

impl Device {
    pub fn new(id: usize, capacity: usize) -> Result<Self, ConfigError> {
        let pool = BuddyAllocator::new(capacity)?;
        let memory = std::iter::repeat_with(|| AtomicU8::new(0)).take(capacity).collect();
        Ok(Device {
            id,
            memory,
            inner: Mutex::new(DeviceInner {
                pool,
                buffers: HashMap::new(),
                next_buffer: 0,
                streams: HashMap::new(),
                events: Vec::new(),
            }),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.memory.len()
    }

    fn lock(&self) -> MutexGuard<'_, DeviceInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Reserves a pool block of at least `requested` bytes.
    pub fn allocate(&self, requested: usize, elem_size: usize) -> Result<DeviceBuffer, DeviceError> {
        let mut inner = self.lock();
        let block = inner
            .pool
            .allocate(requested)
            .map_err(|_| DeviceError::OutOfMemory { device: self.id, requested })?;
        let id = inner.next_buffer;
        inner.next_buffer += 1;
        inner.buffers.insert(id, BufferMeta { offset: block.offset, requested, elem_size });
        Ok(DeviceBuffer {
            id: BufferId(id),
            device: self.id,
            offset: block.offset,
            size: block.size,
            requested,
            elem_size,
        })
    }

    /// Releases a live buffer back to the pool.
    pub fn free(&self, buffer: BufferId) -> Result<(), DeviceError> {
        let mut inner = self.lock();
        let meta = inner
            .buffers
            .remove(&buffer.0)
            .ok_or(DeviceError::UnknownBuffer { device: self.id })?;
        inner
            .pool
            .deallocate(meta.offset)
            .map_err(|e| DeviceError::Internal(format!("pool free failed: {e}")))
    }

    pub fn live_buffer_count(&self) -> usize {
        self.lock().buffers.len()
    }

    pub fn memory_stats(&self) -> DeviceMemoryStats {
        let inner = self.lock();
        DeviceMemoryStats {
            allocated_bytes: inner.pool.total_allocated_bytes(),
            peak_bytes: inner.pool.peak_live_bytes() as u64,
        }
    }

    pub fn live_bytes(&self) -> usize {
        self.lock().pool.live_bytes()
    }

    /// Enqueues a host-to-device copy of the span's bytes into `buffer` on
    /// `worker`'s stream. The span is read when the op is processed.
    pub fn enqueue_h2d(
        &self,
        worker: usize,
        span: SpanSpec,
        buffer: BufferId,
    ) -> Result<(), DeviceError> {
        let mut inner = self.lock();
        inner.check_buffer(self.id, buffer)?;
        inner.streams.entry(worker).or_default().push_back(StreamOp::H2D { buffer, span });
        Ok(())
    }

    /// Enqueues a device-to-host copy from `buffer` into the span.
    pub fn enqueue_d2h(
        &self,
        worker: usize,
        buffer: BufferId,
        span: SpanSpec,
    ) -> Result<(), DeviceError> {
        let mut inner = self.lock();
        inner.check_buffer(self.id, buffer)?;
        inner.streams.entry(worker).or_default().push_back(StreamOp::D2H { buffer, span });
        Ok(())
    }

    /// Enqueues a kernel launch. All buffer arguments must be live here.
    pub fn enqueue_kernel(
        &self,
        worker: usize,
        func: KernelFn,
        config: KernelConfig,
        args: Vec<ResolvedArg>,
    ) -> Result<(), DeviceError> {
        let mut inner = self.lock();
        for arg in &args {
            if let ResolvedArg::Buffer(id) = arg {
                inner.check_buffer(self.id, *id)?;
            }
        }
        inner.streams.entry(worker).or_default().push_back(StreamOp::Kernel { func, config, args });
        Ok(())
    }

    /// Issues a fresh event and enqueues its completion marker on `worker`'s
    /// stream. The event completes when the stream processes the marker.
    pub fn record_event(&self, worker: usize) -> EventId {
        let mut inner = self.lock();
        let index = inner.events.len();
        inner.events.push(false);
        inner.streams.entry(worker).or_default().push_back(StreamOp::EventRecord { index });
        EventId { device: self.id, index }
    }

    /// Enqueues a wait: ops behind it on `worker`'s stream do not process
    /// until the event has completed. Waiting on an already-completed event
    /// is a no-op.
    pub fn wait_event(&self, worker: usize, event: EventId) -> Result<(), DeviceError> {
        if event.device != self.id {
            return Err(DeviceError::ForeignEvent { device: self.id, event_device: event.device });
        }
        let mut inner = self.lock();
        inner.streams.entry(worker).or_default().push_back(StreamOp::EventWait { index: event.index });
        Ok(())
    }

    pub fn event_completed(&self, event: EventId) -> bool {
        event.device == self.id && self.lock().events[event.index]
    }

    /// Processes `worker`'s stream in FIFO order until it is empty or its
    /// front op waits on an incomplete event. Copies and kernels execute
    /// outside the device lock; a failing op clears the rest of the stream
    /// (its topology is aborting anyway) and returns the failure.
    pub fn drain(&self, worker: usize) -> Result<DrainStatus, DeviceError> {
        loop {
            let step = {
                let mut guard = self.lock();
                let inner = &mut *guard;
                let events = &mut inner.events;
                match inner.streams.get_mut(&worker) {
                    None => DrainStep::Done,
                    Some(queue) => match queue.front() {
                        None => DrainStep::Done,
                        Some(StreamOp::EventRecord { index }) => {
                            events[*index] = true;
                            queue.pop_front();
                            DrainStep::Again
                        }
                        Some(StreamOp::EventWait { index }) => {
                            if events[*index] {
                                queue.pop_front();
                                DrainStep::Again
                            } else {
                                DrainStep::Stalled(*index)
                            }
                        }
                        Some(_) => DrainStep::Run(queue.pop_front().expect("front exists")),
                    },
                }
            };
            match step {
                DrainStep::Done => return Ok(DrainStatus::Drained),
                DrainStep::Stalled(index) => {
                    return Ok(DrainStatus::Stalled(EventId { device: self.id, index }))
                }
                DrainStep::Again => continue,
                DrainStep::Run(op) => {
                    if let Err(e) = self.execute(op) {
                        if let Some(queue) = self.lock().streams.get_mut(&worker) {
                            queue.clear();
                        }
                        return Err(e);
                    }
                }
            }
        }
    }

    fn buffer_meta(&self, buffer: BufferId) -> Result<BufferMeta, DeviceError> {
        self.lock()
            .buffers
            .get(&buffer.0)
            .copied()
            .ok_or(DeviceError::UnknownBuffer { device: self.id })
    }

    fn execute(&self, op: StreamOp) -> Result<(), DeviceError> {
        match op {
            StreamOp::H2D { buffer, span } => {
                let meta = self.buffer_meta(buffer)?;
                let bytes = span.read_bytes().map_err(|e| DeviceError::Span(e.0))?;
                if bytes.len() != meta.requested {
                    return Err(DeviceError::SizeMismatch {
                        host: bytes.len(),
                        device: meta.requested,
                    });
                }
                for (i, b) in bytes.iter().enumerate() {
                    self.memory[meta.offset + i].store(*b, Ordering::Relaxed);
                }
                Ok(())
            }
            StreamOp::D2H { buffer, span } => {
                let meta = self.buffer_meta(buffer)?;
                let info = span.resolve().map_err(|e| DeviceError::Span(e.0))?;
                if info.byte_len() != meta.requested {
                    return Err(DeviceError::SizeMismatch {
                        host: info.byte_len(),
                        device: meta.requested,
                    });
                }
                let mut bytes = vec![0u8; meta.requested];
                for (i, b) in bytes.iter_mut().enumerate() {
                    *b = self.memory[meta.offset + i].load(Ordering::Relaxed);
                }
                span.write_bytes(&bytes).map_err(|e| DeviceError::Span(e.0))
            }
            StreamOp::Kernel { func, config, args } => {
                let mut views = Vec::with_capacity(args.len());
                for arg in args {
                    views.push(match arg {
                        ResolvedArg::Value(v) => ArgView::Value(v),
                        ResolvedArg::Buffer(id) => {
                            let meta = self.buffer_meta(id)?;
                            ArgView::Buffer(DeviceView {
                                cells: &self.memory[meta.offset..meta.offset + meta.requested],
                                elem_size: meta.elem_size,
                            })
                        }
                    });
                }
                let packed = KernelArgs { args: views };
                catch_unwind(AssertUnwindSafe(|| func(&config, &packed)))
                    .map_err(|p| DeviceError::KernelPanic(panic_message(p)))
            }
            StreamOp::EventRecord { .. } | StreamOp::EventWait { .. } => {
                Err(DeviceError::Internal("sync op reached the execution path".into()))
            }
        }
    }

    /// Copies a live buffer's requested bytes out, for inspection and tests.
    pub fn read_buffer(&self, buffer: BufferId) -> Result<Vec<u8>, DeviceError> {
        let meta = self.buffer_meta(buffer)?;
        let mut bytes = vec![0u8; meta.requested];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.memory[meta.offset + i].load(Ordering::Relaxed);
        }
        Ok(bytes)
    }
}

impl DeviceInner {
    fn check_buffer(&self, device: usize, buffer: BufferId) -> Result<(), DeviceError> {
        if self.buffers.contains_key(&buffer.0) {
            Ok(())
        } else {
            Err(DeviceError::UnknownBuffer { device })
        }
    }
}

/// Builds `count` independent devices of the given capacity. The capacity is
/// validated even when `count` is zero.
pub fn create_devices(count: usize, capacity: usize) -> Result<Vec<Device>, ConfigError> {
    if !capacity.is_power_of_two() {
        return Err(ConfigError::CapacityNotPowerOfTwo(capacity));
    }
    (0..count).map(|id| Device::new(id, capacity)).collect()
}

pub(crate) fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "<non-string panic payload>".to_string()
    }
}

/// A typed window over one device buffer, handed to kernel functions.
///
/// Reads and writes go through relaxed byte atomics: element accesses index
/// by `T`'s byte width, so a kernel may reinterpret the buffer at any scalar
/// type, exactly like casting a device pointer. Out-of-range indexing panics,
/// which surfaces as a kernel-panic task failure.
pub struct DeviceView<'a> {
    cells: &'a [AtomicU8],
    elem_size: usize,
}

impl DeviceView<'_> {
    /// Element count under the element size the buffer was pulled with.
    pub fn len(&self) -> usize {
        if self.elem_size == 0 { 0 } else { self.cells.len() / self.elem_size }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.cells.len()
    }

    /// Element size the buffer was pulled with.
    pub fn elem_size(&self) -> usize {
        self.elem_size
    }

    /// Element count when viewed as `T`.
    pub fn len_as<T: DeviceScalar>(&self) -> usize {
        self.cells.len() / T::BYTES
    }

    pub fn read<T: DeviceScalar>(&self, index: usize) -> T {
        let base = index * T::BYTES;
        let mut raw = [0u8; 8];
        let raw = &mut raw[..T::BYTES];
        for (i, b) in raw.iter_mut().enumerate() {
            *b = self.cells[base + i].load(Ordering::Relaxed);
        }
        T::load_le(raw)
    }

    pub fn write<T: DeviceScalar>(&self, index: usize, value: T) {
        let base = index * T::BYTES;
        let mut raw = [0u8; 8];
        let raw = &mut raw[..T::BYTES];
        value.store_le(raw);
        for (i, b) in raw.iter().enumerate() {
            self.cells[base + i].store(*b, Ordering::Relaxed);
        }
    }

    pub fn to_vec<T: DeviceScalar>(&self) -> Vec<T> {
        (0..self.len_as::<T>()).map(|i| self.read(i)).collect()
    }
}

/// Resolved kernel argument: plain value or device-buffer view.
pub enum ArgView<'a> {
    Value(ScalarValue),
    Buffer(DeviceView<'a>),
}

/// The argument list a kernel function receives. Index accessors panic on a
/// type or arity mismatch — inside a kernel that is a programming error and
/// becomes a kernel-panic task failure.
pub struct KernelArgs<'a> {
    args: Vec<ArgView<'a>>,
}

impl<'a> KernelArgs<'a> {
    pub fn len(&self) -> usize {
        self.args.len()
    }

    pub fn is_empty(&self) -> bool {
        self.args.is_empty()
    }

    pub fn get(&self, index: usize) -> &ArgView<'a> {
        &self.args[index]
    }

    /// The plain value at `index`.
    pub fn value(&self, index: usize) -> ScalarValue {
        match &self.args[index] {
            ArgView::Value(v) => *v,
            ArgView::Buffer(_) => panic!("kernel argument {index} is a buffer, not a value"),
        }
    }

    /// The buffer view at `index`.
    pub fn buffer(&self, index: usize) -> &DeviceView<'a> {
        match &self.args[index] {
            ArgView::Buffer(b) => b,
            ArgView::Value(_) => panic!("kernel argument {index} is a value, not a buffer"),
        }
    }
}

thread_local! {
    static ACTIVE_DEVICE: Cell<Option<usize>> = const { Cell::new(None) };
}

/// RAII guard scoping the executing thread to one device for the extent of a
/// task invocation. Scopes nest; dropping restores the previous context.
pub struct ScopedDeviceContext {
    previous: Option<usize>,
}

impl ScopedDeviceContext {
    pub fn enter(device: usize) -> Self {
        let previous = ACTIVE_DEVICE.replace(Some(device));
        ScopedDeviceContext { previous }
    }

    /// Device the current thread is scoped to, if any.
    pub fn current() -> Option<usize> {
        ACTIVE_DEVICE.get()
    }
}

impl Drop for ScopedDeviceContext {
    fn drop(&mut self) {
        ACTIVE_DEVICE.set(self.previous);
    }
}
