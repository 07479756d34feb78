//! Host-side data sources and sinks for device transfers.
//!
//! Transfer tasks do not capture raw pointers. They capture a [`SpanSpec`],
//! a deferred description of a host region that is re-resolved every time the
//! owning task executes. This is what makes iterative topologies work: a host
//! task may resize a [`HostBuffer`] between iterations and the next transfer
//! will pick up the new extent.

use std::fmt;
use std::sync::{Arc, Mutex};

/// A scalar type that can live in simulated device memory.
///
/// Device memory is a flat byte array; values cross the host/device boundary
/// in little-endian byte order. Implemented for the fixed-width integer and
/// float primitives.
pub trait DeviceScalar: Copy + Send + Sync + 'static {
    /// Size of the encoded value in bytes.
    const BYTES: usize;
    fn store_le(self, dst: &mut [u8]);
    fn load_le(src: &[u8]) -> Self;
}

macro_rules! impl_device_scalar {
    ($($ty:ty),*) => {$(
        impl DeviceScalar for $ty {
            const BYTES: usize = std::mem::size_of::<$ty>();
            fn store_le(self, dst: &mut [u8]) {
                dst[..Self::BYTES].copy_from_slice(&self.to_le_bytes());
            }
            fn load_le(src: &[u8]) -> Self {
                let mut raw = [0u8; Self::BYTES];
                raw.copy_from_slice(&src[..Self::BYTES]);
                <$ty>::from_le_bytes(raw)
            }
        }
    )*};
}

impl_device_scalar!(u8, i8, u16, i16, u32, i32, u64, i64, f32, f64);

/// Shape of a resolved host span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanInfo {
    /// Number of elements.
    pub len: usize,
    /// Size of one element in bytes.
    pub elem_size: usize,
}

impl SpanInfo {
    pub fn byte_len(&self) -> usize {
        self.len * self.elem_size
    }
}

/// Error produced while resolving or copying a span.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct SpanError(pub String);

/// A deferred view of host memory.
///
/// `resolve` reports the current shape; `read_bytes`/`write_bytes` copy the
/// region as little-endian bytes. Each call observes the state of the
/// underlying storage at that moment, so resolution must happen when the
/// owning task runs, never when the graph is built.
pub trait SpanResolve: Send + Sync {
    fn resolve(&self) -> Result<SpanInfo, SpanError>;
    fn read_bytes(&self) -> Result<Vec<u8>, SpanError>;
    fn write_bytes(&self, bytes: &[u8]) -> Result<(), SpanError>;
}

/// Shared handle to a [`SpanResolve`] implementation.
#[derive(Clone)]
pub struct SpanSpec {
    inner: Arc<dyn SpanResolve>,
}

impl SpanSpec {
    pub fn new(resolver: impl SpanResolve + 'static) -> Self {
        SpanSpec { inner: Arc::new(resolver) }
    }

    pub fn resolve(&self) -> Result<SpanInfo, SpanError> {
        self.inner.resolve()
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>, SpanError> {
        self.inner.read_bytes()
    }

    pub fn write_bytes(&self, bytes: &[u8]) -> Result<(), SpanError> {
        self.inner.write_bytes(bytes)
    }
}

impl fmt::Debug for SpanSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.resolve() {
            Ok(info) => write!(f, "SpanSpec({} x {} bytes)", info.len, info.elem_size),
            Err(_) => write!(f, "SpanSpec(<unresolvable>)"),
        }
    }
}

/// A growable, shared host vector that transfer tasks can read and write.
///
/// Cloning is shallow; all clones see the same storage. Access goes through a
/// mutex because host tasks, transfer processing, and verification code may
/// touch the buffer from different worker threads.
pub struct HostBuffer<T: DeviceScalar> {
    data: Arc<Mutex<Vec<T>>>,
}

impl<T: DeviceScalar> Clone for HostBuffer<T> {
    fn clone(&self) -> Self {
        HostBuffer { data: Arc::clone(&self.data) }
    }
}

impl<T: DeviceScalar> Default for HostBuffer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: DeviceScalar> HostBuffer<T> {
    pub fn new() -> Self {
        HostBuffer { data: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        HostBuffer { data: Arc::new(Mutex::new(values)) }
    }

    pub fn filled(len: usize, value: T) -> Self {
        Self::from_vec(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    /// Grows or shrinks the buffer. Growing appends copies of `value` and
    /// leaves existing elements untouched.
    pub fn resize(&self, len: usize, value: T) {
        self.lock().resize(len, value);
    }

    /// Runs `f` with exclusive access to the underlying vector.
    pub fn update<R>(&self, f: impl FnOnce(&mut Vec<T>) -> R) -> R {
        f(&mut self.lock())
    }

    /// Runs `f` with shared read access to the underlying vector.
    pub fn read<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.lock())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.lock().clone()
    }

    /// A span covering the whole buffer, re-resolved on every use.
    pub fn span(&self) -> SpanSpec {
        SpanSpec::new(self.clone())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<T>> {
        // A poisoned buffer only means some host task panicked mid-update;
        // the data is still structurally sound for our purposes.
        self.data.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl<T: DeviceScalar> SpanResolve for HostBuffer<T> {
    fn resolve(&self) -> Result<SpanInfo, SpanError> {
        Ok(SpanInfo { len: self.len(), elem_size: T::BYTES })
    }

    fn read_bytes(&self) -> Result<Vec<u8>, SpanError> {
        let data = self.lock();
        let mut out = vec![0u8; data.len() * T::BYTES];
        for (i, v) in data.iter().enumerate() {
            v.store_le(&mut out[i * T::BYTES..]);
        }
        Ok(out)
    }

    fn write_bytes(&self, bytes: &[u8]) -> Result<(), SpanError> {
        let mut data = self.lock();
        let expected = data.len() * T::BYTES;
        if bytes.len() != expected {
            return Err(SpanError(format!(
                "span is {expected} bytes but {} bytes were written",
                bytes.len()
            )));
        }
        for (i, v) in data.iter_mut().enumerate() {
            *v = T::load_le(&bytes[i * T::BYTES..]);
        }
        Ok(())
    }
}

impl<T: DeviceScalar> From<&HostBuffer<T>> for SpanSpec {
    fn from(buf: &HostBuffer<T>) -> Self {
        buf.span()
    }
}

impl<T: DeviceScalar> From<HostBuffer<T>> for SpanSpec {
    fn from(buf: HostBuffer<T>) -> Self {
        buf.span()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalars_round_trip_through_le_bytes() {
        let mut raw = [0u8; 8];
        (-7i32).store_le(&mut raw);
        assert_eq!(i32::load_le(&raw), -7);
        3.5f64.store_le(&mut raw);
        assert_eq!(f64::load_le(&raw), 3.5);
        0xABCDu16.store_le(&mut raw);
        assert_eq!(raw[0], 0xCD);
        assert_eq!(raw[1], 0xAB);
    }

    #[test]
    fn span_resolves_current_state_not_construction_state() {
        let buf = HostBuffer::<i32>::new();
        let span = buf.span();
        assert_eq!(span.resolve().unwrap(), SpanInfo { len: 0, elem_size: 4 });

        buf.resize(3, 9);
        assert_eq!(span.resolve().unwrap(), SpanInfo { len: 3, elem_size: 4 });
        assert_eq!(span.read_bytes().unwrap().len(), 12);
    }

    #[test]
    fn resize_grows_without_touching_existing_elements() {
        let buf = HostBuffer::from_vec(vec![5i64, 6]);
        buf.resize(4, 0);
        assert_eq!(buf.to_vec(), vec![5, 6, 0, 0]);
        buf.resize(1, 0);
        assert_eq!(buf.to_vec(), vec![5]);
    }

    #[test]
    fn write_bytes_rejects_length_mismatch() {
        let buf = HostBuffer::from_vec(vec![1u32, 2]);
        let span = buf.span();
        assert!(span.write_bytes(&[0u8; 4]).is_err());
        assert!(span.write_bytes(&[0u8; 8]).is_ok());
        assert_eq!(buf.to_vec(), vec![0, 0]);
    }

    #[test]
    fn read_and_write_round_trip() {
        let buf = HostBuffer::from_vec(vec![1i16, -2, 3]);
        let bytes = buf.span().read_bytes().unwrap();
        let other = HostBuffer::filled(3, 0i16);
        other.span().write_bytes(&bytes).unwrap();
        assert_eq!(other.to_vec(), vec![1, -2, 3]);
    }
}
