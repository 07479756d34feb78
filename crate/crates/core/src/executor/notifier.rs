//! Epoch-based sleep/wake primitive for idle workers.
//!
//! A worker that decides to park first captures the current epoch, re-checks
//! for work, and only then sleeps — any wake-up between the capture and the
//! sleep bumps the epoch, so the sleep returns immediately and no wake-up can
//! be lost. A periodic timeout re-check backstops liveness regardless.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

const PARK_RECHECK: Duration = Duration::from_millis(50);

pub(crate) struct Notifier {
    epoch: Mutex<u64>,
    wake: Condvar,
}

impl Notifier {
    pub(crate) fn new() -> Self {
        Notifier { epoch: Mutex::new(0), wake: Condvar::new() }
    }

    /// Current epoch, to be captured before the caller's final work re-check.
    pub(crate) fn epoch(&self) -> u64 {
        *self.lock()
    }

    /// Sleeps until the epoch moves past `seen` or the re-check interval
    /// elapses. Returns immediately if the epoch already moved.
    pub(crate) fn park(&self, seen: u64) {
        let mut epoch = self.lock();
        while *epoch == seen {
            let (guard, timeout) = self
                .wake
                .wait_timeout(epoch, PARK_RECHECK)
                .unwrap_or_else(|e| e.into_inner());
            epoch = guard;
            if timeout.timed_out() {
                return;
            }
        }
    }

    /// Bumps the epoch and wakes one parked worker (if any).
    pub(crate) fn notify_one(&self) {
        *self.lock() += 1;
        self.wake.notify_one();
    }

    /// Bumps the epoch and wakes every parked worker.
    pub(crate) fn notify_all(&self) {
        *self.lock() += 1;
        self.wake.notify_all();
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, u64> {
        self.epoch.lock().unwrap_or_else(|e| e.into_inner())
    }
}
