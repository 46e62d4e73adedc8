//! Time sources for the engine and the simulators.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

pub trait Clock: Send + Sync {
    /// Seconds since the clock's origin.
    fn now(&self) -> f64;
}

/// Simulated time in integer nanoseconds; advanced explicitly.
#[derive(Debug, Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nanos(&self) -> u64 {
        self.nanos.load(Ordering::SeqCst)
    }

    pub fn set_nanos(&self, t: u64) {
        self.nanos.store(t, Ordering::SeqCst);
    }

    pub fn advance_nanos(&self, dt: u64) {
        self.nanos.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        nanos_to_secs(self.nanos())
    }
}

/// Monotonic wall clock.
#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { origin: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

pub fn nanos_to_secs(n: u64) -> f64 {
    n as f64 * 1e-9
}

/// Nearest whole nanosecond; negative inputs map to zero.
pub fn secs_to_nanos(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}
