//! Time sources.

use core::sync::atomic::{AtomicU64, Ordering};

use crate::prelude::*;

pub trait Clock: Send + Sync {
    /// RFC 3339 timestamp.
    fn now(&self) -> String;

    /// Milliseconds on a monotone scale, used for per-section wall-clock.
    fn millis(&self) -> u64;
}

/// A clock frozen at one instant. Replayed runs use it so that every
/// timestamp in the output is reproducible.
#[derive(Debug, Clone)]
pub struct FixedClock {
    at: String,
}

impl FixedClock {
    pub const DEFAULT_INSTANT: &'static str = "2025-01-01T00:00:00Z";

    pub fn new(at: impl Into<String>) -> Self {
        FixedClock { at: at.into() }
    }
}

impl Default for FixedClock {
    fn default() -> Self {
        FixedClock::new(Self::DEFAULT_INSTANT)
    }
}

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.at.clone()
    }

    fn millis(&self) -> u64 {
        0
    }
}

/// Advances by one second per reading; handy in tests that need ordering.
#[derive(Debug, Default)]
pub struct TickingClock {
    ticks: AtomicU64,
}

impl Clock for TickingClock {
    fn now(&self) -> String {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        let (h, rest) = (t / 3600, t % 3600);
        format!("2025-01-01T{:02}:{:02}:{:02}Z", h % 24, rest / 60, rest % 60)
    }

    fn millis(&self) -> u64 {
        self.ticks.load(Ordering::SeqCst) * 1000
    }
}
