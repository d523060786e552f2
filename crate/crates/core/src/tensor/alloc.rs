//! Per-thread accounting of tensor buffer allocations.
//!
//! Every [`Buffer`] records its element count on creation and on drop, so a
//! [`track`] scope can report the peak number of live elements and the
//! largest single buffer allocated while it ran.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

#[derive(Clone, Copy, Debug, Default)]
struct Counters {
    live: usize,
    peak: usize,
    largest: usize,
}

thread_local! {
    static COUNTERS: Cell<Counters> = const { Cell::new(Counters { live: 0, peak: 0, largest: 0 }) };
}

fn on_alloc(n: usize) {
    COUNTERS.with(|c| {
        let mut s = c.get();
        s.live += n;
        s.peak = s.peak.max(s.live);
        s.largest = s.largest.max(n);
        c.set(s);
    });
}

fn on_free(n: usize) {
    COUNTERS.with(|c| {
        let mut s = c.get();
        s.live = s.live.saturating_sub(n);
        c.set(s);
    });
}

/// Elements currently held by live buffers on this thread.
pub fn live_elements() -> usize {
    COUNTERS.with(|c| c.get().live)
}

/// Allocation statistics for one [`track`] scope, in scalar elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AllocReport {
    /// Peak of live elements above the level at scope entry.
    pub peak_elements: usize,
    /// Largest single buffer allocated inside the scope.
    pub largest_buffer: usize,
}

/// Runs `f` and reports the buffer traffic it caused on the current thread.
pub fn track<R>(f: impl FnOnce() -> R) -> (R, AllocReport) {
    let outer = COUNTERS.with(|c| c.get());
    let baseline = outer.live;
    COUNTERS.with(|c| {
        c.set(Counters {
            live: baseline,
            peak: baseline,
            largest: 0,
        })
    });
    let out = f();
    let inner = COUNTERS.with(|c| c.get());
    COUNTERS.with(|c| {
        c.set(Counters {
            live: inner.live,
            peak: outer.peak.max(inner.peak),
            largest: outer.largest.max(inner.largest),
        })
    });
    (
        out,
        AllocReport {
            peak_elements: inner.peak - baseline,
            largest_buffer: inner.largest,
        },
    )
}

/// Owned scalar storage that participates in allocation accounting.
#[derive(Debug, PartialEq)]
pub struct Buffer<T>(Vec<T>);

impl<T> Buffer<T> {
    pub fn from_vec(v: Vec<T>) -> Self {
        on_alloc(v.len());
        Buffer(v)
    }

    pub fn into_vec(mut self) -> Vec<T> {
        let v = std::mem::take(&mut self.0);
        on_free(v.len());
        std::mem::forget(self);
        v
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.0.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        on_free(self.0.len());
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}
