//! Runtime multiply-accumulate instrumentation.
//!
//! Forward passes of matmul, conv2d, and deconv2d add their nominal MAC
//! count (padding taps included) to a per-thread counter.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the MACs it performed on this thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = COUNTER.with(Cell::get);
    let r = f();
    let after = COUNTER.with(Cell::get);
    (r, after - before)
}
