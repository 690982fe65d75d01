//! Instrumented multiply-accumulate counter.
//!
//! Forward kernels (`matmul`, attention) report the MACs they execute to a
//! thread-local counter. Backward kernels are not counted.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn record(macs: usize) {
    MACS.with(|c| c.set(c.get() + macs as u64));
}

/// Runs `f` and returns its result together with the MACs it executed on
/// this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = MACS.with(Cell::get);
    let out = f();
    let after = MACS.with(Cell::get);
    (out, after - before)
}
