//! Instrumented multiply counter.
//!
//! Contraction kernels (matrix products and attention dot products) report
//! the number of scalar multiplications they executed to a thread-local
//! counter while counting is enabled. Elementwise work (scaling, softmax,
//! normalization) is not counted.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Enables counting on this thread and zeroes the counter.
pub fn start() {
    ENABLED.with(|e| e.set(true));
    COUNT.with(|c| c.set(0));
}

/// Disables counting and returns the multiplies recorded since [`start`].
pub fn stop() -> u64 {
    ENABLED.with(|e| e.set(false));
    COUNT.with(|c| c.replace(0))
}

pub(crate) fn add(n: u64) {
    if ENABLED.with(|e| e.get()) {
        COUNT.with(|c| c.set(c.get() + n));
    }
}
