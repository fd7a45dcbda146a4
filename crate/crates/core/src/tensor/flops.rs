//! Thread-local FLOP counter.
//!
//! Counting convention: 2 per multiply-add in a matrix product, 1 per element
//! for elementwise ops (bias add, scale, ReLU). The benchmark's closed-form
//! models use the same convention, so instrumented counts can be compared
//! exactly.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    COUNTER.with(Cell::get)
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the FLOPs it recorded.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
