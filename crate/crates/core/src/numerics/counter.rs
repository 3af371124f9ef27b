//! Thread-local scalar-operation counter used to measure the asymptotic cost
//! of the structured kernels. Counting is per thread, so concurrent tests do
//! not interfere with each other.

use std::cell::Cell;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    OPS.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn reset() {
    OPS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    OPS.with(Cell::get)
}

/// Run `f` and return its result together with the number of counted
/// operations it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let r = f();
    (r, read().wrapping_sub(before))
}
