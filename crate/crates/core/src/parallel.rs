//! Intra-operation parallelism over batch items.
//!
//! Work is split into contiguous chunks whose boundaries depend only on the
//! item count and the configured thread count, so reductions combine
//! partial results in the same order on every run with the same setting.

use std::cell::Cell;
use std::ops::Range;

thread_local! {
    static THREADS: Cell<usize> = const { Cell::new(1) };
}

/// Sets the worker count used by operations issued from the calling thread.
pub fn set_threads(n: usize) {
    THREADS.with(|t| t.set(n.max(1)));
}

pub fn threads() -> usize {
    THREADS.with(|t| t.get())
}

/// Runs `f` over contiguous chunks of `0..n`, returning results in chunk order.
pub(crate) fn map_chunks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync,
{
    let t = threads().min(n).max(1);
    if t == 1 {
        return vec![f(0..n)];
    }
    let chunk = n.div_ceil(t);
    let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let f = &f;
                scope.spawn(move || f(r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
