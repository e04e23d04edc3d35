//! Order-preserving data parallelism for independent per-item work.
//!
//! Results never depend on the thread count: every item is computed by the
//! same code in isolation and results come back in input order.

use std::num::NonZeroUsize;

/// Environment variable holding the worker count.
pub const THREADS_ENV: &str = "GRIDGRAPH_THREADS";

/// Worker count from `GRIDGRAPH_THREADS`, defaulting to 1.
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<NonZeroUsize>().ok())
        .map_or(1, NonZeroUsize::get)
}

/// `items.iter().map(f)` spread over up to `workers` scoped threads.
pub fn map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..103).collect();
        let serial = map(&items, 1, |x| x * x + 1);
        for w in [2, 3, 8, 500] {
            assert_eq!(map(&items, w, |x| x * x + 1), serial);
        }
        assert!(map(&[] as &[u8], 4, |&x| x).is_empty());
    }
}
