//! Crate-local thread pool honoring the `ANROT_THREADS` environment variable.
//!
//! `ANROT_THREADS=0` forces sequential execution; unset or invalid values use
//! the rayon default. All parallel reductions in this crate accumulate in a
//! fixed order (per-item partials combined sequentially), so results are
//! bit-identical across thread counts.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();

/// Returns the shared pool, or `None` when sequential execution is requested.
pub fn pool() -> Option<&'static ThreadPool> {
    POOL.get_or_init(|| {
        let threads = std::env::var("ANROT_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok());
        match threads {
            Some(0) => None,
            Some(n) => Some(
                ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool construction cannot fail for n >= 1"),
            ),
            None => Some(
                ThreadPoolBuilder::new()
                    .build()
                    .expect("default thread pool construction cannot fail"),
            ),
        }
    })
    .as_ref()
}

/// Maps `f` over `0..n`, in parallel when a pool is available.
///
/// Results come back indexed, so downstream combination order is fixed.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match pool() {
        Some(pool) if n > 1 => pool.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(|i| f(i)).collect()
        }),
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
