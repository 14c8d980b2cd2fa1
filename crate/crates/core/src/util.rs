//! Small shared helpers: the parallel/sequential map used by per-utterance
//! batch operations.
//!
//! With the `parallel` feature (default) [`par_map`] fans work out over a
//! rayon pool; without it the same call degrades to sequential iteration.
//! [`seq_map`] is always sequential and exists so benchmarks (and the
//! deterministic single-worker training path) can pin one code path
//! explicitly. Both return results in input order, so reductions downstream
//! stay deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential map with the same signature as [`par_map`].
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
