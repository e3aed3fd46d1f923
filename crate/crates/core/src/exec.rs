//! Data-parallel execution helpers.
//!
//! Every parallel map in the crate goes through [`map_range`] or [`map_slice`].
//! Results are always collected in index order and reduced by the caller
//! sequentially, so outputs are bit-identical whichever [`Execution`] runs
//! them. Without the `parallel` feature, [`Execution::Parallel`] falls back
//! to the sequential path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run work on a thread pool.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<'a, S, T, F>(exec: Execution, items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Caps the global thread pool. Returns false if the pool was already built.
#[cfg(feature = "parallel")]
pub fn init_thread_pool(threads: Option<usize>) -> bool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    builder.build_global().is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn init_thread_pool(_threads: Option<usize>) -> bool {
    true
}
