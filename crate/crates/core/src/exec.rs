//! Execution strategy for data-parallel loops.
//!
//! Every parallel map collects results in input order, and every reduction is
//! performed sequentially over those ordered results, so the strategy never
//! changes numerical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing. Falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Whether this strategy actually runs on a thread pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps fixed-size chunks in parallel and folds the per-chunk results in
    /// chunk order. Chunk boundaries depend only on `chunk`, never on the
    /// number of threads.
    pub fn chunked_reduce<T, R, F, G>(self, items: &[T], chunk: usize, map: F, fold: G) -> Option<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
        G: FnMut(R, R) -> R,
    {
        let chunk = chunk.max(1);
        let parts: Vec<R> = match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_chunks(chunk).map(map).collect(),
            _ => items.chunks(chunk).map(map).collect(),
        };
        let mut iter = parts.into_iter();
        let first = iter.next()?;
        Some(iter.fold(first, fold))
    }
}
