//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature, [`Execution::Parallel`] fans chunks out to the
//! rayon pool; otherwise it runs sequentially. Chunk boundaries never depend on
//! the thread count and results come back in input order, so reductions over
//! the returned vector are bitwise identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// `Sequential` when `deterministic_single_thread` is set.
    pub fn from_flag(deterministic_single_thread: bool) -> Self {
        if deterministic_single_thread {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Applies `f` to each `chunk`-sized slice of `items`, returning results in order.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items
                .par_chunks(chunk)
                .enumerate()
                .map(|(i, c)| f(i * chunk, c))
                .collect(),
            _ => items
                .chunks(chunk)
                .enumerate()
                .map(|(i, c)| f(i * chunk, c))
                .collect(),
        }
    }

    /// Applies `f` to each index in `0..n`, returning results in order.
    pub fn map_indices<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}
