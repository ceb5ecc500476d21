//! Data-parallel mapping with a sequential fallback.
//!
//! All corpus-level loops funnel through [`map_indexed`]: each index is
//! computed independently and collected in index order, so reductions over the
//! result are performed sequentially by the caller and the outcome is
//! bit-identical whether the work ran on one thread or many. Built without the
//! `parallel` feature the same API degrades to a plain sequential loop.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    map_indexed_sequential(n, f)
}

/// Sequential reference path, kept available for benchmarks regardless of the
/// `parallel` feature.
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
