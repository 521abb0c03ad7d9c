//! Data-parallel iteration with a sequential fallback.
//!
//! With the `parallel` feature (default) the hot loops — per-round client
//! training and test-set evaluation — fan out over rayon. Without it they run
//! sequentially with identical results: work items are independent, every
//! seed is derived functionally, and outputs are collected in input order, so
//! float summation order downstream is the same either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_vec<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

/// Maps `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_vec<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential variant; the benchmark baseline.
pub fn map_vec_seq<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sums `count(item)` over `items` in parallel. Integer sum, so the
/// reduction order cannot change the result.
#[cfg(feature = "parallel")]
pub fn count_matching<T, F>(items: &[T], count: F) -> usize
where
    T: Sync,
    F: Fn(&T) -> usize + Sync + Send,
{
    items.par_iter().map(count).sum()
}

/// Sums `count(item)` over `items` sequentially.
#[cfg(not(feature = "parallel"))]
pub fn count_matching<T, F>(items: &[T], count: F) -> usize
where
    F: Fn(&T) -> usize,
{
    items.iter().map(count).sum()
}
