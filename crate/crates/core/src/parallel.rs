//! Thin shims over rayon so every hot loop has a sequential twin.
//!
//! The `parallel` feature (on by default) routes these through rayon; without
//! it the same code paths run on one thread. Callers never mention rayon
//! directly, which keeps the fallback honest: disabling the feature compiles
//! the exact same kernels minus the thread pool.

/// Applies `f(chunk_index, chunk)` to consecutive disjoint chunks of `out`.
///
/// Chunks must not alias, which the slice split guarantees; this is the
/// pattern used for per-channel kernels writing one output row each.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n` and collects results in index order.
///
/// Used for per-sample forward/backward passes; the reduction over results
/// stays sequential so gradient sums are bit-identical across feature flags.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
