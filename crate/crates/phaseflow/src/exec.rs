//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions are evaluated over fixed-size chunks whose partial results are
//! combined in index order, so parallel and sequential runs produce
//! bit-identical floating-point results.

use serde::{Deserialize, Serialize};

/// Chunk length used by ordered reductions.
pub const CHUNK: usize = 1024;

/// Runtime selection of the execution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[cfg_attr(feature = "parallel", default)]
    Parallel,
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
}

impl ExecMode {
    /// Parallel execution is only available with the `parallel` feature; the
    /// request silently degrades to sequential otherwise.
    pub fn effective(self) -> ExecMode {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

/// Evaluates `f` on `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Ordered chunked reduction of `f` over `0..n`.
///
/// Each chunk is folded sequentially with `combine` starting from `zero`; the
/// chunk results are then folded in chunk order.
pub fn reduce_indexed<T, F, C>(mode: ExecMode, n: usize, zero: T, f: F, combine: C) -> T
where
    T: Send + Sync + Clone,
    F: Fn(usize) -> T + Sync + Send,
    C: Fn(T, T) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = map_indexed(mode, chunks, |c| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(n);
        (lo..hi).fold(zero.clone(), |acc, i| combine(acc, f(i)))
    });
    partial.into_iter().fold(zero, combine)
}

/// Ordered chunked sum.
pub fn sum_indexed<F>(mode: ExecMode, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce_indexed(mode, n, 0.0, f, |a, b| a + b)
}

/// Ordered chunked maximum; returns `0.0` for an empty range.
pub fn max_indexed<F>(mode: ExecMode, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce_indexed(mode, n, 0.0, f, f64::max)
}
