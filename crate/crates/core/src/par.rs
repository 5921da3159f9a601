//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the [`Execution::Parallel`]
//! path runs on the rayon global pool. Without it, both variants run
//! sequentially. Outputs are always collected in input order, so results do
//! not depend on the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Applies `f` to consecutive `chunk`-sized row blocks of a row-major buffer
/// and concatenates the outputs in block order.
pub fn map_row_chunks<R, F>(
    exec: Execution,
    data: &[f64],
    row_len: usize,
    chunk: usize,
    f: F,
) -> Vec<R>
where
    R: Send,
    F: Fn(&[f64]) -> Vec<R> + Sync + Send,
{
    let step = row_len.max(1) * chunk.max(1);
    let blocks: Vec<Vec<R>> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => data.par_chunks(step).map(f).collect(),
        _ => data.chunks(step).map(f).collect(),
    };
    blocks.into_iter().flatten().collect()
}
