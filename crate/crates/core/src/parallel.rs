//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it the same closures run in order on the calling thread. Both
//! paths produce identical results: reductions always combine a fixed set
//! of chunks in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of chunks used by [`chunked_reduce`].
pub const REDUCE_CHUNKS: usize = 16;

/// Execution strategy for [`map_indexed_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Exec {
    pub const DEFAULT: Exec = if cfg!(feature = "parallel") { Exec::Parallel } else { Exec::Sequential };
}

/// `(0..n).map(f).collect()`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_with(Exec::DEFAULT, n, f)
}

pub fn map_indexed_with<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Folds `0..n` into per-chunk accumulators and merges them in chunk order.
pub fn chunked_reduce<A, I, F, M>(n: usize, init: I, fold: F, mut merge: M) -> Option<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: FnMut(&mut A, A),
{
    if n == 0 {
        return None;
    }
    let chunks = REDUCE_CHUNKS.min(n);
    let size = n.div_ceil(chunks);
    let partials = map_indexed(chunks, |c| {
        let mut acc = init();
        for i in c * size..((c + 1) * size).min(n) {
            fold(&mut acc, i);
        }
        acc
    });
    let mut it = partials.into_iter();
    let mut total = it.next()?;
    for p in it {
        merge(&mut total, p);
    }
    Some(total)
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
