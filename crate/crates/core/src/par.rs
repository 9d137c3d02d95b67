//! Row-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon's current pool;
//! without it they run on the calling thread. Work partitions never depend on
//! the thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Upper bound on the number of partial accumulators in a reduction.
pub const MAX_REDUCE_CHUNKS: usize = 16;

/// Calls `f(row, row_slice)` for every `row_len`-sized row of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
}

/// Like [`for_each_row`] with per-worker state from `init`.
pub fn for_each_row_init<T, S, I, F>(data: &mut [T], row_len: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each_init(init, |s, (y, row)| f(s, y, row));
    #[cfg(not(feature = "parallel"))]
    {
        let mut s = init();
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(&mut s, y, row));
    }
}

/// Like [`for_each_row`] over two buffers with the same row count.
pub fn for_each_row2<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    debug_assert_eq!(a.len() / a_len, b.len() / b_len);
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_len)
        .zip(b.par_chunks_mut(b_len))
        .enumerate()
        .for_each(|(y, (ra, rb))| f(y, ra, rb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(y, (ra, rb))| f(y, ra, rb));
}

/// Splits `0..n` into at most `max_chunks` contiguous ranges of near-equal size.
pub fn partition(n: usize, max_chunks: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = max_chunks.clamp(1, n);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Evaluates `f` on each range of `partition(n, max_chunks)` and returns the
/// results in range order.
pub fn map_ranges<R, F>(n: usize, max_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let ranges = partition(n, max_chunks);
    #[cfg(feature = "parallel")]
    return ranges.into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return ranges.into_iter().map(f).collect();
}

/// Applies `f` to each element index in parallel, writing into `out`.
pub fn for_each_index<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    #[cfg(not(feature = "parallel"))]
    out.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
}

/// Number of worker threads the helpers will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Runs `f` inside a pool of `threads` workers (sequentially without the
/// `parallel` feature).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
