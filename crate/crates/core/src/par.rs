//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled these dispatch to rayon; without it
//! they are plain iterator loops. Both paths produce identical
//! results: every parallel task writes a disjoint output slot and no reduction
//! depends on scheduling order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work items below this size never pay for rayon dispatch.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference for [`map_indexed`].
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Calls `f(row_index, row)` for every `row_len`-wide chunk of `out`.
/// Goes parallel only when `work` (a flop estimate) clears [`MIN_PARALLEL_WORK`].
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= MIN_PARALLEL_WORK && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for_each_row_seq(out, row_len, f);
}

pub fn for_each_row_seq<T, F>(out: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    if row_len == 0 {
        return;
    }
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Runs `f` inside a pool capped at `threads` workers. Sequential builds
/// simply call `f`.
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

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential() {
        let a = map_indexed(1000, |i| (i * i) as u64 % 97);
        let b = map_indexed_seq(1000, |i| (i * i) as u64 % 97);
        assert_eq!(a, b);
    }

    #[test]
    fn rows_visit_in_place() {
        let mut buf = vec![0usize; 12];
        for_each_row(&mut buf, 3, usize::MAX, |r, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r * 10 + j;
            }
        });
        assert_eq!(buf[4], 11);
        assert_eq!(buf[11], 32);
    }
}
