//! Thin wrappers around the data-parallel inner loops.
//!
//! With the default `parallel` feature these fan out over rayon; without it
//! they run sequentially with identical results. Every call site is a pure
//! per-item map, so thread count never changes an output byte.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub(crate) fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `buf`.
pub(crate) fn for_each_row<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert_eq!(buf.len() % row_len, 0);
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
    }
}
