//! Data-parallel helpers. With the `parallel` feature the work items run on
//! the rayon pool, otherwise sequentially; results are returned in item order
//! either way.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every index in `0..n`.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
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

pub fn try_map<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map(n, f).into_iter().collect()
}

/// Splits `0..n` into consecutive ranges of at most `chunk` items and calls
/// `f(start, len)` for each.
pub fn try_map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize, usize) -> Result<R> + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    try_map(count, |c| {
        let start = c * chunk;
        f(start, chunk.min(n - start))
    })
}

pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let parts = try_map_chunks(10, 4, |s, l| Ok((s, l))).unwrap();
        assert_eq!(parts, vec![(0, 4), (4, 4), (8, 2)]);
    }
}
