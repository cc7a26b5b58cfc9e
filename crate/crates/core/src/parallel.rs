//! Deterministic chunked map. Chunks may run on any worker; results come back
//! in chunk-index order so reductions are scheduling-independent.

use crate::rng::CHUNK_SIZE;

/// Splits `total` items into `(chunk index, start, len)` triples.
pub fn chunks(total: usize) -> Vec<(u64, usize, usize)> {
    (0..total.div_ceil(CHUNK_SIZE))
        .map(|i| {
            let start = i * CHUNK_SIZE;
            (i as u64, start, CHUNK_SIZE.min(total - start))
        })
        .collect()
}

/// Applies `f` to every index in `0..n`, returning results in index order.
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
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f(chunk, start, len)` over the chunk decomposition of `total`.
pub fn map_chunks<T, F>(total: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, usize, usize) -> T + Sync + Send,
{
    let parts = chunks(total);
    map_indexed(parts.len(), |i| {
        let (c, s, l) = parts[i];
        f(c, s, l)
    })
}
