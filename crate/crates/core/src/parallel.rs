//! Scheduling-independent data parallelism over Monte Carlo paths.
//!
//! Every helper here produces results that do not depend on the number of
//! worker threads: per-path outputs land in fixed slots, and reductions are
//! performed over fixed-size blocks combined in index order.

use std::ops::Range;

/// Block size of deterministic reductions.
pub const BLOCK: usize = 1024;

/// Calls `f(path, slot)` for every `stride`-sized slot of `data`.
pub fn for_each_slot<T, F>(data: &mut [T], stride: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if stride == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(stride).enumerate().for_each(|(i, s)| f(i, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(stride).enumerate().for_each(|(i, s)| f(i, s));
    }
}

/// Like [`for_each_slot`] but stops at the first error (by path order among
/// the failures observed).
pub fn try_for_each_slot<T, E, F>(data: &mut [T], stride: usize, f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut [T]) -> Result<(), E> + Sync + Send,
{
    if stride == 0 {
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let errors: Vec<(usize, E)> = data
            .par_chunks_mut(stride)
            .enumerate()
            .filter_map(|(i, s)| f(i, s).err().map(|e| (i, e)))
            .collect();
        match errors.into_iter().min_by_key(|(i, _)| *i) {
            Some((_, e)) => Err(e),
            None => Ok(()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, s) in data.chunks_mut(stride).enumerate() {
            f(i, s)?;
        }
        Ok(())
    }
}

/// `(0..n).map(f)` evaluated in parallel, collected in order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f` to consecutive blocks of `0..n` of size [`BLOCK`] and returns
/// the per-block results in block order.
pub fn map_blocks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let blocks = n.div_ceil(BLOCK);
    map(blocks, |b| f(b * BLOCK..((b + 1) * BLOCK).min(n)))
}

/// Deterministic blocked sum of equally sized vectors: `f` fills a
/// zero-initialised accumulator for a block of indices.
pub fn sum_blocks<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
{
    let parts = map_blocks(n, |r| {
        let mut acc = vec![0.0; len];
        f(r, &mut acc);
        acc
    });
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_sum_covers_every_index_once() {
        let n = 3 * BLOCK + 17;
        let s = sum_blocks(n, 2, |r, acc| {
            for i in r {
                acc[0] += 1.0;
                acc[1] += i as f64;
            }
        });
        assert_eq!(s[0], n as f64);
        assert_eq!(s[1], (n * (n - 1) / 2) as f64);
    }

    #[test]
    fn slots_are_indexed_by_path() {
        let mut data = vec![0usize; 12];
        for_each_slot(&mut data, 3, |i, s| s.iter_mut().for_each(|v| *v = i));
        assert_eq!(data, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        let r: Result<(), usize> = try_for_each_slot(&mut data, 3, |i, _| if i >= 2 { Err(i) } else { Ok(()) });
        assert_eq!(r, Err(2));
    }
}
