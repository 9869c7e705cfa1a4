//! Data-parallel building blocks with a sequential fallback.
//!
//! Every helper here produces bit-identical output regardless of
//! [`Parallelism`] mode or thread count: work is split into fixed-size
//! chunks, per-chunk results are collected in index order, and reductions
//! combine chunk results in a fixed pairwise tree.

use std::ops::Range;

/// Chunk size for map-reduce assembly over tuples.
pub const CHUNK: usize = 1024;

/// How data-parallel loops are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Parallelism::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        self != Parallelism::Sequential
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_collect<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Like [`map_collect`] but fallible; the error of the lowest failing index wins.
pub fn try_map_collect<T, E, F>(n: usize, par: Parallelism, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_collect(n, par, f).into_iter().collect()
}

/// Splits `0..n` into consecutive ranges of at most `chunk` items.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Map each chunk of `0..n` to a partial result, then combine the partials in a
/// fixed pairwise tree. Returns `None` when `n == 0`.
pub fn chunked_reduce<T, M, C>(n: usize, chunk: usize, par: Parallelism, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let ranges = chunk_ranges(n, chunk);
    let partials = map_collect(ranges.len(), par, |c| map(ranges[c].clone()));
    pairwise(partials, combine)
}

/// Pairwise (tree) reduction in a fixed order.
pub fn pairwise<T, C>(mut items: Vec<T>, combine: C) -> Option<T>
where
    C: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges_cover_exactly() {
        let r = chunk_ranges(2500, 1024);
        assert_eq!(r, vec![0..1024, 1024..2048, 2048..2500]);
        assert!(chunk_ranges(0, 8).is_empty());
    }

    #[test]
    fn reduce_is_mode_independent() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i as f64) * 0.37).sin() * 1e-3 + 1.0).collect();
        let run = |par| {
            chunked_reduce(xs.len(), 333, par, |r| xs[r].iter().sum::<f64>(), |a, b| a + b).unwrap()
        };
        let seq = run(Parallelism::Sequential);
        assert_eq!(seq.to_bits(), run(Parallelism::default()).to_bits());
    }

    #[test]
    fn try_map_reports_first_error() {
        let out: Result<Vec<usize>, usize> =
            try_map_collect(100, Parallelism::default(), |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(out, Err(3));
    }
}
