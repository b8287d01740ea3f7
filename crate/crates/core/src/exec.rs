//! Data-parallel helpers. With the `parallel` feature (default) the indexed
//! maps run on rayon; without it they fall back to the sequential versions.
//! The sequential implementations are always compiled so benchmarks can
//! compare both paths in one build.

/// Sequential indexed map; the fallback implementation.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

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
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Indexed map on a bounded worker pool. Results come back in index order
/// regardless of scheduling; `workers == 1` or the sequential build run
/// strictly in order.
#[cfg(feature = "parallel")]
pub fn map_indexed_bounded<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 {
        return map_indexed_seq(n, f);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool");
    pool.install(|| {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    })
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed_bounded<T, F>(n: usize, _workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let a = map_indexed(100, |i| i * i);
        let b = map_indexed_seq(100, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn bounded_pool_preserves_index_order() {
        let a = map_indexed_bounded(64, 4, |i| i as u64 * 3);
        assert_eq!(a, (0..64).map(|i| i as u64 * 3).collect::<Vec<_>>());
    }
}
