//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the map helpers fan out over the rayon
//! pool; without it they run sequentially. Both paths produce results in input
//! order and never reduce floats across threads, so output is identical for any
//! thread count.

/// Maps `source` through `op` and collects the results in input order.
pub fn map_collect<T, R, F>(source: &[T], op: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    actual::map_collect(source, op)
}

/// Maps `0..n` through `op` and collects the results in index order.
pub fn map_range<R, F>(n: usize, op: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    actual::map_range(n, op)
}

/// Always-sequential variants, kept public so benchmarks can compare both paths.
pub mod sequential {
    pub fn map_collect<T, R, F>(source: &[T], op: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        source.iter().map(op).collect()
    }

    pub fn map_range<R, F>(n: usize, op: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(op).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod parallel {
    use rayon::prelude::*;

    pub fn map_collect<T, R, F>(source: &[T], op: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        source.par_iter().map(op).collect()
    }

    pub fn map_range<R, F>(n: usize, op: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(op).collect()
    }
}

#[cfg(feature = "parallel")]
use parallel as actual;
#[cfg(not(feature = "parallel"))]
use sequential as actual;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| (x.sin() * 1e3).exp2();
        assert_eq!(map_collect(&xs, f), sequential::map_collect(&xs, f));
        assert_eq!(
            map_range(17, |i| i * i),
            sequential::map_range(17, |i| i * i)
        );
    }
}
