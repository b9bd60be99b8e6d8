//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon when the
//! caller asks for it; otherwise they run in order on the calling thread.
//! Results are always returned in input order, so any reduction done by the
//! caller is independent of the thread schedule.

pub fn map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// True when this build can actually run work in parallel.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_preserved() {
        let v: Vec<usize> = (0..1000).collect();
        let a = super::map(&v, true, |x| x * 2);
        let b = super::map(&v, false, |x| x * 2);
        assert_eq!(a, b);
        assert_eq!(super::map_range(5, true, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
