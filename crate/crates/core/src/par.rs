//! Data-parallel helpers. Without the `parallel` feature everything runs on
//! the calling thread; results are identical either way.

use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Order-preserving map.
pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Minimum of `f(i)` over `0..n` under a total order `cmp`; `None` entries are
/// skipped. Ties must not exist under `cmp` for the result to be unique.
pub fn min_over<R, F, C>(par: Parallelism, n: u64, f: F, cmp: C) -> Option<R>
where
    R: Send,
    F: Fn(u64) -> Option<R> + Sync + Send,
    C: Fn(&R, &R) -> Ordering + Sync + Send,
{
    let pick = |a: Option<R>, b: Option<R>| match (a, b) {
        (Some(a), Some(b)) => Some(if cmp(&b, &a) == Ordering::Less { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    };
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).reduce(|| None, pick);
    }
    let _ = par;
    (0..n).map(f).fold(None, pick)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map(Parallelism::Sequential, &items, |x| x * x);
        let par = map(Parallelism::Parallel, &items, |x| x * x);
        assert_eq!(seq, par);
        let f = |i: u64| (i % 7 != 0).then_some((i * 37) % 101);
        let a = min_over(Parallelism::Sequential, 500, f, |a, b| a.cmp(b));
        let b = min_over(Parallelism::Parallel, 500, f, |a, b| a.cmp(b));
        assert_eq!(a, b);
        assert_eq!(min_over(Parallelism::Parallel, 0, f, |a, b| a.cmp(b)), None);
    }
}
