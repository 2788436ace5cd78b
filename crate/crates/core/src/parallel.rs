//! Rank-parallel execution helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper degrades to a plain sequential loop. The
//! `*_sequential` variants are always available so both paths can be
//! compared in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How rank work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Rayon pool when the `parallel` feature is enabled, sequential otherwise.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Run `f` once per element of `states`, passing the rank index.
    pub fn for_each_rank<S, T, F>(self, states: &mut [S], f: F) -> Vec<T>
    where
        S: Send,
        T: Send,
        F: Fn(usize, &mut S) -> T + Sync + Send,
    {
        match self {
            Execution::Parallel => for_each_rank(states, f),
            Execution::Sequential => for_each_rank_sequential(states, f),
        }
    }

    /// Map `f` over `0..n`.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Parallel => map_range(n, f),
            Execution::Sequential => (0..n).map(f).collect(),
        }
    }
}

#[cfg(feature = "parallel")]
pub fn for_each_rank<S, T, F>(states: &mut [S], f: F) -> Vec<T>
where
    S: Send,
    T: Send,
    F: Fn(usize, &mut S) -> T + Sync + Send,
{
    states.par_iter_mut().enumerate().map(|(rank, s)| f(rank, s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_rank<S, T, F>(states: &mut [S], f: F) -> Vec<T>
where
    S: Send,
    T: Send,
    F: Fn(usize, &mut S) -> T + Sync + Send,
{
    for_each_rank_sequential(states, f)
}

pub fn for_each_rank_sequential<S, T, F>(states: &mut [S], f: F) -> Vec<T>
where
    F: Fn(usize, &mut S) -> T,
{
    states.iter_mut().enumerate().map(|(rank, s)| f(rank, s)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let mut a = vec![1u64, 2, 3, 4, 5];
        let mut b = a.clone();
        let pa = Execution::Parallel.for_each_rank(&mut a, |r, s| {
            *s *= 10;
            r as u64 + *s
        });
        let pb = Execution::Sequential.for_each_rank(&mut b, |r, s| {
            *s *= 10;
            r as u64 + *s
        });
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert_eq!(
            Execution::Parallel.map_range(100, |i| i * i),
            Execution::Sequential.map_range(100, |i| i * i)
        );
    }
}
