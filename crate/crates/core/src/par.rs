//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out on
//! the rayon pool; without it every mode runs sequentially. Results are
//! always returned in index order, and reductions are folded in fixed-size
//! index chunks, so outputs do not depend on the thread count.

/// How a data-parallel loop is executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Sequential` for one job, `Parallel` otherwise.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `f(0), f(1), …, f(n-1)` collected in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Like [`Exec::map`] but stops at the first error (lowest index wins).
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Folds `0..n` in consecutive chunks of `chunk` indices. Each chunk is
    /// folded sequentially from `init()`, then chunk results are combined
    /// left to right with `combine`.
    pub fn chunked_fold<A, Fold, Comb>(
        self,
        n: usize,
        chunk: usize,
        init: impl Fn() -> A + Sync + Send,
        fold: Fold,
        combine: Comb,
    ) -> Option<A>
    where
        A: Send,
        Fold: Fn(A, usize) -> A + Sync + Send,
        Comb: Fn(A, A) -> A,
    {
        let chunk = chunk.max(1);
        let n_chunks = n.div_ceil(chunk);
        let partials = self.map(n_chunks, |c| {
            let start = c * chunk;
            (start..(start + chunk).min(n)).fold(init(), &fold)
        });
        partials.into_iter().reduce(combine)
    }
}
