//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) the [`Exec::Parallel`] mode runs on
//! the rayon global pool. Without it every mode runs sequentially. Both paths
//! produce bit-identical results: work is split into independent items and
//! reductions always happen in item order.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many multiply-adds is never split across threads.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<I, R, F>(self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of
    /// `out`. `work` is the approximate total cost; small jobs stay on the
    /// calling thread.
    pub fn chunks_mut<T, F>(self, out: &mut [T], chunk: usize, work: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() && work >= MIN_PARALLEL_WORK {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        let _ = work;
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let a = Exec::Sequential.map(&items, |x| x * x + 1);
        let b = Exec::Parallel.map(&items, |x| x * x + 1);
        assert_eq!(a, b);

        let mut x = vec![0u64; 4096];
        let mut y = vec![0u64; 4096];
        Exec::Sequential.chunks_mut(&mut x, 64, usize::MAX, |i, c| c.fill(i as u64));
        Exec::Parallel.chunks_mut(&mut y, 64, usize::MAX, |i, c| c.fill(i as u64));
        assert_eq!(x, y);
    }
}
