//! Data-parallel execution helpers with a sequential fallback.
//!
//! Every batch-level loop in the crate (corpus generation, feature
//! extraction, per-sample gradient work) goes through [`Execution::map`].
//! With the `parallel` feature (default) `Execution::Parallel` fans the
//! closure out over rayon; without it, or with `Execution::Sequential`,
//! the loop runs in index order on the calling thread. Results are always
//! collected in input order, so the two paths are bit-identical and the
//! choice is purely a throughput knob.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for embarrassingly parallel batch loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Use the rayon thread pool when the `parallel` feature is enabled;
    /// otherwise behaves like `Sequential`.
    #[default]
    Parallel,
    /// Run on the calling thread in index order.
    Sequential,
}

impl Execution {
    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => (0..n).map(f).collect(),
            Execution::Sequential => (0..n).map(f).collect(),
        }
    }

    /// Map `f` over a slice, collecting results in input order.
    pub fn map_slice<'a, I, T, F>(self, items: &'a [I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&'a I) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| (x.sin() * 1e6).round();
        let a = Execution::Parallel.map_slice(&xs, f);
        let b = Execution::Sequential.map_slice(&xs, f);
        assert_eq!(a, b);
    }

    #[test]
    fn preserves_input_order() {
        let got = Execution::Parallel.map(64, |i| i * i);
        let want: Vec<usize> = (0..64).map(|i| i * i).collect();
        assert_eq!(got, want);
    }
}
