//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled, [`Exec::Parallel`] fans work out on
//! the rayon pool. Without the feature every mode runs sequentially. Results
//! are always returned in input order so reports stay deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `0..len`, preserving order.
pub fn map_indexed<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<S, T, F>(exec: Exec, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Send + Sync,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}
