//! Runtime selection between sequential and data-parallel execution.
//!
//! Every parallel code path in this crate maps an ordered set of independent
//! work items and combines the results in index order, so the two modes are
//! bitwise-identical; `Parallel` only changes wall-clock time. The parallel
//! backend (rayon) sits behind the `parallel` cargo feature, which is on by
//! default; builds with `--no-default-features` compile the sequential path
//! only.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    /// Parallel when the feature is compiled in, sequential otherwise.
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    /// Maps `f` over `items`, preserving order in the output.
    pub fn map<T, U, F>(self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        match self {
            ExecMode::Sequential => items.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => items.into_par_iter().map(f).collect(),
        }
    }

    /// Maps `f` over mutable references, preserving order in the output.
    pub fn map_mut<T, U, F>(self, items: &mut [T], f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(&mut T) -> U + Sync + Send,
    {
        match self {
            ExecMode::Sequential => items.iter_mut().map(f).collect(),
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => items.par_iter_mut().map(f).collect(),
        }
    }
}
