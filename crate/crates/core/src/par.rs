//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) [`Parallelism::Parallel`] fans out
//! over the rayon global pool; without it every mode runs sequentially.
//! Results always come back in input order, so reductions over them are
//! deterministic regardless of thread count.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether this build can actually run work in parallel.
    pub const fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `f(i, &items[i])` for every item, in input order.
pub fn map_indexed<I, R, F>(mode: Parallelism, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}
