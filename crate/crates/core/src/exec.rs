//! Data-parallel helpers with a sequential fallback.
//!
//! Every batch-shaped loop in the crate (episode fan-out, per-group
//! statistics, metric accumulation) goes through [`Execution::map`], so the
//! same call site runs on a rayon pool or on the calling thread. Without the
//! `parallel` feature both variants run sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Execution {
    Sequential,
    /// `threads = None` uses the global pool size.
    #[default]
    Parallel,
    Bounded {
        threads: usize,
    },
}

impl Execution {
    pub fn with_max_concurrency(max: Option<usize>) -> Self {
        match max {
            Some(1) => Execution::Sequential,
            Some(n) if n > 1 => Execution::Bounded { threads: n },
            _ => Execution::Parallel,
        }
    }

    /// Order-preserving map.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(feature = "parallel")]
            Execution::Bounded { threads } => {
                use rayon::prelude::*;
                match rayon::ThreadPoolBuilder::new()
                    .num_threads(*threads)
                    .build()
                {
                    Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
                    Err(e) => {
                        tracing::warn!("thread pool unavailable ({e}); running sequentially");
                        items.iter().map(f).collect()
                    }
                }
            }
            #[cfg(not(feature = "parallel"))]
            _ => items.iter().map(f).collect(),
        }
    }

    /// Map then fold with an associative merge.
    pub fn map_reduce<T, A, F, M>(&self, items: &[T], identity: A, f: F, merge: M) -> A
    where
        T: Sync,
        A: Send + Sync + Clone,
        F: Fn(&T) -> A + Sync + Send,
        M: Fn(A, A) -> A + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).fold(identity, merge),
            #[cfg(feature = "parallel")]
            _ => {
                use rayon::prelude::*;
                let id = identity.clone();
                items
                    .par_iter()
                    .map(f)
                    .reduce(move || id.clone(), &merge)
            }
            #[cfg(not(feature = "parallel"))]
            _ => items.iter().map(f).fold(identity, merge),
        }
    }
}
