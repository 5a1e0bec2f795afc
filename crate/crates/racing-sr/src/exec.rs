//! Data-parallel map with a sequential fallback.
//!
//! All randomness and oracle queries happen in a single-threaded coordinator;
//! only pure fitting/evaluation work is fanned out, and results come back in
//! input order, so runs are bit-identical whichever executor is used.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    /// Plain iteration on the calling thread.
    Sequential,
    /// Fan out over the rayon thread pool.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Executor {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Executor::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Executor::Sequential
        }
    }
}

impl Executor {
    /// The best executor available for `jobs` requested workers.
    pub fn with_jobs(jobs: usize) -> Executor {
        if jobs == 1 {
            Executor::Sequential
        } else {
            Executor::default()
        }
    }

    /// Cap the global worker pool. Takes effect once per process; later
    /// calls are ignored (the pool is already running).
    pub fn configure_worker_cap(jobs: usize) {
        #[cfg(feature = "parallel")]
        {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
        #[cfg(not(feature = "parallel"))]
        let _ = jobs;
    }

    pub fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        match self {
            Executor::Sequential => items.into_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Executor::Parallel => items.into_par_iter().map(f).collect(),
        }
    }
}
