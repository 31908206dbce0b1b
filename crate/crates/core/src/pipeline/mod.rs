//! Model assembly, optimization, training, tracking, evaluation and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod track;
pub mod train;

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::Result;

pub use checkpoint::Checkpoint;
pub use config::{Config, ModelConfig, Regime, TrainConfig};
pub use eval::{evaluate, Metrics};
pub use model::{Model, PairCrop};
pub use optim::AdamW;
pub use track::TrackSession;
pub use train::{TrainData, Trainer};

pub const THREADS_ENV: &str = "MDTRACK_THREADS";

/// Worker count from `MDTRACK_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = thread_count();
        (n > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool")
        })
    })
    .as_ref()
}

/// `f(0..n)` in index order; parallel when more than one thread is
/// allowed. Results do not depend on the thread count.
pub fn run_parallel<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    match pool() {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}
