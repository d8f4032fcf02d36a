//! Rayon-backed client executor. Per-client RNG streams are keyed by
//! (seed, client, round), so results are identical to the sequential runner
//! regardless of thread count.

use rayon::prelude::*;

use fedamp_core::federation::ClientRunner;
use fedamp_core::params::ParamVector;
use fedamp_core::Result;

pub struct RayonRunner {
    pool: rayon::ThreadPool,
}

impl RayonRunner {
    pub fn new(threads: usize) -> std::result::Result<Self, rayon::ThreadPoolBuildError> {
        Ok(Self {
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()?,
        })
    }
}

impl ClientRunner for RayonRunner {
    fn run(
        &self,
        jobs: usize,
        f: &(dyn Fn(usize) -> Result<ParamVector> + Sync),
    ) -> Vec<Result<ParamVector>> {
        self.pool
            .install(|| (0..jobs).into_par_iter().map(f).collect())
    }
}
