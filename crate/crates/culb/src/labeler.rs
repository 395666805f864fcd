use culb_core::bench::{label_cell, Cell, CellLabeler, CellLabels};
use culb_core::model::ModelCheckpoint;
use culb_core::world::{Classifiers, World};
use rayon::prelude::*;

use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "CULB_THREADS";

/// Worker count from `CULB_THREADS`; `None` means all cores.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Invalid(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Labels cells on a rayon pool. Each cell owns its RNG stream, so results
/// match [`culb_core::bench::SerialLabeler`] exactly.
pub struct ParallelLabeler {
    pool: rayon::ThreadPool,
}

impl ParallelLabeler {
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        let pool = b.build().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(Self { pool })
    }

    pub fn from_env() -> Result<Self> {
        Self::new(threads_from_env()?)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl CellLabeler for ParallelLabeler {
    fn label_cells(
        &self,
        checkpoint: &ModelCheckpoint,
        world: &World,
        classifiers: &Classifiers,
        cells: &[Cell],
        eval_seed: u64,
    ) -> culb_core::Result<Vec<CellLabels>> {
        self.pool.install(|| {
            cells
                .par_iter()
                .map(|c| label_cell(&checkpoint.params, &checkpoint.schedule, world, classifiers, c, eval_seed))
                .collect()
        })
    }
}
