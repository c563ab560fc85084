//! The six subcommands as library functions returning structured results.

mod errors;
mod matmul;
mod quant;
mod simulate;
mod snapshot;

pub use errors::{error_report, ErrorReport, ErrorReportSpec};
pub use matmul::{bench_matmul, MatmulReport, MatmulRow, TrafficRow};
pub use quant::{bench_quant, QuantReport, QuantRow};
pub use simulate::{estimated_bytes, random_model, simulate_decode, SimulationReport, SimulationSpec, StepRow};
pub use snapshot::{build_cache, dump, load, snapshot_files, LoadReport};

use std::time::{Duration, Instant};

use crate::presets::ModelPreset;
use crate::report::Table;
use crate::{BenchError, Result};

/// Kernel and quantization benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub models: Vec<ModelPreset>,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
    /// Problems whose dense and packed matrices together exceed this many
    /// bytes are skipped.
    pub max_bytes: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            models: ModelPreset::BUILTIN.to_vec(),
            seq_lens: crate::presets::SeqLens::doubling_grid().0,
            warmup: 100,
            reps: 1000,
            seed: 0,
            max_bytes: 256 << 20,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self, group_size: usize) -> Result<()> {
        if self.models.is_empty() {
            return Err(BenchError::usage("no models given"));
        }
        if self.seq_lens.is_empty() {
            return Err(BenchError::usage("no sequence lengths given"));
        }
        if self.reps == 0 {
            return Err(BenchError::usage("reps must be at least 1"));
        }
        if let Some(n) = self.seq_lens.iter().find(|&&n| n == 0 || n % group_size != 0) {
            return Err(BenchError::usage(format!(
                "sequence length {n} is not a positive multiple of the group size {group_size}"
            )));
        }
        Ok(())
    }
}

/// `100 · (1 − fast / slow)`: the percentage of `slow`'s time saved.
pub fn speedup_pct(fast: f64, slow: f64) -> f64 {
    100.0 * (1.0 - fast / slow)
}

/// Medians of two closures timed in alternation on one spawned thread, so
/// slow drift in machine state affects both alike. Even sample counts give
/// the lower middle sample.
pub fn paired_median<A, B>(warmup: usize, reps: usize, mut a: A, mut b: B) -> Result<(Duration, Duration)>
where
    A: FnMut() + Send,
    B: FnMut() + Send,
{
    if reps == 0 {
        return Err(BenchError::usage("reps must be at least 1"));
    }
    let (mut ta, mut tb) = std::thread::scope(|s| {
        s.spawn(move || {
            for _ in 0..warmup {
                a();
                b();
            }
            let (mut ta, mut tb) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
            for _ in 0..reps {
                let t = Instant::now();
                a();
                ta.push(t.elapsed());
                let t = Instant::now();
                b();
                tb.push(t.elapsed());
            }
            (ta, tb)
        })
        .join()
        .expect("timed closure panicked")
    });
    let mid = (reps - 1) / 2;
    Ok((*ta.select_nth_unstable(mid).1, *tb.select_nth_unstable(mid).1))
}

/// What a command prints: the main table, optional secondary tables, notes
/// for stderr, and failed checks (any of which makes the exit code 1).
#[derive(Debug, Clone, Default)]
pub struct CommandOutput {
    pub table: Option<Table>,
    pub extra: Vec<Table>,
    pub notes: Vec<String>,
    pub violations: Vec<String>,
}
