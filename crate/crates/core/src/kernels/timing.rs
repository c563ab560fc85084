//! Median-of-reps latency measurement.

use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::quant::{quantize_matrix, GroupingAxis, PackedMatrix, QuantConfig};
use crate::{Error, Matrix, Result};

use super::{gemv_f32_into, qgemv_inner_into, qgemv_outer_into};

/// Runs `f` `warmup` times unmeasured, then `reps` measured times, all on one
/// freshly spawned thread, and returns the median sample. With an even
/// number of samples the lower middle one is returned.
pub fn median_latency<F>(warmup: usize, reps: usize, mut f: F) -> Result<Duration>
where
    F: FnMut() + Send,
{
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let mut samples = std::thread::scope(|s| {
        s.spawn(move || {
            for _ in 0..warmup {
                f();
            }
            let mut samples = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                f();
                samples.push(t.elapsed());
            }
            samples
        })
        .join()
        .expect("timed closure panicked")
    });
    let mid = (samples.len() - 1) / 2;
    Ok(*samples.select_nth_unstable(mid).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelChoice {
    /// Dense full-precision GEMV.
    Reference,
    Inner,
    Outer,
}

impl std::fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelChoice::Reference => "matmul",
            KernelChoice::Inner => "inner",
            KernelChoice::Outer => "outer",
        })
    }
}

/// Pre-built inputs for every kernel over one logical matrix, so no packing
/// happens inside the timed region.
#[derive(Debug, Clone)]
pub struct KernelProblem {
    pub dense: Matrix,
    pub inner: PackedMatrix,
    pub outer: Option<PackedMatrix>,
    pub a: Vec<f32>,
}

impl KernelProblem {
    /// Packs `dense` both ways. The outer layout is skipped when `N_out` is
    /// not a multiple of `G`.
    pub fn new(dense: Matrix, a: Vec<f32>, cfg: &QuantConfig) -> Result<Self> {
        if dense.rows() == 0 || dense.cols() == 0 {
            return Err(Error::Empty("kernel problem"));
        }
        if a.len() != dense.cols() {
            return Err(Error::shape(format!(
                "vector of length {} against {} columns",
                a.len(),
                dense.cols()
            )));
        }
        let inner = quantize_matrix(&dense, GroupingAxis::Inner, cfg)?;
        let outer = if dense.rows() % cfg.group_size() == 0 {
            Some(quantize_matrix(&dense, GroupingAxis::Outer, cfg)?)
        } else {
            None
        };
        Ok(Self {
            dense,
            inner,
            outer,
            a,
        })
    }
}

/// Median latency of one kernel on `problem`.
pub fn time_kernel(
    kernel: KernelChoice,
    problem: &KernelProblem,
    warmup: usize,
    reps: usize,
) -> Result<Duration> {
    let mut out = vec![0.0f32; problem.dense.rows()];
    let a = &problem.a[..];
    match kernel {
        KernelChoice::Reference => median_latency(warmup, reps, || {
            gemv_f32_into(black_box(&problem.dense), black_box(a), &mut out).unwrap();
            black_box(&out);
        }),
        KernelChoice::Inner => {
            let v = problem.inner.view();
            median_latency(warmup, reps, || {
                qgemv_inner_into(black_box(a), black_box(&v), &mut out).unwrap();
                black_box(&out);
            })
        }
        KernelChoice::Outer => {
            let outer = problem
                .outer
                .as_ref()
                .ok_or_else(|| Error::config("N_out is not a multiple of G; no outer layout"))?;
            let v = outer.view();
            median_latency(warmup, reps, || {
                qgemv_outer_into(black_box(a), black_box(&v), &mut out).unwrap();
                black_box(&out);
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rep_is_the_sample() {
        let mut calls = 0;
        let d = median_latency(3, 1, || calls += 1).unwrap();
        assert_eq!(calls, 4);
        assert!(d < Duration::from_secs(1));
        assert!(median_latency(0, 0, || {}).is_err());
    }

    #[test]
    fn sleeping_dummy() {
        let t = Duration::from_millis(5);
        let d = median_latency(1, 9, || std::thread::sleep(t)).unwrap();
        assert!(d >= t, "{d:?}");
        assert!(d < t * 4, "{d:?}");
    }

    #[test]
    fn runs_on_another_thread() {
        let here = std::thread::current().id();
        let mut seen = None;
        median_latency(0, 1, || seen = Some(std::thread::current().id())).unwrap();
        assert_ne!(seen.unwrap(), here);
    }

    #[test]
    fn time_each_kernel() {
        let cfg = QuantConfig::default();
        let m = Matrix::from_fn(32, 64, |i, j| ((i * 64 + j) as f32).sin());
        let p = KernelProblem::new(m, vec![0.5; 64], &cfg).unwrap();
        for k in [KernelChoice::Reference, KernelChoice::Inner, KernelChoice::Outer] {
            time_kernel(k, &p, 1, 3).unwrap();
        }
        let m = Matrix::from_fn(4, 64, |i, j| (i + j) as f32);
        let p = KernelProblem::new(m, vec![0.5; 64], &cfg).unwrap();
        assert!(p.outer.is_none());
        assert!(time_kernel(KernelChoice::Outer, &p, 1, 1).is_err());
        assert!(KernelProblem::new(Matrix::zeros(0, 32), vec![], &cfg).is_err());
    }
}
