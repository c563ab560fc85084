use std::time::Duration;

use qcache::kernels::{gemv_f32, qgemv_inner, qgemv_outer, time_kernel, KernelChoice, KernelProblem, TrafficStats};
use qcache::quant::{estimate_packed_bits, PackedMatrix, QuantConfig};
use rand::seq::index;

use super::{speedup_pct, BenchSpec};
use crate::data::{gaussian_matrix, gaussian_vec, rng};
use crate::presets::ModelPreset;
use crate::report::{ms, pct, Table};
use crate::{BenchError, Result};

/// Rows checked against the scalar oracle before any timing.
pub const SPOT_ROWS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MatmulRow {
    pub model: ModelPreset,
    pub method: KernelChoice,
    pub seq_len: usize,
    pub median: Duration,
    pub speedup_vs_ref: Option<f64>,
    pub speedup_vs_outer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficRow {
    pub model: ModelPreset,
    pub seq_len: usize,
    pub method: KernelChoice,
    pub median: Duration,
    pub stats: TrafficStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatmulReport {
    pub timings: Vec<MatmulRow>,
    pub traffic: Vec<TrafficRow>,
    /// Grid points over the byte budget.
    pub skipped: Vec<(ModelPreset, usize)>,
}

impl MatmulReport {
    pub fn timing_table(&self) -> Table {
        let mut t = Table::new(
            "GEMV latency",
            &["model", "method", "seq_len", "median_ms", "speedup_vs_ref_pct", "speedup_vs_outer_pct"],
        );
        let opt = |x: Option<f64>| x.map(pct).unwrap_or_default();
        for r in &self.timings {
            t.push(vec![
                r.model.to_string(),
                r.method.to_string(),
                r.seq_len.to_string(),
                ms(r.median),
                opt(r.speedup_vs_ref),
                opt(r.speedup_vs_outer),
            ]);
        }
        t
    }

    /// Exact per-call counters next to the measured latency. The last column
    /// is the method's scale loads divided by the inner kernel's.
    pub fn traffic_table(&self) -> Table {
        let mut t = Table::new(
            "Memory traffic per call",
            &[
                "model",
                "seq_len",
                "method",
                "median_ms",
                "scale_loads",
                "aux_loads",
                "code_bytes",
                "flops",
                "scale_loads_vs_inner",
            ],
        );
        for r in &self.traffic {
            let inner = self.inner_stats(r.model, r.seq_len);
            let ratio = inner
                .map(|i| format!("{}", r.stats.scale_loads as f64 / i.scale_loads as f64))
                .unwrap_or_default();
            t.push(vec![
                r.model.to_string(),
                r.seq_len.to_string(),
                r.method.to_string(),
                ms(r.median),
                r.stats.scale_loads.to_string(),
                r.stats.aux_loads.to_string(),
                r.stats.code_word_loads.to_string(),
                r.stats.flops.to_string(),
                ratio,
            ]);
        }
        t
    }

    fn inner_stats(&self, model: ModelPreset, seq_len: usize) -> Option<TrafficStats> {
        self.traffic
            .iter()
            .find(|r| r.model == model && r.seq_len == seq_len && r.method == KernelChoice::Inner)
            .map(|r| r.stats)
    }

    /// `(model, seq_len, outer scale loads, inner scale loads)` per grid point.
    pub fn scale_load_pairs(&self) -> Vec<(ModelPreset, usize, u64, u64)> {
        self.traffic
            .iter()
            .filter(|r| r.method == KernelChoice::Outer)
            .filter_map(|r| {
                let inner = self.inner_stats(r.model, r.seq_len)?;
                Some((r.model, r.seq_len, r.stats.scale_loads, inner.scale_loads))
            })
            .collect()
    }
}

/// Bytes held while benchmarking one grid point: the dense matrix and both
/// packed layouts.
pub fn problem_bytes(seq_len: usize, d: usize, cfg: &QuantConfig) -> u64 {
    let n = (seq_len * d) as u64;
    4 * n + 2 * estimate_packed_bits(cfg, n).div_ceil(8)
}

/// Times the dense reference, outer-grouped and inner-grouped GEMV over a
/// `seq_len × d` key matrix and a query of length `d` for every grid point.
pub fn bench_matmul(spec: &BenchSpec, cfg: &QuantConfig) -> Result<MatmulReport> {
    spec.validate(cfg.group_size())?;
    let mut report = MatmulReport::default();
    for (mi, &model) in spec.models.iter().enumerate() {
        let d = model.width();
        if d % cfg.group_size() != 0 {
            return Err(BenchError::usage(format!(
                "{model} width {d} is not a multiple of the group size {}",
                cfg.group_size()
            )));
        }
        for &n in &spec.seq_lens {
            if problem_bytes(n, d, cfg) > spec.max_bytes {
                report.skipped.push((model, n));
                continue;
            }
            let stream = ((mi as u64) << 32) | n as u64;
            let mut r = rng(spec.seed, stream);
            let keys = gaussian_matrix(&mut r, n, d, 1.0);
            let query = gaussian_vec(&mut r, d, 1.0);
            let problem = KernelProblem::new(keys, query, cfg)?;
            let (inner_stats, outer_stats) = verify_problem(&problem, spec.seed ^ stream)?;

            let t_ref = time_kernel(KernelChoice::Reference, &problem, spec.warmup, spec.reps)?;
            let t_out = time_kernel(KernelChoice::Outer, &problem, spec.warmup, spec.reps)?;
            let t_in = time_kernel(KernelChoice::Inner, &problem, spec.warmup, spec.reps)?;
            let (s_ref, s_out, s_in) = (t_ref.as_secs_f64(), t_out.as_secs_f64(), t_in.as_secs_f64());

            let row = |method, median, vs_ref, vs_outer| MatmulRow {
                model,
                method,
                seq_len: n,
                median,
                speedup_vs_ref: vs_ref,
                speedup_vs_outer: vs_outer,
            };
            report.timings.push(row(KernelChoice::Reference, t_ref, None, None));
            report
                .timings
                .push(row(KernelChoice::Outer, t_out, Some(speedup_pct(s_out, s_ref)), None));
            report.timings.push(row(
                KernelChoice::Inner,
                t_in,
                Some(speedup_pct(s_in, s_ref)),
                Some(speedup_pct(s_in, s_out)),
            ));
            for (method, median, stats) in [
                (KernelChoice::Outer, t_out, outer_stats),
                (KernelChoice::Inner, t_in, inner_stats),
            ] {
                report.traffic.push(TrafficRow {
                    model,
                    seq_len: n,
                    method,
                    median,
                    stats,
                });
            }
        }
    }
    Ok(report)
}

/// Runs every kernel once and compares sampled rows with a scalar oracle
/// built from element-wise dequantization. Returns the inner and outer
/// counters.
fn verify_problem(p: &KernelProblem, seed: u64) -> Result<(TrafficStats, TrafficStats)> {
    let outer = p
        .outer
        .as_ref()
        .ok_or_else(|| BenchError::usage("sequence length is not a multiple of the group size"))?;
    let n = p.dense.rows();
    let rows = index::sample(&mut rng(seed, u64::MAX), n, SPOT_ROWS.min(n)).into_vec();

    let dense = gemv_f32(&p.dense, &p.a)?;
    let inner = qgemv_inner(&p.a, &p.inner.view())?;
    let outer_out = qgemv_outer(&p.a, &outer.view())?;
    for &i in &rows {
        check_row("matmul", i, dense[i], |j| p.dense.get(i, j), &p.a)?;
        check_row("inner", i, inner.output[i], |j| elem(&p.inner, i, j), &p.a)?;
        check_row("outer", i, outer_out.output[i], |j| elem(outer, i, j), &p.a)?;
    }
    Ok((inner.stats, outer_out.stats))
}

fn elem(p: &PackedMatrix, i: usize, j: usize) -> f32 {
    p.dequantize_element(i, j)
}

fn check_row(name: &str, i: usize, got: f32, w: impl Fn(usize) -> f32, a: &[f32]) -> Result<()> {
    let (mut want, mut mag) = (0.0f64, 0.0f64);
    for (j, &x) in a.iter().enumerate() {
        let t = w(j) as f64 * x as f64;
        want += t;
        mag += t.abs();
    }
    let err = (got as f64 - want).abs();
    if err <= 1e-4 * want.abs() + 1e-12 * mag {
        Ok(())
    } else {
        Err(BenchError::verification(format!(
            "{name} kernel row {i}: got {got}, oracle {want}; refusing to time it"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qcache::quant::QuantMode;

    fn tiny_spec() -> BenchSpec {
        BenchSpec {
            models: vec![ModelPreset::Custom { d: 64, n_h: 2 }],
            seq_lens: vec![32, 64],
            warmup: 0,
            reps: 3,
            seed: 5,
            max_bytes: u64::MAX,
        }
    }

    #[test]
    fn grid_rows_and_ratios() {
        let cfg = QuantConfig::default();
        let r = bench_matmul(&tiny_spec(), &cfg).unwrap();
        assert_eq!(r.timings.len(), 6);
        assert_eq!(r.traffic.len(), 4);
        for (_, _, outer, inner) in r.scale_load_pairs() {
            assert_eq!(outer, inner * 32);
        }
        let t = r.timing_table();
        assert_eq!(t.rows[0][1], "matmul");
        assert_eq!(t.rows[0][4], "");
        assert_eq!(t.rows[2][1], "inner");
        assert!(!t.rows[2][5].is_empty());
        assert_eq!(r.traffic_table().rows[1][8], "1");
    }

    #[test]
    fn byte_budget_skips() {
        let mut spec = tiny_spec();
        let cfg = QuantConfig::new(4, 16, QuantMode::Sym).unwrap();
        spec.max_bytes = problem_bytes(32, 64, &cfg);
        let r = bench_matmul(&spec, &cfg).unwrap();
        assert_eq!(r.skipped, vec![(spec.models[0], 64)]);
        assert_eq!(r.timings.len(), 3);
    }

    #[test]
    fn rejects_unaligned_lengths() {
        let mut spec = tiny_spec();
        spec.seq_lens = vec![40];
        let err = bench_matmul(&spec, &QuantConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
