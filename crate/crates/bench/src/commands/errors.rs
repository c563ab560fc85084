use qcache::attention::compute_norm;
use qcache::quant::{
    dequantize_group, dequantize_matrix, quantize_group_asym, quantize_group_hybrid,
    quantize_group_sym, quantize_matrix, GroupingAxis, QuantConfig, QuantMode,
};
use qcache::Matrix;

use crate::data::SyntheticDataSpec;
use crate::report::Table;
use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReportSpec {
    pub data: SyntheticDataSpec,
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub axis: GroupingAxis,
    /// Mode used for the normalization comparison.
    pub norm_mode: QuantMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub groups: usize,
    pub sse_asym: f64,
    pub sse_sym: f64,
    pub sse_hybrid: f64,
    /// Sum over groups of the smaller of the two SSEs, same order as the
    /// other totals.
    pub sse_min_sum: f64,
    pub hybrid_sym_groups: usize,
    /// Per-token-group SSE of the whole matrix without and with per-channel
    /// normalization, measured in the original space.
    pub norm_off: f64,
    pub norm_on: f64,
}

impl ErrorReport {
    pub fn hybrid_sym_fraction(&self) -> f64 {
        if self.groups == 0 {
            0.0
        } else {
            self.hybrid_sym_groups as f64 / self.groups as f64
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.sse_hybrid != self.sse_min_sum {
            v.push(format!(
                "hybrid SSE {} differs from the per-group minimum {}",
                self.sse_hybrid, self.sse_min_sum
            ));
        }
        v
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("Quantization error", &["metric", "value"]);
        let rows: [(&str, String); 9] = [
            ("groups", self.groups.to_string()),
            ("sse_asym", format!("{:e}", self.sse_asym)),
            ("sse_sym", format!("{:e}", self.sse_sym)),
            ("sse_hybrid", format!("{:e}", self.sse_hybrid)),
            ("sse_min_of_modes", format!("{:e}", self.sse_min_sum)),
            ("hybrid_sym_fraction", format!("{:.4}", self.hybrid_sym_fraction())),
            ("sse_norm_off", format!("{:e}", self.norm_off)),
            ("sse_norm_on", format!("{:e}", self.norm_on)),
            ("norm_sse_ratio", format!("{:.4}", self.norm_on / self.norm_off)),
        ];
        for (k, v) in rows {
            t.push(vec![k.to_string(), v]);
        }
        t
    }
}

fn sse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Per-mode SSE totals over the groups of the generated matrix, and the
/// effect of per-channel normalization on per-token groups.
pub fn error_report(spec: &ErrorReportSpec) -> Result<ErrorReport> {
    let g = spec.group_size;
    let m = spec.data.generate(spec.rows, spec.cols)?;
    let groups = collect_groups(&m, g, spec.axis)?;
    let mut r = ErrorReport {
        groups: groups.len(),
        sse_asym: 0.0,
        sse_sym: 0.0,
        sse_hybrid: 0.0,
        sse_min_sum: 0.0,
        hybrid_sym_groups: 0,
        norm_off: 0.0,
        norm_on: 0.0,
    };
    for v in &groups {
        let a = sse(v, &dequantize_group(&quantize_group_asym(v, spec.bits)?)?);
        let s = sse(v, &dequantize_group(&quantize_group_sym(v, spec.bits)?)?);
        let (h, _) = quantize_group_hybrid(v, spec.bits)?;
        r.sse_asym += a;
        r.sse_sym += s;
        r.sse_hybrid += sse(v, &dequantize_group(&h)?);
        r.sse_min_sum += a.min(s);
        r.hybrid_sym_groups += h.is_symmetric as usize;
    }
    let cfg = QuantConfig::new(spec.bits, g, spec.norm_mode)?;
    (r.norm_off, r.norm_on) = normalization_effect(&m, &cfg)?;
    Ok(r)
}

fn collect_groups(m: &Matrix, g: usize, axis: GroupingAxis) -> Result<Vec<Vec<f32>>> {
    if !(1..=32).contains(&g) {
        return Err(BenchError::usage(format!("group size {g} outside 1..=32")));
    }
    match axis {
        GroupingAxis::Inner => {
            if m.cols() % g != 0 {
                return Err(BenchError::usage(format!("{} columns not a multiple of {g}", m.cols())));
            }
            Ok(m.data().chunks_exact(g).map(<[f32]>::to_vec).collect())
        }
        GroupingAxis::Outer => {
            if m.rows() % g != 0 {
                return Err(BenchError::usage(format!("{} rows not a multiple of {g}", m.rows())));
            }
            let mut out = Vec::with_capacity(m.rows() * m.cols() / g);
            for j in 0..m.cols() {
                for blk in 0..m.rows() / g {
                    out.push((0..g).map(|t| m.get(blk * g + t, j)).collect());
                }
            }
            Ok(out)
        }
    }
}

/// SSE of quantizing `k` per token, then with the columns divided by the
/// pairwise channel factors before quantization and multiplied back after.
pub fn normalization_effect(k: &Matrix, cfg: &QuantConfig) -> Result<(f64, f64)> {
    let plain = dequantize_matrix(&quantize_matrix(k, GroupingAxis::Inner, cfg)?);
    let norm = compute_norm(k)?;
    let scaled = k.div_cols(norm.factors())?;
    let back = dequantize_matrix(&quantize_matrix(&scaled, GroupingAxis::Inner, cfg)?)
        .scale_cols(norm.factors())?;
    Ok((sse(k.data(), plain.data()), sse(k.data(), back.data())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(data: SyntheticDataSpec) -> ErrorReportSpec {
        ErrorReportSpec {
            data,
            rows: 64,
            cols: 128,
            bits: 2,
            group_size: 32,
            axis: GroupingAxis::Inner,
            norm_mode: QuantMode::Hybrid,
        }
    }

    #[test]
    fn hybrid_is_min_of_modes() {
        for axis in [GroupingAxis::Inner, GroupingAxis::Outer] {
            let mut s = spec(SyntheticDataSpec::gaussian(1.0, 4));
            s.axis = axis;
            let r = error_report(&s).unwrap();
            assert_eq!(r.groups, 64 * 128 / 32);
            assert!(r.violations().is_empty());
            assert!(r.sse_hybrid <= r.sse_sym.min(r.sse_asym));
            // zero-mean data at 2 bits: the signed grid wins nearly everywhere
            assert!(r.hybrid_sym_fraction() > 0.5);
        }
    }

    #[test]
    fn normalization_helps_with_outlier_channels() {
        let r = error_report(&spec(SyntheticDataSpec::with_outliers(1.0, 4, 50.0, 9))).unwrap();
        assert!(r.norm_on < r.norm_off, "{} vs {}", r.norm_on, r.norm_off);
    }

    #[test]
    fn rejects_misaligned_shapes() {
        let mut s = spec(SyntheticDataSpec::gaussian(1.0, 0));
        s.cols = 100;
        assert!(error_report(&s).is_err());
        s.cols = 128;
        s.axis = GroupingAxis::Outer;
        s.rows = 40;
        assert!(error_report(&s).is_err());
    }
}
