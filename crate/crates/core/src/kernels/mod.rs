//! Fused dequantize-and-multiply GEMV.
//!
//! Both kernels compute `out = P · a` for a packed logical `N_out × K` matrix
//! `P` and never materialize more than one group of dequantized values. Each
//! element is reconstructed exactly as `dequantize_matrix` does and products
//! are summed in `f64` in column order, so the result equals the dense product
//! of the dequantized matrix. With
//! inner grouping each output element walks `K/G` groups and fetches one scale
//! and one auxiliary word per group. With outer grouping the `K` elements of
//! an output row belong to `K` different groups, so every multiply-accumulate
//! fetches its own scale and auxiliary word. [`TrafficStats`] counts those
//! fetches exactly.

mod timing;

pub use timing::{median_latency, time_kernel, KernelChoice, KernelProblem};

use std::ops::AddAssign;

use crate::quant::{GroupingAxis, PackedView, MAX_GROUP};
use crate::{Error, Matrix, Result, Vector};

/// Memory-traffic counters of one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub scale_loads: u64,
    pub aux_loads: u64,
    /// Bytes of packed code storage read.
    pub code_word_loads: u64,
    /// Two per multiply-accumulate.
    pub flops: u64,
}

impl AddAssign for TrafficStats {
    fn add_assign(&mut self, o: Self) {
        self.scale_loads += o.scale_loads;
        self.aux_loads += o.aux_loads;
        self.code_word_loads += o.code_word_loads;
        self.flops += o.flops;
    }
}

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub output: Vector,
    pub stats: TrafficStats,
}

fn check_input(a: &[f32], p: &PackedView<'_>, axis: GroupingAxis, out: &[f32]) -> Result<()> {
    if p.matrix().axis() != axis {
        return Err(Error::shape(format!(
            "{axis:?} kernel given a {:?}-grouped matrix",
            p.matrix().axis()
        )));
    }
    if a.len() != p.n_cols() {
        return Err(Error::shape(format!(
            "vector of length {} against {} columns",
            a.len(),
            p.n_cols()
        )));
    }
    if out.len() != p.n_rows() {
        return Err(Error::shape(format!(
            "output of length {} for {} rows",
            out.len(),
            p.n_rows()
        )));
    }
    Ok(())
}

fn finish(out: Vec<f32>, stats: TrafficStats) -> Result<KernelReport> {
    Ok(KernelReport {
        output: Vector::new(out)?,
        stats,
    })
}

/// `P · a` for an inner-grouped `P`.
pub fn qgemv_inner(a: &[f32], p: &PackedView<'_>) -> Result<KernelReport> {
    let mut out = vec![0.0; p.n_rows()];
    let stats = qgemv_inner_into(a, p, &mut out)?;
    finish(out, stats)
}

/// Allocation-free form of [`qgemv_inner`]; overwrites `out`.
pub fn qgemv_inner_into(a: &[f32], p: &PackedView<'_>, out: &mut [f32]) -> Result<TrafficStats> {
    check_input(a, p, GroupingAxis::Inner, out)?;
    let m = p.matrix();
    let cfg = m.config();
    let g = cfg.group_size();
    let bits = cfg.bits();
    let per_row = m.groups_per_line();
    let first = p.cols().start / g;
    let n_groups = p.n_cols() / g;
    let mut buf = [0.0f32; MAX_GROUP];
    let buf = &mut buf[..g];

    for (o, i) in out.iter_mut().zip(p.rows()) {
        let mut acc = 0.0f64;
        for (gj, a_blk) in a.chunks_exact(g).enumerate() {
            let grp = m.group(i * per_row + first + gj);
            crate::quant::dequantize_group_ref(&grp, bits, buf);
            for (&w, &x) in buf.iter().zip(a_blk) {
                acc += w as f64 * x as f64;
            }
        }
        *o = acc as f32;
    }

    let touched = (p.n_rows() * n_groups) as u64;
    Ok(TrafficStats {
        scale_loads: touched,
        aux_loads: touched,
        code_word_loads: touched * cfg.group_code_bytes() as u64,
        flops: 2 * (p.n_rows() * p.n_cols()) as u64,
    })
}

/// `P · a` for an outer-grouped `P`, one scale and auxiliary fetch per
/// multiply-accumulate.
pub fn qgemv_outer(a: &[f32], p: &PackedView<'_>) -> Result<KernelReport> {
    let mut out = vec![0.0; p.n_rows()];
    let stats = qgemv_outer_into(a, p, &mut out)?;
    finish(out, stats)
}

/// Allocation-free form of [`qgemv_outer`]; overwrites `out`.
pub fn qgemv_outer_into(a: &[f32], p: &PackedView<'_>, out: &mut [f32]) -> Result<TrafficStats> {
    check_input(a, p, GroupingAxis::Outer, out)?;
    let m = p.matrix();
    let cfg = m.config();
    let bits = cfg.bits() as usize;
    let mut code_bytes = 0u64;

    for (o, i) in out.iter_mut().zip(p.rows()) {
        let mut acc = 0.0f64;
        for (&x, j) in a.iter().zip(p.cols()) {
            let (gi, k) = m.locate(i, j);
            let grp = m.group(gi);
            let bit = k * bits;
            code_bytes += if bit % 8 + bits > 8 { 2 } else { 1 };
            let v = crate::quant::dequantize_one(&grp, k, cfg.bits());
            acc += v as f64 * x as f64;
        }
        *o = acc as f32;
    }

    let touched = (p.n_rows() * p.n_cols()) as u64;
    Ok(TrafficStats {
        scale_loads: touched,
        aux_loads: touched,
        code_word_loads: code_bytes,
        flops: 2 * touched,
    })
}

/// Dispatches on the matrix's grouping axis.
pub fn qgemv(a: &[f32], p: &PackedView<'_>) -> Result<KernelReport> {
    match p.matrix().axis() {
        GroupingAxis::Inner => qgemv_inner(a, p),
        GroupingAxis::Outer => qgemv_outer(a, p),
    }
}

/// Dense single-precision `M · a` with double accumulation; the unquantized
/// baseline.
pub fn gemv_f32(m: &Matrix, a: &[f32]) -> Result<Vector> {
    let mut out = vec![0.0; m.rows()];
    gemv_f32_into(m, a, &mut out)?;
    Vector::new(out)
}

pub fn gemv_f32_into(m: &Matrix, a: &[f32], out: &mut [f32]) -> Result<()> {
    if a.len() != m.cols() || out.len() != m.rows() {
        return Err(Error::shape(format!(
            "{}x{} matrix, vector {}, output {}",
            m.rows(),
            m.cols(),
            a.len(),
            out.len()
        )));
    }
    for (o, row) in out.iter_mut().zip(m.data().chunks_exact(m.cols().max(1))) {
        let mut acc = 0.0f64;
        for (&w, &x) in row.iter().zip(a) {
            acc += w as f64 * x as f64;
        }
        *o = acc as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{
        dequantize_matrix, quantize_matrix, PackedMatrix, QuantConfig, QuantMode,
    };
    use crate::tensor::matmul_ref;

    fn data(rows: usize, cols: usize, seed: u32) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| {
            let x = (i as f32 * 12.9898 + j as f32 * 78.233 + seed as f32).sin() * 43758.547;
            (x - x.floor()) * 4.0 - 2.0 + if j % 7 == 0 { 1.0 } else { 0.0 }
        })
    }

    fn oracle(p: &PackedMatrix, a: &[f32]) -> Vec<f32> {
        let col = Matrix::new(a.len(), 1, a.to_vec()).unwrap();
        matmul_ref(&dequantize_matrix(p), &col).unwrap().into_data()
    }

    fn assert_close(got: &[f32], want: &[f32]) {
        let inf = want.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-4 * (1.0 + inf), "{g} vs {w}");
        }
    }

    #[test]
    fn zero_codes_give_zero_output() {
        let cfg = QuantConfig::new(2, 32, QuantMode::Asym).unwrap();
        let a: Vec<f32> = (0..64).map(|i| i as f32 * 0.5 - 3.0).collect();
        let p = quantize_matrix(&Matrix::zeros(4, 64), GroupingAxis::Inner, &cfg).unwrap();
        assert!(p.code_bytes().iter().all(|&b| b == 0));
        let r = qgemv_inner(&a, &p.view()).unwrap();
        assert!(r.output.as_slice().iter().all(|&v| v == 0.0));
        let p = quantize_matrix(&Matrix::zeros(32, 64), GroupingAxis::Outer, &cfg).unwrap();
        let r = qgemv_outer(&a, &p.view()).unwrap();
        assert!(r.output.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_matches_oracle_on_small_instance() {
        let cfg = QuantConfig::default();
        let m = data(4, 64, 1);
        let a: Vec<f32> = data(1, 64, 2).into_data();
        let p = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap();
        let r = qgemv_inner(&a, &p.view()).unwrap();
        assert_close(r.output.as_slice(), &oracle(&p, &a));
        assert_eq!(r.stats.scale_loads, 8);
        assert_eq!(r.stats.aux_loads, 8);
        assert_eq!(r.stats.code_word_loads, 8 * 8);
        assert_eq!(r.stats.flops, 2 * 4 * 64);
    }

    #[test]
    fn outer_matches_oracle_and_counts_per_element() {
        // outer groups run along N_out, which must hold whole groups
        let cfg = QuantConfig::default();
        let m = data(32, 64, 3);
        let a: Vec<f32> = data(1, 64, 4).into_data();
        let pi = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap();
        let po = quantize_matrix(&m, GroupingAxis::Outer, &cfg).unwrap();
        let ri = qgemv_inner(&a, &pi.view()).unwrap();
        let ro = qgemv_outer(&a, &po.view()).unwrap();
        assert_close(ro.output.as_slice(), &oracle(&po, &a));
        assert_eq!(ri.stats.scale_loads, 32 * 2);
        assert_eq!(ro.stats.scale_loads, 32 * 64);
        assert_eq!(ro.stats.scale_loads / ri.stats.scale_loads, 32);
        assert_eq!(ro.stats.scale_loads % ri.stats.scale_loads, 0);
        // 2-bit codes never straddle a byte
        assert_eq!(ro.stats.code_word_loads, 32 * 64);
    }

    #[test]
    fn views_match_sliced_oracle() {
        let cfg = QuantConfig::new(4, 16, QuantMode::Sym).unwrap();
        let m = data(10, 64, 5);
        let p = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap();
        let a: Vec<f32> = data(1, 32, 6).into_data();
        let v = p.view().slice(2..7, 16..48).unwrap();
        let r = qgemv_inner(&a, &v).unwrap();
        let deq = dequantize_matrix(&p).slice_rows(2, 7).unwrap().slice_cols(16, 48).unwrap();
        let col = Matrix::new(32, 1, a.clone()).unwrap();
        assert_close(r.output.as_slice(), matmul_ref(&deq, &col).unwrap().data());
        assert_eq!(r.stats.scale_loads, 5 * 2);
    }

    #[test]
    fn rejects_axis_and_shape_mismatch() {
        let cfg = QuantConfig::default();
        let p = quantize_matrix(&data(32, 64, 7), GroupingAxis::Outer, &cfg).unwrap();
        assert!(qgemv_inner(&[0.0; 64], &p.view()).is_err());
        assert!(qgemv_outer(&[0.0; 63], &p.view()).is_err());
        let p = quantize_matrix(&data(2, 64, 7), GroupingAxis::Inner, &cfg).unwrap();
        assert!(qgemv_outer(&[0.0; 64], &p.view()).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = QuantConfig::new(3, 32, QuantMode::Hybrid).unwrap();
        let p = quantize_matrix(&data(8, 256, 8), GroupingAxis::Inner, &cfg).unwrap();
        let a: Vec<f32> = data(1, 256, 9).into_data();
        let x = qgemv_inner(&a, &p.view()).unwrap().output;
        for _ in 0..3 {
            let y = qgemv_inner(&a, &p.view()).unwrap().output;
            assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn dense_gemv_matches_matmul_ref() {
        let m = data(5, 7, 10);
        let a: Vec<f32> = data(1, 7, 11).into_data();
        let got = gemv_f32(&m, &a).unwrap();
        let want = matmul_ref(&m, &Matrix::new(7, 1, a).unwrap()).unwrap();
        assert_eq!(got.as_slice(), want.data());
    }
}
