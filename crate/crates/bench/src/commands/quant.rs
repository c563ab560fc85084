use std::hint::black_box;
use std::time::Duration;

use qcache::quant::{
    quantize_group_hybrid, quantize_group_sym, quantize_matrix, unpack_codes, GroupEncoding,
    GroupingAxis, PackedMatrix, QuantConfig, QuantMode,
};
use qcache::Matrix;
use rand::seq::index;

use super::{paired_median, BenchSpec};
use crate::data::{gaussian_matrix, rng};
use crate::presets::ModelPreset;
use crate::report::{ms, Table};
use crate::{BenchError, Result};

/// Groups compared with the single-group functions before timing.
const SPOT_GROUPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantRow {
    pub model: ModelPreset,
    pub seq_len: usize,
    pub sym: Duration,
    pub hybrid: Duration,
}

impl QuantRow {
    /// Hybrid latency over symmetric latency.
    pub fn ratio(&self) -> f64 {
        self.hybrid.as_secs_f64() / self.sym.as_secs_f64()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantReport {
    pub rows: Vec<QuantRow>,
    pub skipped: Vec<(ModelPreset, usize)>,
}

impl QuantReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "Quantization latency",
            &["model", "seq_len", "sym_ms", "hybrid_ms", "ratio"],
        );
        for r in &self.rows {
            t.push(vec![
                r.model.to_string(),
                r.seq_len.to_string(),
                ms(r.sym),
                ms(r.hybrid),
                format!("{:.3}", r.ratio()),
            ]);
        }
        t
    }
}

/// Times `quantize_matrix` over `seq_len × d` matrices in symmetric and
/// hybrid mode (inner grouping, `G = 32`), alternating the two.
pub fn bench_quant(spec: &BenchSpec, bits: u8) -> Result<QuantReport> {
    let sym = QuantConfig::new(bits, 32, QuantMode::Sym)?;
    let hybrid = QuantConfig::new(bits, 32, QuantMode::Hybrid)?;
    spec.validate(32)?;
    let mut report = QuantReport::default();
    for (mi, &model) in spec.models.iter().enumerate() {
        let d = model.width();
        if d % 32 != 0 {
            return Err(BenchError::usage(format!("{model} width {d} is not a multiple of 32")));
        }
        for &n in &spec.seq_lens {
            // the input plus one packed copy per mode
            let bytes = 4 * (n * d) as u64 + 2 * (n * d) as u64 * (bits as u64 + 3) / 8;
            if bytes > spec.max_bytes {
                report.skipped.push((model, n));
                continue;
            }
            let stream = ((mi as u64) << 32) | n as u64;
            let m = gaussian_matrix(&mut rng(spec.seed, stream), n, d, 1.0);
            verify(&m, &sym, spec.seed ^ stream)?;
            verify(&m, &hybrid, spec.seed ^ stream)?;
            let (t_sym, t_hybrid) = paired_median(
                spec.warmup,
                spec.reps,
                || {
                    black_box(quantize_matrix(black_box(&m), GroupingAxis::Inner, &sym).unwrap());
                },
                || {
                    black_box(quantize_matrix(black_box(&m), GroupingAxis::Inner, &hybrid).unwrap());
                },
            )?;
            report.rows.push(QuantRow {
                model,
                seq_len: n,
                sym: t_sym,
                hybrid: t_hybrid,
            });
        }
    }
    Ok(report)
}

/// Compares sampled groups of the packed matrix with the single-group
/// quantizers.
fn verify(m: &Matrix, cfg: &QuantConfig, seed: u64) -> Result<()> {
    let p = quantize_matrix(m, GroupingAxis::Inner, cfg)?;
    let n = p.num_groups();
    for gi in index::sample(&mut rng(seed, u64::MAX - 1), n, SPOT_GROUPS.min(n)) {
        let values = &m.data()[gi * 32..(gi + 1) * 32];
        let want = match cfg.mode() {
            QuantMode::Sym => quantize_group_sym(values, cfg.bits())?,
            _ => quantize_group_hybrid(values, cfg.bits())?.0,
        };
        if !same_group(&p, gi, &want)? {
            return Err(BenchError::verification(format!(
                "{} quantization of group {gi} differs from the group oracle; refusing to time it",
                cfg.mode()
            )));
        }
    }
    Ok(())
}

fn same_group(p: &PackedMatrix, gi: usize, want: &GroupEncoding) -> Result<bool> {
    let g = p.group(gi);
    let codes = unpack_codes(g.packed_codes, want.codes.len(), p.config().bits())?;
    Ok(g.scale.to_bits() == want.scale.to_bits()
        && g.aux == want.aux
        && g.is_symmetric == want.is_symmetric
        && codes == want.codes)
}
