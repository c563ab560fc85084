//! Windowed quantized key/value cache.
//!
//! Token order is sink, quantized middle, recent. The sink holds the first
//! `w_sink` tokens and is never touched once full. New tokens land in the
//! recent window; whenever it reaches `w_recent + G` rows its oldest `G`
//! tokens are quantized and moved to the middle, independently for keys and
//! values. Keys are quantized one token at a time (`k_hat` is `T_k × d`,
//! groups along channels). Values are quantized in blocks of `G` tokens per
//! channel (`v_hat` is stored transposed, `d × T_v`, groups along tokens), so
//! both decode products group along their reduction dimension.

mod snapshot;

pub use snapshot::{SnapshotManifest, SNAPSHOT_VERSION};

use serde::{Deserialize, Serialize};

use crate::quant::{
    dequantize_matrix, quantize_matrix_in_phase, GroupingAxis, PackedMatrix, Phase, QuantConfig,
};
use crate::tensor::concat_rows;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w_sink: usize,
    pub w_recent: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            w_sink: 32,
            w_recent: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub quant: QuantConfig,
    pub windows: WindowConfig,
    /// When false every token stays in full precision.
    pub quantize: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            quant: QuantConfig::default(),
            windows: WindowConfig::default(),
            quantize: true,
        }
    }
}

impl CacheConfig {
    /// Checks the configuration against model width `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::config("model width must be positive"));
        }
        if !self.quantize {
            return Ok(());
        }
        let g = self.quant.group_size();
        if d % g != 0 {
            return Err(Error::config(format!("width {d} is not a multiple of G = {g}")));
        }
        if self.windows.w_recent < g {
            return Err(Error::config(format!(
                "w_recent = {} is smaller than G = {g}",
                self.windows.w_recent
            )));
        }
        Ok(())
    }
}

/// Borrowed sink, middle and recent partitions in token order.
#[derive(Debug, Clone, Copy)]
pub struct CacheViews<'a> {
    pub sink: &'a Matrix,
    /// `T × d` for keys, `d × T` for values.
    pub middle: &'a PackedMatrix,
    pub recent: &'a Matrix,
}

/// Token counts per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLayout {
    pub total_tokens: usize,
    pub sink: usize,
    pub k_middle: usize,
    pub v_middle: usize,
    pub k_recent: usize,
    pub v_recent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKvCache {
    cfg: CacheConfig,
    d: usize,
    k_sink: Matrix,
    v_sink: Matrix,
    k_hat: PackedMatrix,
    v_hat: PackedMatrix,
    k_recent: Matrix,
    v_recent: Matrix,
    total_tokens: usize,
}

impl QuantizedKvCache {
    /// Builds the cache from `N × d` prefill keys and values.
    pub fn init_from_prefill(k: &Matrix, v: &Matrix, cfg: CacheConfig) -> Result<Self> {
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(Error::shape(format!(
                "keys {}x{} and values {}x{}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        let (n, d) = (k.rows(), k.cols());
        cfg.validate(d)?;
        let WindowConfig { w_sink, w_recent } = cfg.windows;
        let g = cfg.quant.group_size();

        let sink = n.min(w_sink);
        let (k_mid_end, v_mid_end) = if cfg.quantize && n > w_sink + w_recent {
            let middle = n - w_sink - w_recent;
            (w_sink + middle, w_sink + middle - middle % g)
        } else {
            (sink, sink)
        };

        let k_mid = k.slice_rows(sink, k_mid_end)?;
        let v_mid = v.slice_rows(sink, v_mid_end)?.transpose();
        Ok(Self {
            cfg,
            d,
            k_sink: k.slice_rows(0, sink)?,
            v_sink: v.slice_rows(0, sink)?,
            k_hat: quantize_prefill(&k_mid, &cfg)?,
            v_hat: quantize_prefill(&v_mid, &cfg)?,
            k_recent: k.slice_rows(k_mid_end, n)?,
            v_recent: v.slice_rows(v_mid_end, n)?,
            total_tokens: n,
        })
    }

    /// Appends one decode token, quantizing whole blocks of `G` tokens out of
    /// the recent windows as they fill.
    pub fn append_token(&mut self, k_row: &[f32], v_row: &[f32]) -> Result<()> {
        if k_row.len() != self.d || v_row.len() != self.d {
            return Err(Error::shape(format!(
                "rows of length {} and {} for width {}",
                k_row.len(),
                v_row.len(),
                self.d
            )));
        }
        if let Some(i) = k_row.iter().chain(v_row).position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if self.k_sink.rows() < self.cfg.windows.w_sink {
            // only reachable while the prompt was shorter than the sink
            self.k_sink.push_row(k_row)?;
            self.v_sink.push_row(v_row)?;
        } else {
            self.k_recent.push_row(k_row)?;
            self.v_recent.push_row(v_row)?;
        }
        self.total_tokens += 1;
        if self.cfg.quantize {
            self.evict()?;
        }
        Ok(())
    }

    fn evict(&mut self) -> Result<()> {
        let g = self.cfg.quant.group_size();
        let limit = self.cfg.windows.w_recent + g;
        while self.k_recent.rows() >= limit {
            let block = self.k_recent.slice_rows(0, g)?;
            let packed =
                quantize_matrix_in_phase(&block, GroupingAxis::Inner, &self.cfg.quant, Phase::Decode)?;
            self.k_hat.append_rows(&packed)?;
            self.k_recent.remove_front_rows(g);
        }
        while self.v_recent.rows() >= limit {
            let block = self.v_recent.slice_rows(0, g)?.transpose();
            let packed =
                quantize_matrix_in_phase(&block, GroupingAxis::Inner, &self.cfg.quant, Phase::Decode)?;
            self.v_hat.append_cols(&packed)?;
            self.v_recent.remove_front_rows(g);
        }
        Ok(())
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn key_views(&self) -> CacheViews<'_> {
        CacheViews {
            sink: &self.k_sink,
            middle: &self.k_hat,
            recent: &self.k_recent,
        }
    }

    pub fn value_views(&self) -> CacheViews<'_> {
        CacheViews {
            sink: &self.v_sink,
            middle: &self.v_hat,
            recent: &self.v_recent,
        }
    }

    pub fn layout(&self) -> CacheLayout {
        CacheLayout {
            total_tokens: self.total_tokens,
            sink: self.k_sink.rows(),
            k_middle: self.k_hat.rows(),
            v_middle: self.v_hat.cols(),
            k_recent: self.k_recent.rows(),
            v_recent: self.v_recent.rows(),
        }
    }

    /// Verifies the structural invariants: sink size, per-stream token
    /// conservation and `G`-aligned value blocks.
    pub fn check_invariants(&self) -> Result<()> {
        let l = self.layout();
        let fail = |msg: String| Err(Error::shape(msg));
        if l.sink != self.total_tokens.min(self.cfg.windows.w_sink) || self.v_sink.rows() != l.sink {
            return fail(format!("sink holds {} of {} tokens", l.sink, self.total_tokens));
        }
        if l.sink + l.k_middle + l.k_recent != l.total_tokens {
            return fail(format!("key partitions {l:?} do not sum to the total"));
        }
        if l.sink + l.v_middle + l.v_recent != l.total_tokens {
            return fail(format!("value partitions {l:?} do not sum to the total"));
        }
        if l.v_middle % self.cfg.quant.group_size() != 0 {
            return fail(format!("{} quantized value tokens are not whole blocks", l.v_middle));
        }
        if self.k_hat.cols() != self.d && self.k_hat.rows() > 0 || self.v_hat.rows() != self.d && l.v_middle > 0 {
            return fail("quantized partitions have the wrong width".into());
        }
        Ok(())
    }

    /// Full logical keys, `total_tokens × d`, with the middle dequantized.
    pub fn reconstruct_keys(&self) -> Matrix {
        let mid = if self.k_hat.rows() == 0 {
            Matrix::zeros(0, self.d)
        } else {
            dequantize_matrix(&self.k_hat)
        };
        join3(&self.k_sink, &mid, &self.k_recent, self.d)
    }

    /// Full logical values, `total_tokens × d`, with the middle dequantized.
    pub fn reconstruct_values(&self) -> Matrix {
        let mid = if self.v_hat.cols() == 0 {
            Matrix::zeros(0, self.d)
        } else {
            dequantize_matrix(&self.v_hat).transpose()
        };
        join3(&self.v_sink, &mid, &self.v_recent, self.d)
    }

    /// Bytes of packed code, scale, auxiliary and mask storage.
    pub fn packed_bytes(&self) -> usize {
        self.k_hat.storage_bytes() + self.v_hat.storage_bytes()
    }

    /// Bytes held in full precision (sink and recent windows).
    pub fn full_precision_bytes(&self) -> usize {
        4 * (self.k_sink.data().len()
            + self.v_sink.data().len()
            + self.k_recent.data().len()
            + self.v_recent.data().len())
    }
}

fn quantize_prefill(m: &Matrix, cfg: &CacheConfig) -> Result<PackedMatrix> {
    if m.rows() == 0 || m.cols() == 0 {
        // also covers widths that only need to divide G when quantizing
        PackedMatrix::empty(m.rows(), m.cols(), GroupingAxis::Inner, cfg.quant)
    } else {
        quantize_matrix_in_phase(m, GroupingAxis::Inner, &cfg.quant, Phase::Prefill)
    }
}

fn join3(a: &Matrix, b: &Matrix, c: &Matrix, d: usize) -> Matrix {
    let fix = |m: &Matrix| if m.rows() == 0 { Matrix::zeros(0, d) } else { m.clone() };
    let ab = concat_rows(&fix(a), &fix(b)).expect("partitions share the width");
    concat_rows(&ab, &fix(c)).expect("partitions share the width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;

    fn rows(n: usize, d: usize, seed: usize) -> Matrix {
        Matrix::from_fn(n, d, |i, j| (((i + seed) * 131 + j * 71) as f32 * 0.013).sin() * 3.0)
    }

    fn cache(n: usize) -> QuantizedKvCache {
        QuantizedKvCache::init_from_prefill(&rows(n, 64, 0), &rows(n, 64, 1), CacheConfig::default()).unwrap()
    }

    #[test]
    fn prefill_300() {
        let c = cache(300);
        let l = c.layout();
        assert_eq!((l.sink, l.k_middle, l.k_recent), (32, 172, 96));
        assert_eq!((l.v_middle, l.v_recent), (160, 108));
        assert_eq!(c.key_views().middle.num_groups(), 172 * 2);
        assert_eq!(c.value_views().middle.rows(), 64);
        c.check_invariants().unwrap();
    }

    #[test]
    fn prefill_within_windows_stays_full_precision() {
        let c = cache(128);
        let l = c.layout();
        assert_eq!((l.sink, l.k_middle, l.v_middle, l.k_recent, l.v_recent), (32, 0, 0, 96, 96));
        assert_eq!(c.key_views().middle.num_groups(), 0);
        assert_eq!(c.reconstruct_keys(), rows(128, 64, 0));
    }

    #[test]
    fn short_prompt_lives_in_sink() {
        let mut c = cache(31);
        let l = c.layout();
        assert_eq!((l.sink, l.k_recent, l.v_recent), (31, 0, 0));
        c.append_token(&[0.5; 64], &[0.25; 64]).unwrap();
        assert_eq!(c.layout().sink, 32);
        c.append_token(&[0.5; 64], &[0.25; 64]).unwrap();
        assert_eq!(c.layout().sink, 32);
        assert_eq!(c.layout().k_recent, 1);
        c.check_invariants().unwrap();
    }

    #[test]
    fn eviction_cadence() {
        let mut c = cache(300);
        let before = c.key_views().sink.clone();
        // v_recent starts at 108 = w_recent + 12, k_recent at w_recent
        for step in 1..=20 {
            c.append_token(&[0.1; 64], &[0.2; 64]).unwrap();
            let l = c.layout();
            assert_eq!(l.v_recent, if step < 20 { 108 + step } else { 96 });
            assert_eq!(l.k_recent, 96 + step);
        }
        for _ in 0..11 {
            c.append_token(&[0.1; 64], &[0.2; 64]).unwrap();
        }
        assert_eq!(c.layout().k_recent, 127);
        c.append_token(&[0.1; 64], &[0.2; 64]).unwrap();
        assert_eq!(c.layout().k_recent, 96);
        assert_eq!(c.layout().k_middle, 172 + 32);
        assert_eq!(c.key_views().sink, &before);
    }

    #[test]
    fn conservation_over_many_appends() {
        let mut c = cache(200);
        let extra = rows(320, 64, 5);
        for i in 0..320 {
            c.append_token(extra.row(i), extra.row(i)).unwrap();
            c.check_invariants().unwrap();
            assert_eq!(c.total_tokens(), 201 + i);
            let l = c.layout();
            assert!((96..128).contains(&l.k_recent) && (96..128).contains(&l.v_recent));
        }
    }

    #[test]
    fn reconstruction_within_group_bounds() {
        let k = rows(300, 64, 0);
        let v = rows(300, 64, 1);
        let cfg = CacheConfig {
            quant: QuantConfig::new(4, 32, QuantMode::Asym).unwrap(),
            ..CacheConfig::default()
        };
        let mut c = QuantizedKvCache::init_from_prefill(&k, &v, cfg).unwrap();
        let more = rows(50, 64, 9);
        for i in 0..50 {
            c.append_token(more.row(i), more.row(i)).unwrap();
        }
        let full_k = concat_rows(&k, &more).unwrap();
        let full_v = concat_rows(&v, &more).unwrap();
        let bound = |m: &PackedMatrix| m.scales().iter().fold(0.0f32, |a, &s| a.max(s)) as f64 * 0.5 + 1e-6;
        let kb = bound(c.key_views().middle);
        let vb = bound(c.value_views().middle);
        assert!(c.reconstruct_keys().max_abs_diff(&full_k).unwrap() <= kb);
        assert!(c.reconstruct_values().max_abs_diff(&full_v).unwrap() <= vb);
        // sink and recent are exact
        let rk = c.reconstruct_keys();
        assert_eq!(rk.slice_rows(0, 32).unwrap(), full_k.slice_rows(0, 32).unwrap());
        assert_eq!(rk.slice_rows(254, 350).unwrap(), full_k.slice_rows(254, 350).unwrap());
    }

    #[test]
    fn hybrid_prefill_decode_groups_are_symmetric() {
        let cfg = CacheConfig {
            quant: QuantConfig::new(2, 32, QuantMode::HybridPrefill).unwrap(),
            ..CacheConfig::default()
        };
        let k = Matrix::from_fn(300, 64, |i, j| if j % 2 == 0 { 5.0 + (i % 3) as f32 } else { 0.1 * j as f32 });
        let mut c = QuantizedKvCache::init_from_prefill(&k, &k, cfg).unwrap();
        let prefill_groups = c.key_views().middle.num_groups();
        assert!(c.key_views().middle.mode_mask().iter().any(|s| !s));
        for i in 0..64 {
            c.append_token(k.row(i), k.row(i)).unwrap();
        }
        let mask = c.key_views().middle.mode_mask();
        assert!(mask.len() > prefill_groups);
        assert!(mask[prefill_groups..].iter().all(|&s| s));
    }

    #[test]
    fn disabled_quantization_keeps_everything() {
        let cfg = CacheConfig {
            quantize: false,
            ..CacheConfig::default()
        };
        let k = rows(300, 48, 0);
        let mut c = QuantizedKvCache::init_from_prefill(&k, &k, cfg).unwrap();
        c.append_token(&[1.0; 48], &[1.0; 48]).unwrap();
        let l = c.layout();
        assert_eq!((l.k_middle, l.v_middle, l.k_recent), (0, 0, 269));
        assert_eq!(c.reconstruct_keys().slice_rows(0, 300).unwrap(), k);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QuantizedKvCache::init_from_prefill(&rows(10, 48, 0), &rows(10, 48, 0), CacheConfig::default()).is_err());
        assert!(QuantizedKvCache::init_from_prefill(&rows(10, 64, 0), &rows(11, 64, 0), CacheConfig::default()).is_err());
        let mut c = cache(10);
        assert!(c.append_token(&[0.0; 63], &[0.0; 64]).is_err());
        assert!(c.append_token(&[f32::NAN; 64], &[0.0; 64]).is_err());
        let bad = CacheConfig {
            windows: WindowConfig { w_sink: 4, w_recent: 16 },
            ..CacheConfig::default()
        };
        assert!(bad.validate(64).is_err());
    }
}
