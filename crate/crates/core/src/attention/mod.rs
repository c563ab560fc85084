//! Multi-head attention over the quantized cache.
//!
//! Heads are `n_h` contiguous column blocks of width `d_h`. Prefill runs full
//! precision causal attention, then builds the cache from the rotated keys
//! divided by the per-channel factors and folds those factors into `W_K` and
//! `W_Q`. Each decode step scores the query against the three cache segments
//! (sink, quantized middle through [`qgemv_inner`], recent), softmaxes over
//! all positions and mixes the values the same way.

mod norm;
pub mod reference;
mod rope;

pub use norm::{compute_norm, fold_normalization, unfold_normalization, NormState};
pub use rope::{rope_apply, RopeParams};

use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, QuantizedKvCache};
use crate::kernels::qgemv_inner_into;
use crate::tensor::{matmul_ref, softmax_row, vecmat, DenseMatrix};
use crate::{Error, Matrix, Result, Scalar, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DimsRepr", into = "DimsRepr")]
pub struct ModelDims {
    d: usize,
    n_h: usize,
}

#[derive(Serialize, Deserialize)]
struct DimsRepr {
    d: usize,
    n_h: usize,
}

impl TryFrom<DimsRepr> for ModelDims {
    type Error = Error;
    fn try_from(r: DimsRepr) -> Result<Self> {
        ModelDims::new(r.d, r.n_h)
    }
}

impl From<ModelDims> for DimsRepr {
    fn from(m: ModelDims) -> Self {
        DimsRepr { d: m.d, n_h: m.n_h }
    }
}

impl ModelDims {
    pub fn new(d: usize, n_h: usize) -> Result<Self> {
        if d == 0 || n_h == 0 || d % n_h != 0 {
            return Err(Error::config(format!("width {d} does not split into {n_h} heads")));
        }
        if (d / n_h) % 2 != 0 {
            return Err(Error::config(format!("head width {} is odd", d / n_h)));
        }
        Ok(Self { d, n_h })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_h(&self) -> usize {
        self.n_h
    }

    pub fn d_h(&self) -> usize {
        self.d / self.n_h
    }
}

/// Projection weights, each `d × d`, applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: Scalar = f32> {
    pub w_q: DenseMatrix<T>,
    pub w_k: DenseMatrix<T>,
    pub w_v: DenseMatrix<T>,
    pub w_o: DenseMatrix<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(
        w_q: DenseMatrix<T>,
        w_k: DenseMatrix<T>,
        w_v: DenseMatrix<T>,
        w_o: DenseMatrix<T>,
    ) -> Result<Self> {
        let d = w_q.rows();
        for m in [&w_q, &w_k, &w_v, &w_o] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::shape(format!(
                    "weight {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub cache: CacheConfig,
    /// Per-channel key normalization.
    pub normalize: bool,
    pub rope: RopeParams,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            cache: CacheConfig::default(),
            normalize: true,
            rope: RopeParams::default(),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        self.rope.validate()?;
        self.cache.validate(dims.d())?;
        let g = self.cache.quant.group_size();
        if self.cache.quantize && dims.d_h() % g != 0 {
            return Err(Error::config(format!(
                "head width {} is not a multiple of G = {g}",
                dims.d_h()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub output: Matrix,
    pub cache: QuantizedKvCache,
    pub norm: NormState,
    /// Weights with the key normalization folded in; use these for decode.
    pub weights: AttentionWeights,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub output: Vector,
    /// Per head, `q · k` for every cached position in token order, before
    /// the `1/√d_h` scaling.
    pub scores: Vec<Vec<f32>>,
    /// Per head, the softmax of the scaled scores.
    pub probs: Vec<Vec<f32>>,
}

fn check_weights(w: &AttentionWeights, dims: &ModelDims) -> Result<()> {
    if w.width() != dims.d() {
        return Err(Error::shape(format!(
            "weights of width {} for model width {}",
            w.width(),
            dims.d()
        )));
    }
    Ok(())
}

/// Processes an `N × d` prompt.
pub fn prefill(
    x: &Matrix,
    weights: &AttentionWeights,
    dims: &ModelDims,
    cfg: &AttentionConfig,
) -> Result<PrefillOutput> {
    cfg.validate(dims)?;
    check_weights(weights, dims)?;
    if x.rows() == 0 {
        return Err(Error::Empty("prefill needs at least one token"));
    }
    if x.cols() != dims.d() {
        return Err(Error::shape(format!("{} input columns for width {}", x.cols(), dims.d())));
    }
    let pos: Vec<usize> = (0..x.rows()).collect();
    let q = rope_apply(&matmul_ref(x, &weights.w_q)?, &pos, dims, &cfg.rope)?;
    let k = rope_apply(&matmul_ref(x, &weights.w_k)?, &pos, dims, &cfg.rope)?;
    let v = matmul_ref(x, &weights.w_v)?;
    let output = matmul_ref(&reference::causal_attention(&q, &k, &v, dims)?, &weights.w_o)?;

    let mut norm = if cfg.normalize {
        compute_norm(&k)?
    } else {
        NormState::identity(dims.d())
    };
    let k_cached = if cfg.normalize { k.div_cols(norm.factors())? } else { k };
    let cache = QuantizedKvCache::init_from_prefill(&k_cached, &v, cfg.cache)?;
    let weights = fold_normalization(weights, &mut norm)?;
    Ok(PrefillOutput {
        output,
        cache,
        norm,
        weights,
    })
}

/// Generates the output for one new token and appends its key and value to
/// the cache. `weights` are the folded weights returned by [`prefill`].
pub fn decode_step(
    x: &[f32],
    cache: &mut QuantizedKvCache,
    weights: &AttentionWeights,
    dims: &ModelDims,
    cfg: &AttentionConfig,
) -> Result<DecodeOutput> {
    cfg.validate(dims)?;
    check_weights(weights, dims)?;
    if cache.width() != dims.d() || cache.config() != &cfg.cache {
        return Err(Error::config("cache was built for a different configuration"));
    }
    let pos = cache.total_tokens();
    if pos >= cfg.rope.max_positions {
        return Err(Error::OutOfRange(format!("position {pos}")));
    }
    let mut q = vecmat(x, &weights.w_q)?;
    let mut k = vecmat(x, &weights.w_k)?;
    let v = vecmat(x, &weights.w_v)?;
    rope::rotate_row(&mut q, pos, dims, &cfg.rope);
    rope::rotate_row(&mut k, pos, dims, &cfg.rope);
    cache.append_token(&k, &v)?;

    let dh = dims.d_h();
    let scale = 1.0 / (dh as f32).sqrt();
    let keys = cache.key_views();
    let values = cache.value_views();
    let n_sink = keys.sink.rows();
    let (k_mid, v_mid) = (keys.middle.rows(), values.middle.cols());
    let total = cache.total_tokens();

    let mut attended = vec![0.0f32; dims.d()];
    let mut all_scores = Vec::with_capacity(dims.n_h());
    let mut all_probs = Vec::with_capacity(dims.n_h());
    for h in 0..dims.n_h() {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        let mut scores = vec![0.0f32; total];
        for t in 0..n_sink {
            scores[t] = dot_f32(qh, &keys.sink.row(t)[cols.clone()]);
        }
        if k_mid > 0 {
            let view = keys.middle.view().slice_cols(cols.clone())?;
            qgemv_inner_into(qh, &view, &mut scores[n_sink..n_sink + k_mid])?;
        }
        for (t, s) in scores[n_sink + k_mid..].iter_mut().enumerate() {
            *s = dot_f32(qh, &keys.recent.row(t)[cols.clone()]);
        }
        let probs = softmax_row(&scores, scale)?.into_vec();

        let mut mid = vec![0.0f32; dh];
        if v_mid > 0 {
            let view = values.middle.view().slice_rows(cols.clone())?;
            qgemv_inner_into(&probs[n_sink..n_sink + v_mid], &view, &mut mid)?;
        }
        for (c, out) in cols.clone().zip(&mut attended[cols.clone()]) {
            let mut acc = mid[c - h * dh] as f64;
            for (t, &p) in probs[..n_sink].iter().enumerate() {
                acc += p as f64 * values.sink.get(t, c) as f64;
            }
            for (t, &p) in probs[n_sink + v_mid..].iter().enumerate() {
                acc += p as f64 * values.recent.get(t, c) as f64;
            }
            *out = acc as f32;
        }
        all_scores.push(scores);
        all_probs.push(probs);
    }
    Ok(DecodeOutput {
        output: Vector::new(vecmat(&attended, &weights.w_o)?)?,
        scores: all_scores,
        probs: all_probs,
    })
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    crate::tensor::dot(a, b) as f32
}
