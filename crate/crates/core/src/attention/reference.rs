//! Full-precision multi-head attention over a whole sequence, generic over the
//! scalar type. With `f64` this is the shadow model the decode path is checked
//! against.

use crate::tensor::{matmul_ref, DenseMatrix};
use crate::{Error, Result, Scalar};

use super::rope::rope_apply;
use super::{AttentionWeights, ModelDims, RopeParams};

/// Causal attention of `q` over `k`/`v` (all `N × d`, already rotated). Row
/// `i` attends to rows `0..=i`. Scores, softmax and the weighted sum are
/// evaluated in `f64` and rounded once.
pub fn causal_attention<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    dims: &ModelDims,
) -> Result<DenseMatrix<T>> {
    let (n, d) = (q.rows(), dims.d());
    for m in [q, k, v] {
        if m.rows() != n || m.cols() != d {
            return Err(Error::shape(format!(
                "attention operand {}x{}, expected {n}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    let dh = dims.d_h();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut s = vec![0.0f64; n];
    for i in 0..n {
        for h in 0..dims.n_h() {
            let cols = h * dh..(h + 1) * dh;
            let qi = &q.row(i)[cols.clone()];
            for (j, sj) in s[..=i].iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *sj = qi.iter().zip(kj).map(|(a, b)| a.widen() * b.widen()).sum::<f64>() * scale;
            }
            let max = s[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for sj in &mut s[..=i] {
                *sj = (*sj - max).exp();
                total += *sj;
            }
            for c in cols {
                let acc: f64 = (0..=i).map(|j| s[j] * v.get(j, c).widen()).sum();
                out[i * d + c] = T::narrow(acc / total);
            }
        }
    }
    DenseMatrix::new(n, d, out)
}

/// `MHA(x)` with RoPE at positions `0..N` and a causal mask.
pub fn mha<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &AttentionWeights<T>,
    dims: &ModelDims,
    rope: &RopeParams,
) -> Result<DenseMatrix<T>> {
    let pos: Vec<usize> = (0..x.rows()).collect();
    let q = rope_apply(&matmul_ref(x, &w.w_q)?, &pos, dims, rope)?;
    let k = rope_apply(&matmul_ref(x, &w.w_k)?, &pos, dims, rope)?;
    let v = matmul_ref(x, &w.w_v)?;
    matmul_ref(&causal_attention(&q, &k, &v, dims)?, &w.w_o)
}
