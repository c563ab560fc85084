use crate::{Error, Matrix, Result};

use super::AttentionWeights;

/// Per-channel key normalization factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    norm_k: Vec<f32>,
    folded: bool,
}

impl NormState {
    /// Factors of one, i.e. normalization off.
    pub fn identity(d: usize) -> Self {
        Self {
            norm_k: vec![1.0; d],
            folded: false,
        }
    }

    /// Wraps explicit factors after checking they are positive and equal
    /// within each channel pair.
    pub fn from_factors(norm_k: Vec<f32>) -> Result<Self> {
        if norm_k.len() % 2 != 0 {
            return Err(Error::shape("normalization factors must come in channel pairs"));
        }
        if let Some(i) = norm_k.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("normalization factor {i} is {}", norm_k[i])));
        }
        if norm_k.chunks_exact(2).any(|p| p[0] != p[1]) {
            return Err(Error::config("normalization factors differ within a channel pair"));
        }
        Ok(Self {
            norm_k,
            folded: false,
        })
    }

    pub fn factors(&self) -> &[f32] {
        &self.norm_k
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }
}

/// `sqrt(max |K|)` over each channel pair and all tokens; pairs whose max is
/// zero get a factor of one.
pub fn compute_norm(k: &Matrix) -> Result<NormState> {
    if k.cols() % 2 != 0 {
        return Err(Error::shape(format!("odd key width {}", k.cols())));
    }
    let mut max = vec![0.0f32; k.cols() / 2];
    for i in 0..k.rows() {
        for (m, pair) in max.iter_mut().zip(k.row(i).chunks_exact(2)) {
            *m = m.max(pair[0].abs()).max(pair[1].abs());
        }
    }
    let norm_k = max
        .iter()
        .flat_map(|&m| {
            let f = if m == 0.0 { 1.0 } else { m.sqrt() };
            [f, f]
        })
        .collect();
    Ok(NormState {
        norm_k,
        folded: false,
    })
}

/// Divides the columns of `W_K` and multiplies the columns of `W_Q` by the
/// factors, leaving every query-key dot product unchanged. Marks `norm` as
/// folded; folding twice is an error.
pub fn fold_normalization(w: &AttentionWeights, norm: &mut NormState) -> Result<AttentionWeights> {
    if norm.folded {
        return Err(Error::AlreadyFolded);
    }
    NormState::from_factors(norm.norm_k.clone())?;
    let out = AttentionWeights {
        w_q: w.w_q.scale_cols(&norm.norm_k)?,
        w_k: w.w_k.div_cols(&norm.norm_k)?,
        w_v: w.w_v.clone(),
        w_o: w.w_o.clone(),
    };
    norm.folded = true;
    Ok(out)
}

/// Inverse of [`fold_normalization`].
pub fn unfold_normalization(w: &AttentionWeights, norm: &mut NormState) -> Result<AttentionWeights> {
    if !norm.folded {
        return Err(Error::NotFolded);
    }
    let out = AttentionWeights {
        w_q: w.w_q.div_cols(&norm.norm_k)?,
        w_k: w.w_k.scale_cols(&norm.norm_k)?,
        w_v: w.w_v.clone(),
        w_o: w.w_o.clone(),
    };
    norm.folded = false;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_ref;

    fn weights(d: usize) -> AttentionWeights {
        let m = |s: usize| Matrix::from_fn(d, d, |i, j| (((i + s) * 37 + j * 11) as f32 * 0.17).sin() * 0.4);
        AttentionWeights::new(m(1), m(2), m(3), m(4)).unwrap()
    }

    #[test]
    fn pair_max_of_four_gives_two() {
        let k = Matrix::from_rows(&[&[1.0, -4.0, 0.5, 0.0], &[3.0, 2.0, -0.25, 0.0]]).unwrap();
        let n = compute_norm(&k).unwrap();
        assert_eq!(n.factors(), &[2.0, 2.0, 0.5f32.sqrt(), 0.5f32.sqrt()]);
    }

    #[test]
    fn zero_keys_floor_at_one() {
        let n = compute_norm(&Matrix::zeros(3, 6)).unwrap();
        assert_eq!(n.factors(), &[1.0; 6]);
    }

    #[test]
    fn identity_fold_leaves_weights() {
        let w = weights(8);
        let mut n = NormState::identity(8);
        assert_eq!(fold_normalization(&w, &mut n).unwrap(), w);
        assert!(n.is_folded());
        assert!(matches!(fold_normalization(&w, &mut n), Err(Error::AlreadyFolded)));
    }

    #[test]
    fn fold_unfold_within_one_ulp() {
        let w = weights(8);
        let mut n = NormState::from_factors(vec![1.7, 1.7, 0.3, 0.3, 9.1, 9.1, 1.0, 1.0]).unwrap();
        let f = fold_normalization(&w, &mut n).unwrap();
        let back = unfold_normalization(&f, &mut n).unwrap();
        assert!(matches!(unfold_normalization(&back, &mut n), Err(Error::NotFolded)));
        for (m0, m1) in [(&w.w_q, &back.w_q), (&w.w_k, &back.w_k)] {
            for (a, b) in m0.data().iter().zip(m1.data()) {
                assert!((a.to_bits() as i64 - b.to_bits() as i64).abs() <= 1, "{a} {b}");
            }
        }
    }

    #[test]
    fn folded_scores_match() {
        let d = 8;
        let w = weights(d);
        let x = Matrix::from_fn(5, d, |i, j| ((i * 5 + j) as f32 * 0.9).cos());
        let mut n = NormState::from_factors(vec![3.0, 3.0, 0.2, 0.2, 1.1, 1.1, 7.0, 7.0]).unwrap();
        let f = fold_normalization(&w, &mut n).unwrap();
        let s = |wq: &Matrix, wk: &Matrix| {
            let q = matmul_ref(&x, wq).unwrap();
            let k = matmul_ref(&x, wk).unwrap();
            matmul_ref(&q, &k.transpose()).unwrap()
        };
        let (a, b) = (s(&w.w_q, &w.w_k), s(&f.w_q, &f.w_k));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-4 * u.abs().max(1.0), "{u} {v}");
        }
    }

    #[test]
    fn rejects_bad_factors() {
        assert!(NormState::from_factors(vec![1.0, 2.0]).is_err());
        assert!(NormState::from_factors(vec![0.0, 0.0]).is_err());
        assert!(NormState::from_factors(vec![1.0]).is_err());
    }
}
