use serde::{Deserialize, Serialize};

use crate::tensor::DenseMatrix;
use crate::{Error, Result, Scalar};

use super::ModelDims;

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub theta_base: f64,
    pub max_positions: usize,
}

impl Default for RopeParams {
    fn default() -> Self {
        Self {
            theta_base: 10_000.0,
            max_positions: 1 << 20,
        }
    }
}

impl RopeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_base > 1.0 && self.theta_base.is_finite()) {
            return Err(Error::config(format!("theta base {} must exceed 1", self.theta_base)));
        }
        Ok(())
    }
}

/// Rotates each head's channel pairs `(2i, 2i+1)` of `row` in place by
/// `pos · θ^(-2i/d_h)`.
pub(crate) fn rotate_row<T: Scalar>(row: &mut [T], pos: usize, dims: &ModelDims, p: &RopeParams) {
    let dh = dims.d_h();
    for head in row.chunks_exact_mut(dh) {
        for (i, pair) in head.chunks_exact_mut(2).enumerate() {
            let inv_freq = p.theta_base.powf(-((2 * i) as f64) / dh as f64);
            let (sin, cos) = (pos as f64 * inv_freq).sin_cos();
            let (x0, x1) = (pair[0].widen(), pair[1].widen());
            pair[0] = T::narrow(x0 * cos - x1 * sin);
            pair[1] = T::narrow(x0 * sin + x1 * cos);
        }
    }
}

/// Applies rotary position embedding to every row; row `r` sits at
/// `positions[r]`.
pub fn rope_apply<T: Scalar>(
    x: &DenseMatrix<T>,
    positions: &[usize],
    dims: &ModelDims,
    p: &RopeParams,
) -> Result<DenseMatrix<T>> {
    p.validate()?;
    if x.cols() != dims.d() {
        return Err(Error::shape(format!("{} columns for width {}", x.cols(), dims.d())));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&q| q >= p.max_positions) {
        return Err(Error::OutOfRange(format!(
            "position {bad} beyond {} supported",
            p.max_positions
        )));
    }
    let mut data = x.data().to_vec();
    if dims.d() > 0 {
        for (row, &pos) in data.chunks_exact_mut(dims.d()).zip(positions) {
            rotate_row(row, pos, dims, p);
        }
    }
    DenseMatrix::new(x.rows(), x.cols(), data)
}
