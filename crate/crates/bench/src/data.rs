//! Seeded synthetic matrices.

use std::fmt;
use std::str::FromStr;

use qcache::Matrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Gaussian {
        sigma: f32,
    },
    /// Gaussian entries with `outlier_channels` whole columns multiplied by
    /// `outlier_scale`, the pattern seen in attention keys.
    GaussianWithChannelOutliers {
        sigma: f32,
        outlier_channels: usize,
        outlier_scale: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDataSpec {
    pub distribution: Distribution,
    pub seed: u64,
}

/// A generator for one named use of a seed. Different streams of the same
/// seed are independent.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `n` samples of `N(0, sigma²)`.
pub fn gaussian_vec(r: &mut ChaCha8Rng, n: usize, sigma: f32) -> Vec<f32> {
    let normal = Normal::new(0.0f32, sigma).expect("sigma is finite and non-negative");
    (0..n).map(|_| normal.sample(r)).collect()
}

pub fn gaussian_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f32) -> Matrix {
    Matrix::new(rows, cols, gaussian_vec(r, rows * cols, sigma)).expect("length matches")
}

impl SyntheticDataSpec {
    pub fn gaussian(sigma: f32, seed: u64) -> Self {
        Self {
            distribution: Distribution::Gaussian { sigma },
            seed,
        }
    }

    pub fn with_outliers(sigma: f32, outlier_channels: usize, outlier_scale: f32, seed: u64) -> Self {
        Self {
            distribution: Distribution::GaussianWithChannelOutliers {
                sigma,
                outlier_channels,
                outlier_scale,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigma = match self.distribution {
            Distribution::Gaussian { sigma } => sigma,
            Distribution::GaussianWithChannelOutliers {
                sigma,
                outlier_scale,
                ..
            } => {
                if !(outlier_scale >= 1.0 && outlier_scale.is_finite()) {
                    return Err(BenchError::usage(format!(
                        "outlier scale {outlier_scale} must be a finite value of at least 1"
                    )));
                }
                sigma
            }
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(BenchError::usage(format!("sigma {sigma} must be finite and non-negative")));
        }
        Ok(())
    }

    /// The outlier columns for a matrix with `cols` columns, ascending.
    pub fn outlier_channels(&self, cols: usize) -> Vec<usize> {
        match self.distribution {
            Distribution::Gaussian { .. } => Vec::new(),
            Distribution::GaussianWithChannelOutliers {
                outlier_channels, ..
            } => {
                let mut r = rng(self.seed, 1);
                let mut picked = index::sample(&mut r, cols, outlier_channels.min(cols)).into_vec();
                picked.sort_unstable();
                picked
            }
        }
    }

    pub fn generate(&self, rows: usize, cols: usize) -> Result<Matrix> {
        self.validate()?;
        let (sigma, scale) = match self.distribution {
            Distribution::Gaussian { sigma } => (sigma, 1.0),
            Distribution::GaussianWithChannelOutliers {
                sigma,
                outlier_scale,
                ..
            } => (sigma, outlier_scale),
        };
        let mut data = gaussian_vec(&mut rng(self.seed, 0), rows * cols, sigma);
        for c in self.outlier_channels(cols) {
            for v in data.iter_mut().skip(c).step_by(cols) {
                *v *= scale;
            }
        }
        Ok(Matrix::new(rows, cols, data)?)
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Gaussian { .. } => f.write_str("gaussian"),
            Distribution::GaussianWithChannelOutliers { .. } => f.write_str("outliers"),
        }
    }
}

/// Distribution family named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Gaussian,
    Outliers,
}

impl FromStr for DistKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DistKind::Gaussian),
            "outliers" => Ok(DistKind::Outliers),
            other => Err(BenchError::usage(format!(
                "unknown distribution `{other}`; expected gaussian or outliers"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = SyntheticDataSpec::gaussian(1.0, 7).generate(4, 8).unwrap();
        let b = SyntheticDataSpec::gaussian(1.0, 7).generate(4, 8).unwrap();
        let c = SyntheticDataSpec::gaussian(1.0, 8).generate(4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn outlier_columns_are_scaled() {
        let base = SyntheticDataSpec::gaussian(1.0, 3).generate(16, 64).unwrap();
        let spec = SyntheticDataSpec::with_outliers(1.0, 4, 50.0, 3);
        let m = spec.generate(16, 64).unwrap();
        let chans = spec.outlier_channels(64);
        assert_eq!(chans.len(), 4);
        for i in 0..16 {
            for j in 0..64 {
                let want = if chans.contains(&j) { base.get(i, j) * 50.0 } else { base.get(i, j) };
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    #[test]
    fn streams_differ() {
        let a = gaussian_vec(&mut rng(1, 0), 4, 1.0);
        let b = gaussian_vec(&mut rng(1, 1), 4, 1.0);
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SyntheticDataSpec::with_outliers(1.0, 2, 0.5, 0).validate().is_err());
        assert!(SyntheticDataSpec::gaussian(f32::NAN, 0).validate().is_err());
        assert!(SyntheticDataSpec::gaussian(-1.0, 0).generate(1, 1).is_err());
    }
}
