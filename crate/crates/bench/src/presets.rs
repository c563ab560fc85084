//! Model shapes used to size synthetic problems.
//!
//! Only the hidden width `d` and head count `n_h` matter here. The built-in
//! table holds three public architectures; anything else can be given as
//! `custom:<d>:<n_h>`.

use std::fmt;
use std::str::FromStr;

use qcache::attention::ModelDims;

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelPreset {
    Llama32_1b,
    Llama31_8b,
    Llama2_13b,
    Custom { d: usize, n_h: usize },
}

/// Name, width and head count of the built-in presets.
pub const PRESET_TABLE: [(&str, usize, usize); 3] = [
    ("llama-3.2-1b", 2048, 32),
    ("llama-3.1-8b", 4096, 32),
    ("llama-2-13b", 5120, 40),
];

impl ModelPreset {
    pub const BUILTIN: [ModelPreset; 3] = [
        ModelPreset::Llama32_1b,
        ModelPreset::Llama31_8b,
        ModelPreset::Llama2_13b,
    ];

    pub fn width(&self) -> usize {
        self.shape().0
    }

    pub fn heads(&self) -> usize {
        self.shape().1
    }

    fn shape(&self) -> (usize, usize) {
        match *self {
            ModelPreset::Llama32_1b => (PRESET_TABLE[0].1, PRESET_TABLE[0].2),
            ModelPreset::Llama31_8b => (PRESET_TABLE[1].1, PRESET_TABLE[1].2),
            ModelPreset::Llama2_13b => (PRESET_TABLE[2].1, PRESET_TABLE[2].2),
            ModelPreset::Custom { d, n_h } => (d, n_h),
        }
    }

    pub fn dims(&self) -> Result<ModelDims> {
        let (d, n_h) = self.shape();
        Ok(ModelDims::new(d, n_h)?)
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModelPreset::Llama32_1b => f.write_str(PRESET_TABLE[0].0),
            ModelPreset::Llama31_8b => f.write_str(PRESET_TABLE[1].0),
            ModelPreset::Llama2_13b => f.write_str(PRESET_TABLE[2].0),
            ModelPreset::Custom { d, n_h } => write!(f, "custom:{d}:{n_h}"),
        }
    }
}

impl FromStr for ModelPreset {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(i) = PRESET_TABLE.iter().position(|(name, _, _)| *name == s) {
            return Ok(ModelPreset::BUILTIN[i]);
        }
        let bad = || {
            BenchError::usage(format!(
                "unknown model `{s}`; expected llama-3.2-1b, llama-3.1-8b, llama-2-13b or custom:<d>:<n_h>"
            ))
        };
        let rest = s.strip_prefix("custom:").ok_or_else(bad)?;
        let (d, n_h) = rest.split_once(':').ok_or_else(bad)?;
        let d = d.parse().map_err(|_| bad())?;
        let n_h = n_h.parse().map_err(|_| bad())?;
        ModelDims::new(d, n_h).map_err(|e| BenchError::usage(e.to_string()))?;
        Ok(ModelPreset::Custom { d, n_h })
    }
}

/// Comma-separated list of presets, e.g. `llama-3.2-1b,custom:256:4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelList(pub Vec<ModelPreset>);

impl FromStr for ModelList {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let models = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if models.is_empty() {
            return Err(BenchError::usage("empty model list"));
        }
        Ok(ModelList(models))
    }
}

impl Default for ModelList {
    fn default() -> Self {
        ModelList(ModelPreset::BUILTIN.to_vec())
    }
}

/// Comma-separated token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLens(pub Vec<usize>);

impl SeqLens {
    /// 512, 1024, ..., 131072.
    pub fn doubling_grid() -> Self {
        SeqLens((9..=17).map(|e| 1usize << e).collect())
    }
}

impl FromStr for SeqLens {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let lens = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| BenchError::usage(format!("bad sequence length `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if lens.is_empty() {
            return Err(BenchError::usage("empty sequence length list"));
        }
        Ok(SeqLens(lens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in ModelPreset::BUILTIN {
            assert_eq!(p.to_string().parse::<ModelPreset>().unwrap(), p);
        }
        let c: ModelPreset = "custom:256:4".parse().unwrap();
        assert_eq!(c, ModelPreset::Custom { d: 256, n_h: 4 });
        assert_eq!(c.to_string(), "custom:256:4");
    }

    #[test]
    fn builtin_shapes() {
        let dims = ModelPreset::Llama2_13b.dims().unwrap();
        assert_eq!((dims.d(), dims.n_h(), dims.d_h()), (5120, 40, 128));
        assert_eq!(ModelPreset::Llama31_8b.width(), 4096);
        assert_eq!(ModelPreset::Llama32_1b.heads(), 32);
    }

    #[test]
    fn bad_names() {
        for s in ["llama", "custom:256", "custom:255:4", "custom:x:4", "custom:256:0"] {
            assert!(s.parse::<ModelPreset>().is_err(), "{s}");
        }
    }

    #[test]
    fn lists() {
        let l: ModelList = "llama-3.2-1b, custom:64:2".parse().unwrap();
        assert_eq!(l.0.len(), 2);
        assert_eq!("512,1024".parse::<SeqLens>().unwrap().0, vec![512, 1024]);
        assert!("512,0".parse::<SeqLens>().is_err());
        assert!("".parse::<SeqLens>().is_err());
        let grid = SeqLens::doubling_grid().0;
        assert_eq!((grid[0], *grid.last().unwrap(), grid.len()), (512, 131072, 9));
    }
}
