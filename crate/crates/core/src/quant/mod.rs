//! Group-wise `b`-bit quantization.
//!
//! A group is a run of `G` values sharing one `f32` scale and one 32-bit
//! auxiliary word. Asymmetric groups store their zero point (the group
//! minimum) in the auxiliary word as raw `f32` bits; symmetric groups store
//! unsigned magnitudes and pack the `G` sign bits into the same word. Hybrid
//! mode picks, per group, whichever of the two reconstructs the group with the
//! lower sum of squared errors and records the choice in a one-bit mask.

mod format;
mod group;
mod pack;
mod packed;

pub use format::{FORMAT_MAGIC, FORMAT_VERSION, HEADER_LEN};
pub use group::{
    dequantize_group, quantize_group_asym, quantize_group_hybrid, quantize_group_sym,
    GroupEncoding, GroupErrorStats,
};
pub use pack::{pack_codes, pack_signs, unpack_codes, unpack_signs};
pub use packed::{
    dequantize_matrix, quantize_matrix, quantize_matrix_in_phase, GroupRef, PackedMatrix,
    PackedView,
};

pub(crate) use packed::{dequantize_group_ref, dequantize_one};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest supported group; also the width of the auxiliary word in bits.
pub const MAX_GROUP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Asym,
    Sym,
    Hybrid,
    /// Hybrid while quantizing prefill tokens, symmetric afterwards.
    HybridPrefill,
}

impl QuantMode {
    /// Whether packed matrices in this mode carry a per-group mode mask.
    pub fn has_mask(self) -> bool {
        matches!(self, QuantMode::Hybrid | QuantMode::HybridPrefill)
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            QuantMode::Asym => 0,
            QuantMode::Sym => 1,
            QuantMode::Hybrid => 2,
            QuantMode::HybridPrefill => 3,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => QuantMode::Asym,
            1 => QuantMode::Sym,
            2 => QuantMode::Hybrid,
            3 => QuantMode::HybridPrefill,
            other => return Err(Error::format(format!("unknown mode byte {other}"))),
        })
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asym" => Ok(QuantMode::Asym),
            "sym" => Ok(QuantMode::Sym),
            "hybrid" => Ok(QuantMode::Hybrid),
            "hybrid-prefill" => Ok(QuantMode::HybridPrefill),
            other => Err(Error::config(format!("unknown quantization mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantMode::Asym => "asym",
            QuantMode::Sym => "sym",
            QuantMode::Hybrid => "hybrid",
            QuantMode::HybridPrefill => "hybrid-prefill",
        })
    }
}

/// Inference phase in which a group is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Which logical dimension quantization groups run along.
///
/// `Inner`: groups are contiguous runs within a row (row-major group order
/// over `(row, group)`). `Outer`: groups run down a column (group order over
/// `(col, group)`). The fused kernels compute `out = P · a` for a logical
/// `N_out × K` matrix `P`, so `Inner` groups lie along the reduction
/// dimension and `Outer` groups across it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingAxis {
    Inner,
    Outer,
}

impl GroupingAxis {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            GroupingAxis::Inner => 0,
            GroupingAxis::Outer => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(GroupingAxis::Inner),
            1 => Ok(GroupingAxis::Outer),
            other => Err(Error::format(format!("unknown grouping axis byte {other}"))),
        }
    }
}

impl std::str::FromStr for GroupingAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(GroupingAxis::Inner),
            "outer" => Ok(GroupingAxis::Outer),
            other => Err(Error::config(format!("unknown grouping axis `{other}`"))),
        }
    }
}

/// Bit width, group size and mode. Rounding is always round-half-to-even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "QuantConfigRepr", into = "QuantConfigRepr")]
pub struct QuantConfig {
    bits: u8,
    group_size: usize,
    mode: QuantMode,
}

#[derive(Serialize, Deserialize)]
struct QuantConfigRepr {
    bits: u8,
    group_size: usize,
    mode: QuantMode,
}

impl TryFrom<QuantConfigRepr> for QuantConfig {
    type Error = Error;
    fn try_from(r: QuantConfigRepr) -> Result<Self> {
        QuantConfig::new(r.bits, r.group_size, r.mode)
    }
}

impl From<QuantConfig> for QuantConfigRepr {
    fn from(c: QuantConfig) -> Self {
        QuantConfigRepr {
            bits: c.bits,
            group_size: c.group_size,
            mode: c.mode,
        }
    }
}

/// 2-bit hybrid with G = 32.
impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 32,
            mode: QuantMode::Hybrid,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize, mode: QuantMode) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::config(format!("bit width {bits} outside 1..=8")));
        }
        if ![8, 16, 32].contains(&group_size) {
            return Err(Error::config(format!(
                "group size {group_size} not one of 8, 16, 32"
            )));
        }
        if mode.has_mask() && group_size != MAX_GROUP {
            return Err(Error::config(format!(
                "{mode} mode packs signs and zero points into one 32-bit word and needs G = 32"
            )));
        }
        Ok(Self {
            bits,
            group_size,
            mode,
        })
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn with_mode(self, mode: QuantMode) -> Result<Self> {
        Self::new(self.bits, self.group_size, mode)
    }

    /// Largest code value, `2^b - 1`.
    #[inline]
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Bytes of packed codes per group. Always integral since `G · b` is a
    /// multiple of 8 for every allowed `G`.
    #[inline]
    pub fn group_code_bytes(&self) -> usize {
        self.group_size * self.bits as usize / 8
    }

    /// The per-group selection rule actually applied in `phase`.
    pub fn effective_mode(&self, phase: Phase) -> QuantMode {
        match (self.mode, phase) {
            (QuantMode::HybridPrefill, Phase::Prefill) => QuantMode::Hybrid,
            (QuantMode::HybridPrefill, Phase::Decode) => QuantMode::Sym,
            (m, _) => m,
        }
    }
}

/// Storage cost of `elements` quantized values: `b` bits per code, a 32-bit
/// scale and a 32-bit auxiliary word per group, and one mask bit per group in
/// the hybrid modes.
///
/// `elements` must be a multiple of the group size.
pub fn estimate_packed_bits(cfg: &QuantConfig, elements: u64) -> u64 {
    let g = cfg.group_size() as u64;
    debug_assert_eq!(elements % g, 0, "elements must be a multiple of G");
    let groups = elements / g;
    let mask = if cfg.mode().has_mask() { groups } else { 0 };
    elements * cfg.bits() as u64 + groups * (32 + 32) + mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(0, 32, QuantMode::Sym).is_err());
        assert!(QuantConfig::new(9, 32, QuantMode::Sym).is_err());
        assert!(QuantConfig::new(2, 24, QuantMode::Sym).is_err());
        assert!(QuantConfig::new(2, 16, QuantMode::Hybrid).is_err());
        assert!(QuantConfig::new(2, 16, QuantMode::HybridPrefill).is_err());
        assert!(QuantConfig::new(2, 16, QuantMode::Asym).is_ok());
        assert!(QuantConfig::new(8, 8, QuantMode::Sym).is_ok());
    }

    #[test]
    fn config_json_is_validated() {
        let ok: QuantConfig =
            serde_json::from_str(r#"{"bits":2,"group_size":32,"mode":"hybrid-prefill"}"#).unwrap();
        assert_eq!(ok.mode(), QuantMode::HybridPrefill);
        assert!(serde_json::from_str::<QuantConfig>(r#"{"bits":2,"group_size":8,"mode":"hybrid"}"#)
            .is_err());
    }

    #[test]
    fn packed_bits_formula() {
        let hybrid = QuantConfig::new(2, 32, QuantMode::Hybrid).unwrap();
        assert_eq!(estimate_packed_bits(&hybrid, 32), 129);
        let sym = hybrid.with_mode(QuantMode::Sym).unwrap();
        assert_eq!(estimate_packed_bits(&sym, 32), 128);
        assert_eq!(estimate_packed_bits(&hybrid, 0), 0);
    }

    #[test]
    fn hybrid_prefill_phases() {
        let c = QuantConfig::new(2, 32, QuantMode::HybridPrefill).unwrap();
        assert_eq!(c.effective_mode(Phase::Prefill), QuantMode::Hybrid);
        assert_eq!(c.effective_mode(Phase::Decode), QuantMode::Sym);
        let a = c.with_mode(QuantMode::Asym).unwrap();
        assert_eq!(a.effective_mode(Phase::Decode), QuantMode::Asym);
    }
}
