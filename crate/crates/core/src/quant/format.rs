//! Binary dump of a [`PackedMatrix`].
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "IQKV"
//!      4     4  version (u32) = 1
//!      8     1  bits
//!      9     1  group size
//!     10     1  mode (0 asym, 1 sym, 2 hybrid, 3 hybrid-prefill)
//!     11     1  axis (0 inner, 1 outer)
//!     12     8  rows (u64)
//!     20     8  cols (u64)
//!     28        codes, n_groups · G·b/8 bytes
//!               scales, n_groups f32
//!               aux words, n_groups u32
//!               mode mask, ceil(n_groups/8) bytes (hybrid modes only)
//! ```

use std::fs;
use std::path::Path;

use crate::{Error, Result};

use super::packed::PackedMatrix;
use super::{GroupingAxis, QuantConfig, QuantMode};

pub const FORMAT_MAGIC: [u8; 4] = *b"IQKV";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

impl PackedMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut out = Vec::with_capacity(HEADER_LEN + self.storage_bytes());
        out.extend_from_slice(&FORMAT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(cfg.bits());
        out.push(cfg.group_size() as u8);
        out.push(cfg.mode().to_byte());
        out.push(self.axis().to_byte());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols() as u64).to_le_bytes());
        out.extend_from_slice(self.code_bytes());
        for s in self.scales() {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for a in self.aux_words() {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out.extend_from_slice(self.mask_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FORMAT_MAGIC {
            return Err(Error::format("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let head = r.take(4)?;
        let cfg = QuantConfig::new(head[0], head[1] as usize, QuantMode::from_byte(head[2])?)
            .map_err(|e| Error::format(e.to_string()))?;
        let axis = GroupingAxis::from_byte(head[3])?;
        let rows = usize::try_from(r.u64()?).map_err(|_| Error::format("row count overflows"))?;
        let cols = usize::try_from(r.u64()?).map_err(|_| Error::format("col count overflows"))?;

        let g = cfg.group_size();
        let grouped = match axis {
            GroupingAxis::Inner => cols,
            GroupingAxis::Outer => rows,
        };
        if grouped % g != 0 && rows != 0 && cols != 0 {
            return Err(Error::format(format!(
                "grouped dimension {grouped} is not a multiple of {g}"
            )));
        }
        let n_groups = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("element count overflows"))?
            / g;
        let code_len = n_groups
            .checked_mul(cfg.group_code_bytes())
            .ok_or_else(|| Error::format("code section overflows"))?;
        let mask_len = if cfg.mode().has_mask() {
            n_groups.div_ceil(8)
        } else {
            0
        };
        let body = code_len as u128 + 8 * n_groups as u128 + mask_len as u128;
        if body != r.remaining() as u128 {
            return Err(Error::format(format!(
                "body is {} bytes, header implies {body}",
                r.remaining()
            )));
        }

        let codes = r.take(code_len)?.to_vec();
        let scales: Vec<f32> = r
            .take(4 * n_groups)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let aux: Vec<u32> = r
            .take(4 * n_groups)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = r.take(mask_len)?.to_vec();

        if let Some(i) = scales.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::format(format!("group {i} has invalid scale {}", scales[i])));
        }
        if n_groups % 8 != 0 && mask_len > 0 && mask[mask_len - 1] >> (n_groups % 8) != 0 {
            return Err(Error::format("mask padding bits are set"));
        }
        let m = PackedMatrix::from_parts(rows, cols, axis, cfg, codes, scales, aux, mask);
        for gi in 0..n_groups {
            let grp = m.group(gi);
            let ok = if grp.is_symmetric {
                g == 32 || grp.aux >> g == 0
            } else {
                f32::from_bits(grp.aux).is_finite()
            };
            if !ok {
                return Err(Error::format(format!("group {gi} has a malformed aux word")));
            }
        }
        Ok(m)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_matrix, GroupingAxis};
    use crate::Matrix;

    fn sample(mode: QuantMode, axis: GroupingAxis) -> PackedMatrix {
        let cfg = QuantConfig::new(3, 32, mode).unwrap();
        let m = Matrix::from_fn(64, 96, |i, j| ((i * 7 + j * 13) as f32 * 0.11).cos() + (j % 5) as f32 * 0.3);
        quantize_matrix(&m, axis, &cfg).unwrap()
    }

    #[test]
    fn header_layout() {
        let p = sample(QuantMode::Hybrid, GroupingAxis::Inner);
        let b = p.to_bytes();
        assert_eq!(&b[..4], b"IQKV");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 32, 2, 0]);
        assert_eq!(&b[12..20], &64u64.to_le_bytes());
        assert_eq!(&b[20..28], &96u64.to_le_bytes());
        assert_eq!(b.len(), HEADER_LEN + 192 * 12 + 192 * 8 + 24);
    }

    #[test]
    fn roundtrip_all_modes() {
        for mode in [QuantMode::Asym, QuantMode::Sym, QuantMode::Hybrid, QuantMode::HybridPrefill] {
            for axis in [GroupingAxis::Inner, GroupingAxis::Outer] {
                let p = sample(mode, axis);
                assert_eq!(PackedMatrix::from_bytes(&p.to_bytes()).unwrap(), p);
            }
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample(QuantMode::Hybrid, GroupingAxis::Inner);
        let path = dir.path().join("k.iqkv");
        p.write_to(&path).unwrap();
        assert_eq!(PackedMatrix::read_from(&path).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let good = sample(QuantMode::Hybrid, GroupingAxis::Inner).to_bytes();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(PackedMatrix::from_bytes(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(PackedMatrix::from_bytes(&b), Err(Error::UnsupportedVersion(2))));

        assert!(PackedMatrix::from_bytes(&good[..good.len() - 1]).is_err());
        let mut b = good.clone();
        b.push(0);
        assert!(PackedMatrix::from_bytes(&b).is_err());

        // negative first scale
        let mut b = good.clone();
        let s0 = HEADER_LEN + 192 * 12;
        b[s0 + 3] |= 0x80;
        assert!(PackedMatrix::from_bytes(&b).is_err());

        let mut b = good.clone();
        b[9] = 24;
        assert!(PackedMatrix::from_bytes(&b).is_err());
    }

    #[test]
    fn rejects_mask_padding_and_stray_sign_bits() {
        let cfg = QuantConfig::new(2, 32, QuantMode::Hybrid).unwrap();
        let m = Matrix::from_fn(3, 32, |i, j| (i + j) as f32);
        let good = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap().to_bytes();
        let mut b = good.clone();
        *b.last_mut().unwrap() |= 0x80;
        assert!(PackedMatrix::from_bytes(&b).is_err());

        let cfg = QuantConfig::new(2, 8, QuantMode::Sym).unwrap();
        let m = Matrix::from_fn(1, 8, |_, j| j as f32 - 4.0);
        let good = quantize_matrix(&m, GroupingAxis::Inner, &cfg).unwrap().to_bytes();
        let aux0 = HEADER_LEN + 2 + 4;
        let mut b = good.clone();
        b[aux0 + 1] = 1; // sign bit 8 of an 8-element group
        assert!(PackedMatrix::from_bytes(&b).is_err());
        assert!(PackedMatrix::from_bytes(&good).is_ok());
    }
}
