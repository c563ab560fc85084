//! Little-endian bit packing.
//!
//! Codes form one continuous bit stream over bytes: code `k` occupies stream
//! bits `[k·b, (k+1)·b)`, and stream bit `i` is bit `i % 8` of byte `i / 8`.
//! For `b` in {1, 2, 4, 8} no code straddles a byte.

use crate::{Error, Result};

use super::MAX_GROUP;

/// Packs `codes` at `bits` bits each.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u32 << bits;
    if let Some(&bad) = codes.iter().find(|&&c| (c as u32) >= limit) {
        return Err(Error::CodeOutOfRange {
            code: bad as u32,
            bits,
        });
    }
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    write_codes(codes, bits, &mut out);
    Ok(out)
}

/// Unpacks `count` codes of `bits` bits each.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let needed = (count * bits as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::format(format!(
            "{count} codes of {bits} bits need {needed} bytes, got {}",
            bytes.len()
        )));
    }
    Ok((0..count).map(|k| read_code(bytes, k, bits)).collect())
}

/// Packs up to 32 sign flags; flag `k` becomes bit `k`.
pub fn pack_signs(signs: &[bool]) -> Result<u32> {
    if signs.len() > MAX_GROUP {
        return Err(Error::shape(format!(
            "{} sign bits do not fit a 32-bit word",
            signs.len()
        )));
    }
    Ok(signs
        .iter()
        .enumerate()
        .fold(0u32, |w, (k, &s)| w | ((s as u32) << k)))
}

pub fn unpack_signs(word: u32, count: usize) -> Vec<bool> {
    (0..count.min(MAX_GROUP)).map(|k| (word >> k) & 1 == 1).collect()
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!("bit width {bits} outside 1..=8")))
    }
}

/// ORs `codes` into `out`, starting at bit 0. `out` must be zeroed and large
/// enough; codes must already fit in `bits`.
#[inline]
pub(crate) fn write_codes(codes: &[u8], bits: u8, out: &mut [u8]) {
    match bits {
        8 => out[..codes.len()].copy_from_slice(codes),
        1 | 2 | 4 => {
            let per_byte = 8 / bits as usize;
            for (byte, chunk) in out.iter_mut().zip(codes.chunks(per_byte)) {
                let mut v = 0u8;
                for (j, &c) in chunk.iter().enumerate() {
                    v |= c << (j * bits as usize);
                }
                *byte = v;
            }
        }
        _ => {
            let mut acc = 0u32;
            let mut filled = 0u32;
            let mut pos = 0;
            for &c in codes {
                acc |= (c as u32) << filled;
                filled += bits as u32;
                while filled >= 8 {
                    out[pos] = acc as u8;
                    pos += 1;
                    acc >>= 8;
                    filled -= 8;
                }
            }
            if filled > 0 {
                out[pos] = acc as u8;
            }
        }
    }
}

#[inline(always)]
pub(crate) fn read_code(bytes: &[u8], k: usize, bits: u8) -> u8 {
    let bit = k * bits as usize;
    let byte = bit / 8;
    let shift = bit % 8;
    let mut v = (bytes[byte] as u16) >> shift;
    if shift + bits as usize > 8 {
        v |= (bytes[byte + 1] as u16) << (8 - shift);
    }
    (v & ((1u16 << bits) - 1)) as u8
}

/// Decodes the `count` codes at the start of `bytes` into `out`.
#[inline]
pub(crate) fn read_codes(bytes: &[u8], bits: u8, out: &mut [u8]) {
    match bits {
        8 => out.copy_from_slice(&bytes[..out.len()]),
        1 | 2 | 4 => {
            let per_byte = 8 / bits as usize;
            let mask = (1u8 << bits) - 1;
            for (chunk, &byte) in out.chunks_mut(per_byte).zip(bytes) {
                for (j, c) in chunk.iter_mut().enumerate() {
                    *c = (byte >> (j * bits as usize)) & mask;
                }
            }
        }
        _ => {
            for (k, c) in out.iter_mut().enumerate() {
                *c = read_code(bytes, k, bits);
            }
        }
    }
}
