//! Quantization of a single group.
//!
//! Codes are computed against the *stored* `f32` scale, in `f64`:
//! `code = clip(round_half_even((v - Z) / S), 0, 2^b - 1)`. Reconstruction
//! evaluates `S·code + Z` in `f64` and rounds once to `f32`, so every
//! unclipped element is within `S/2` plus half an ulp of the result.

use crate::{Error, Result};

use super::pack::{read_codes, unpack_signs};
use super::MAX_GROUP;

/// One quantized group in unpacked form.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEncoding {
    /// One code per element; magnitudes when symmetric.
    pub codes: Vec<u8>,
    pub scale: f32,
    /// Zero point bits (asymmetric) or packed sign bits (symmetric).
    pub aux: u32,
    pub is_symmetric: bool,
}

impl GroupEncoding {
    /// The zero point of an asymmetric group.
    pub fn zero_point(&self) -> Option<f32> {
        (!self.is_symmetric).then(|| f32::from_bits(self.aux))
    }

    /// Sign flags of a symmetric group.
    pub fn signs(&self) -> Option<Vec<bool>> {
        self.is_symmetric
            .then(|| unpack_signs(self.aux, self.codes.len()))
    }
}

/// Sum of squared reconstruction errors of both candidate encodings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupErrorStats {
    pub sse_sym: f64,
    pub sse_asym: f64,
}

impl GroupErrorStats {
    /// SSE of the encoding hybrid mode selects.
    pub fn sse_min(&self) -> f64 {
        if self.sse_asym < self.sse_sym {
            self.sse_asym
        } else {
            self.sse_sym
        }
    }
}

/// Round half to even for `|x| < 2^51`; `x` is always a clamped code ratio
/// here. Relies on the default round-to-nearest-even FP environment.
#[inline(always)]
pub(crate) fn round_half_even(x: f64) -> f64 {
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    (x + SHIFTER) - SHIFTER
}

#[inline(always)]
fn to_code(ratio: f64, max_code: f64) -> u8 {
    round_half_even(ratio.clamp(0.0, max_code)) as u8
}

#[inline(always)]
pub(crate) fn dequant_asym(scale: f32, zero: f32, code: u8) -> f32 {
    (scale as f64 * code as f64 + zero as f64) as f32
}

#[inline(always)]
pub(crate) fn dequant_sym(scale: f32, negative: bool, code: u8) -> f32 {
    let m = (scale as f64 * code as f64) as f32;
    if negative {
        -m
    } else {
        m
    }
}

#[inline(always)]
fn sq_err(v: f32, r: f32) -> f64 {
    let d = v as f64 - r as f64;
    d * d
}

/// Group minimum and maximum. Values are finite, so lane order does not
/// matter.
#[inline(always)]
pub(crate) fn min_max(values: &[f32]) -> (f32, f32) {
    let mut lo = [values[0]; 8];
    let mut hi = [values[0]; 8];
    let chunks = values.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for l in 0..8 {
            lo[l] = if ch[l] < lo[l] { ch[l] } else { lo[l] };
            hi[l] = if ch[l] > hi[l] { ch[l] } else { hi[l] };
        }
    }
    for &v in rest {
        lo[0] = if v < lo[0] { v } else { lo[0] };
        hi[0] = if v > hi[0] { v } else { hi[0] };
    }
    let lo = lo.iter().fold(lo[0], |a, &b| if b < a { b } else { a });
    let hi = hi.iter().fold(hi[0], |a, &b| if b > a { b } else { a });
    (lo, hi)
}

#[inline(always)]
fn max_abs(values: &[f32]) -> f32 {
    let (lo, hi) = min_max(values);
    lo.abs().max(hi.abs())
}

#[inline(always)]
fn asym_scale(lo: f32, hi: f32, max_code: u32) -> Result<f32> {
    let s = ((hi as f64 - lo as f64) / max_code as f64) as f32;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::ScaleOverflow)
    }
}

#[inline(always)]
fn sym_scale(max_abs: f32, max_code: u32) -> f32 {
    (max_abs as f64 / max_code as f64) as f32
}

/// Result of encoding one group into a caller-provided code buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Encoded {
    pub scale: f32,
    pub aux: u32,
    pub symmetric: bool,
}

/// Distance from a half-integer below which a single-precision ratio in
/// `[0, q]` may round differently from the exact one. The ratio carries three
/// roundings, so it is off by at most `3.01·u·q` with `u = 2^-24`.
#[inline(always)]
fn tie_guard(max_code: u32) -> f32 {
    4.0 * (max_code as f32 + 1.0) / 16_777_216.0
}

/// Reciprocals stay normal and finite for scales in this range.
const FAST_SCALE: std::ops::RangeInclusive<f32> = 2.35e-38..=4.2e37;

/// `codes[k] = to_code((a_k - zero) / scale)` where `a_k` is `values[k]`, or
/// `|values[k]|` when `magnitude` is set.
///
/// The ratio is first formed in `f32` with a reciprocal. If any ratio lands
/// near a tie or out of range, the group is redone with exact division.
#[inline(always)]
fn group_codes(values: &[f32], zero: f32, scale: f32, max_code: u32, magnitude: bool, codes: &mut [u8]) {
    const SHIFT: f32 = 8_388_608.0; // 2^23
    let (q, lim, guard) = (max_code as f32, max_code as f32 + 0.25, tie_guard(max_code));
    let mut redo = !FAST_SCALE.contains(&scale);
    if !redo {
        let inv = 1.0 / scale;
        let mut flags = 0u32;
        for (c, &v) in codes.iter_mut().zip(values) {
            let a = if magnitude { v.abs() } else { v - zero };
            let x = a * inv;
            flags |= !(x <= lim) as u32;
            let x = if x < q { x } else { q };
            let y = x + SHIFT;
            flags |= (((x - (y - SHIFT)).abs() - 0.5).abs() < guard) as u32;
            *c = y.to_bits().wrapping_sub(SHIFT.to_bits()) as u8;
        }
        redo = flags != 0;
    }
    if redo {
        let (s, z, q) = (scale as f64, zero as f64, max_code as f64);
        for (c, &v) in codes.iter_mut().zip(values) {
            let a = if magnitude { v.abs() as f64 } else { v as f64 - z };
            *c = to_code(a / s, q);
        }
    }
}

/// Reference for [`group_codes`]: exact division for every element.
#[cfg(test)]
fn group_codes_exact(values: &[f32], zero: f32, scale: f32, max_code: u32, magnitude: bool) -> Vec<u8> {
    let (s, z, q) = (scale as f64, zero as f64, max_code as f64);
    values
        .iter()
        .map(|&v| {
            let a = if magnitude { v.abs() as f64 } else { v as f64 - z };
            to_code(a / s, q)
        })
        .collect()
}

#[inline(always)]
fn negative_mask(values: &[f32]) -> u32 {
    values
        .iter()
        .enumerate()
        .fold(0u32, |w, (k, &v)| w | (((v < 0.0) as u32) << k))
}

#[inline(always)]
pub(crate) fn encode_asym(values: &[f32], max_code: u32, codes: &mut [u8]) -> Result<Encoded> {
    let (lo, hi) = min_max(values);
    let scale = asym_scale(lo, hi, max_code)?;
    if scale == 0.0 {
        codes.fill(0);
    } else {
        group_codes(values, lo, scale, max_code, false, codes);
    }
    Ok(Encoded {
        scale,
        aux: lo.to_bits(),
        symmetric: false,
    })
}

#[inline(always)]
pub(crate) fn encode_sym(values: &[f32], max_code: u32, codes: &mut [u8]) -> Encoded {
    let scale = sym_scale(max_abs(values), max_code);
    let signs = if scale == 0.0 {
        codes.fill(0);
        0
    } else {
        group_codes(values, 0.0, scale, max_code, true, codes);
        negative_mask(values)
    };
    Encoded {
        scale,
        aux: signs,
        symmetric: true,
    }
}

/// Both candidate encodings of one group, before selection.
struct Candidates {
    lo: f32,
    a_scale: f32,
    s_scale: f32,
    signs: u32,
    a_codes: [u8; MAX_GROUP],
    s_codes: [u8; MAX_GROUP],
}

impl Candidates {
    #[inline(always)]
    fn new(values: &[f32], max_code: u32) -> Result<Self> {
        let n = values.len();
        let (lo, hi) = min_max(values);
        let a_scale = asym_scale(lo, hi, max_code)?;
        let s_scale = sym_scale(lo.abs().max(hi.abs()), max_code);
        let mut c = Candidates {
            lo,
            a_scale,
            s_scale,
            signs: 0,
            a_codes: [0; MAX_GROUP],
            s_codes: [0; MAX_GROUP],
        };
        if a_scale != 0.0 {
            group_codes(values, lo, a_scale, max_code, false, &mut c.a_codes[..n]);
        }
        if s_scale != 0.0 {
            group_codes(values, 0.0, s_scale, max_code, true, &mut c.s_codes[..n]);
            c.signs = negative_mask(values);
        }
        Ok(c)
    }

    /// Exact SSE of both encodings, terms summed in element order in `f64`.
    fn exact_sse(&self, values: &[f32]) -> GroupErrorStats {
        let mut sse_asym = 0.0f64;
        let mut sse_sym = 0.0f64;
        for (k, &v) in values.iter().enumerate() {
            let ra = dequant_asym(self.a_scale, self.lo, self.a_codes[k]);
            let rs = dequant_sym(self.s_scale, (self.signs >> k) & 1 == 1, self.s_codes[k]);
            sse_asym += sq_err(v, ra);
            sse_sym += sq_err(v, rs);
        }
        GroupErrorStats { sse_sym, sse_asym }
    }

    #[inline(always)]
    fn select(&self, symmetric: bool, n: usize, codes: &mut [u8]) -> Encoded {
        if symmetric {
            codes.copy_from_slice(&self.s_codes[..n]);
            Encoded {
                scale: self.s_scale,
                aux: self.signs,
                symmetric: true,
            }
        } else {
            codes.copy_from_slice(&self.a_codes[..n]);
            Encoded {
                scale: self.a_scale,
                aux: self.lo.to_bits(),
                symmetric: false,
            }
        }
    }
}

/// Encodes both ways and keeps the encoding with the strictly lower SSE
/// (symmetric on ties). SSE terms are summed in element order.
pub(crate) fn encode_hybrid(
    values: &[f32],
    max_code: u32,
    codes: &mut [u8],
) -> Result<(Encoded, GroupErrorStats)> {
    let c = Candidates::new(values, max_code)?;
    let stats = c.exact_sse(values);
    let enc = c.select(!(stats.sse_asym < stats.sse_sym), values.len(), codes);
    Ok((enc, stats))
}

/// Same selection as [`encode_hybrid`] without reporting the SSE values.
/// Tries [`fast_hybrid`] first and falls back to the exact sums.
#[inline(always)]
pub(crate) fn encode_hybrid_select<const G: usize>(
    values: &[f32; G],
    max_code: u32,
    codes: &mut [u8; G],
) -> Result<Encoded> {
    if let Some(enc) = fast_hybrid(values, max_code, codes) {
        return Ok(enc);
    }
    Ok(encode_hybrid(values, max_code, codes)?.0)
}

/// Single fused pass computing both code sets and single-precision SSE
/// estimates. Returns `None` whenever the result might differ from
/// [`encode_hybrid`]: a ratio near a rounding tie, a scale outside the range
/// where reciprocals are exact enough, or SSE estimates too close to call.
///
/// Error bound: with `u = 2^-24` and `M` the largest magnitude, each
/// estimated error `d'` is within `ε = 8.5·u·M` of the exact `d` (symmetric
/// reconstructions are bit-exact). So `|Σd'² − Σd²| ≤ 2ε·√n·‖d‖ + n·ε²`
/// with `‖d‖ ≤ ‖d'‖ + ε·√n`, and the lane sums add a relative `6u`. The
/// element-order `f64` sums are far closer to `Σd²` than the slack added.
#[inline(always)]
fn fast_hybrid<const G: usize>(values: &[f32; G], max_code: u32, codes: &mut [u8; G]) -> Option<Encoded> {
    const SHIFT: f32 = 8_388_608.0; // 2^23
    const L: usize = 8;
    let (lo, hi) = min_max(values);
    let m = lo.abs().max(hi.abs());
    if !(1e-12..=1e15).contains(&m) {
        return None;
    }
    let a_scale = ((hi as f64 - lo as f64) / max_code as f64) as f32;
    let s_scale = (m as f64 / max_code as f64) as f32;
    if !FAST_SCALE.contains(&a_scale) || !FAST_SCALE.contains(&s_scale) {
        return None;
    }
    let (inv_a, inv_s) = (1.0 / a_scale, 1.0 / s_scale);
    let guard = tie_guard(max_code);

    let mut a_codes = [0u8; G];
    // Largest distance from the rounded value, per lane. Ratios never exceed
    // `q·(1 + 5u)`, so no clamping is needed: they round to at most `q`.
    let mut far = [0.0f32; L];
    let mut acc_a = [0.0f32; L];
    let mut acc_s = [0.0f32; L];
    for ((vc, ac), sc) in values
        .chunks_exact(L)
        .zip(a_codes.chunks_exact_mut(L))
        .zip(codes.chunks_exact_mut(L))
    {
        let mut ya = [0.0f32; L];
        let mut ys = [0.0f32; L];
        for l in 0..L {
            let v = vc[l];
            let xa = (v - lo) * inv_a;
            let xs = v.abs() * inv_s;
            ya[l] = xa + SHIFT;
            ys[l] = xs + SHIFT;
            let (ra, rs) = (ya[l] - SHIFT, ys[l] - SHIFT);
            let ta = (xa - ra).abs();
            let ts = (xs - rs).abs();
            let t = if ta > ts { ta } else { ts };
            far[l] = if t > far[l] { t } else { far[l] };
            let da = v - (a_scale * ra + lo);
            let ds = v - (s_scale * rs).copysign(v);
            acc_a[l] += da * da;
            acc_s[l] += ds * ds;
        }
        for l in 0..L {
            ac[l] = ya[l].to_bits().wrapping_sub(SHIFT.to_bits()) as u8;
            sc[l] = ys[l].to_bits().wrapping_sub(SHIFT.to_bits()) as u8;
        }
    }
    if far.iter().any(|&t| t > 0.5 - guard) {
        return None;
    }
    let fa: f64 = acc_a.iter().map(|&x| x as f64).sum();
    let fs: f64 = acc_s.iter().map(|&x| x as f64).sum();

    const U: f64 = 1.0 / (1u64 << 24) as f64;
    let n = G as f64;
    let eps = 8.5 * U * m as f64;
    let tol = |f: f64| {
        let norm = (f * (1.0 + 1e-6)).sqrt() + eps * n.sqrt();
        6.0 * U * f + 2.0 * eps * n.sqrt() * norm + n * eps * eps + 1e-14 * norm * norm + 1e-40
    };
    let (ta, ts) = (tol(fa), tol(fs));
    if fs + ts < fa - ta {
        Some(Encoded {
            scale: s_scale,
            aux: negative_mask(values),
            symmetric: true,
        })
    } else if fa + ta < fs - ts {
        *codes = a_codes;
        Some(Encoded {
            scale: a_scale,
            aux: lo.to_bits(),
            symmetric: false,
        })
    } else {
        None
    }
}

/// Reconstructs `codes.len()` values into `out`.
#[inline]
pub(crate) fn dequant_codes(enc: Encoded, codes: &[u8], out: &mut [f32]) {
    if enc.symmetric {
        for (k, (o, &c)) in out.iter_mut().zip(codes).enumerate() {
            *o = dequant_sym(enc.scale, (enc.aux >> k) & 1 == 1, c);
        }
    } else {
        let zero = f32::from_bits(enc.aux);
        for (o, &c) in out.iter_mut().zip(codes) {
            *o = dequant_asym(enc.scale, zero, c);
        }
    }
}

/// Reconstructs a packed group of `out.len()` elements into `out`.
///
/// For `b ≤ 4` the `2^b` possible values are tabulated first; the table
/// entries are produced by the same expression, so results are identical.
#[inline]
pub(crate) fn dequantize_group_into(enc: Encoded, packed: &[u8], bits: u8, out: &mut [f32]) {
    let mut codes = [0u8; MAX_GROUP];
    let codes = &mut codes[..out.len()];
    read_codes(packed, bits, codes);
    if bits <= 4 {
        let mut lut = [0.0f32; 16];
        let levels = 1usize << bits;
        if enc.symmetric {
            for (c, l) in lut[..levels].iter_mut().enumerate() {
                *l = dequant_sym(enc.scale, false, c as u8);
            }
            for (k, (o, &c)) in out.iter_mut().zip(codes.iter()).enumerate() {
                let m = lut[c as usize];
                *o = if (enc.aux >> k) & 1 == 1 { -m } else { m };
            }
        } else {
            let zero = f32::from_bits(enc.aux);
            for (c, l) in lut[..levels].iter_mut().enumerate() {
                *l = dequant_asym(enc.scale, zero, c as u8);
            }
            for (o, &c) in out.iter_mut().zip(codes.iter()) {
                *o = lut[c as usize];
            }
        }
    } else {
        dequant_codes(enc, codes, out);
    }
}

fn check_group(values: &[f32], bits: u8) -> Result<u32> {
    if !(1..=8).contains(&bits) {
        return Err(Error::config(format!("bit width {bits} outside 1..=8")));
    }
    if values.is_empty() || values.len() > MAX_GROUP {
        return Err(Error::shape(format!(
            "group of {} values; groups hold 1..=32",
            values.len()
        )));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((1u32 << bits) - 1)
}

fn into_encoding(enc: Encoded, codes: &[u8]) -> GroupEncoding {
    GroupEncoding {
        codes: codes.to_vec(),
        scale: enc.scale,
        aux: enc.aux,
        is_symmetric: enc.symmetric,
    }
}

/// Asymmetric quantization: `Z = min`, `S = (max - min) / (2^b - 1)`.
pub fn quantize_group_asym(values: &[f32], bits: u8) -> Result<GroupEncoding> {
    let q = check_group(values, bits)?;
    let mut codes = [0u8; MAX_GROUP];
    let codes = &mut codes[..values.len()];
    let enc = encode_asym(values, q, codes)?;
    Ok(into_encoding(enc, codes))
}

/// Symmetric quantization: `S = max|v| / (2^b - 1)`, magnitude codes and a
/// sign word.
pub fn quantize_group_sym(values: &[f32], bits: u8) -> Result<GroupEncoding> {
    let q = check_group(values, bits)?;
    let mut codes = [0u8; MAX_GROUP];
    let codes = &mut codes[..values.len()];
    let enc = encode_sym(values, q, codes);
    Ok(into_encoding(enc, codes))
}

/// Hybrid quantization: whichever of the two encodings has the strictly lower
/// sum of squared reconstruction error, symmetric on ties.
pub fn quantize_group_hybrid(
    values: &[f32],
    bits: u8,
) -> Result<(GroupEncoding, GroupErrorStats)> {
    let q = check_group(values, bits)?;
    let mut codes = [0u8; MAX_GROUP];
    let codes = &mut codes[..values.len()];
    let (enc, stats) = encode_hybrid(values, q, codes)?;
    Ok((into_encoding(enc, codes), stats))
}

pub fn dequantize_group(enc: &GroupEncoding) -> Result<Vec<f32>> {
    if enc.codes.len() > MAX_GROUP {
        return Err(Error::shape("group longer than 32 elements"));
    }
    if !enc.scale.is_finite() || enc.scale < 0.0 {
        return Err(Error::format(format!("invalid group scale {}", enc.scale)));
    }
    if let Some(z) = enc.zero_point() {
        if !z.is_finite() {
            return Err(Error::format("non-finite zero point"));
        }
    } else if enc.codes.len() < MAX_GROUP && enc.aux >> enc.codes.len() != 0 {
        return Err(Error::format("sign bits set beyond the group"));
    }
    let mut out = vec![0.0f32; enc.codes.len()];
    dequant_codes(
        Encoded {
            scale: enc.scale,
            aux: enc.aux,
            symmetric: enc.is_symmetric,
        },
        &enc.codes,
        &mut out,
    );
    Ok(out)
}
