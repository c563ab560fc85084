use std::ops::Range;

use crate::{Error, Matrix, Result};

use super::group::{
    dequant_asym, dequant_sym, dequantize_group_into, encode_asym, encode_hybrid_select, encode_sym,
    Encoded,
};
use super::pack::{read_code, write_codes};
use super::{GroupingAxis, Phase, QuantConfig, QuantMode, MAX_GROUP};

/// Bit-packed quantized matrix.
///
/// Codes are stored group-major, each group in `G·b/8` bytes. The mode mask
/// is present only in the hybrid modes; bit `g` set means group `g` is
/// asymmetric, so groups produced by a symmetric-only pass leave it clear.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    axis: GroupingAxis,
    cfg: QuantConfig,
    codes: Vec<u8>,
    scales: Vec<f32>,
    aux: Vec<u32>,
    mask: Vec<u8>,
}

/// Borrowed view of one group.
#[derive(Debug, Clone, Copy)]
pub struct GroupRef<'a> {
    pub scale: f32,
    pub aux: u32,
    pub is_symmetric: bool,
    pub packed_codes: &'a [u8],
}

impl GroupRef<'_> {
    pub(crate) fn encoded(&self) -> Encoded {
        Encoded {
            scale: self.scale,
            aux: self.aux,
            symmetric: self.is_symmetric,
        }
    }
}

/// Dequantizes a whole group into `out` (`G` values).
#[inline]
pub(crate) fn dequantize_group_ref(grp: &GroupRef<'_>, bits: u8, out: &mut [f32]) {
    dequantize_group_into(grp.encoded(), grp.packed_codes, bits, out);
}

/// Reconstructs element `k` of a group.
#[inline(always)]
pub(crate) fn dequantize_one(grp: &GroupRef<'_>, k: usize, bits: u8) -> f32 {
    let c = read_code(grp.packed_codes, k, bits);
    if grp.is_symmetric {
        dequant_sym(grp.scale, (grp.aux >> k) & 1 == 1, c)
    } else {
        dequant_asym(grp.scale, f32::from_bits(grp.aux), c)
    }
}

impl PackedMatrix {
    /// A matrix with no groups; one of `rows`/`cols` is expected to be zero.
    pub fn empty(rows: usize, cols: usize, axis: GroupingAxis, cfg: QuantConfig) -> Result<Self> {
        let m = Self {
            rows,
            cols,
            axis,
            cfg,
            codes: Vec::new(),
            scales: Vec::new(),
            aux: Vec::new(),
            mask: Vec::new(),
        };
        if m.num_groups() != 0 {
            return Err(Error::shape(format!("{rows}x{cols} is not empty")));
        }
        Ok(m)
    }

    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        axis: GroupingAxis,
        cfg: QuantConfig,
        codes: Vec<u8>,
        scales: Vec<f32>,
        aux: Vec<u32>,
        mask: Vec<u8>,
    ) -> Self {
        Self {
            rows,
            cols,
            axis,
            cfg,
            codes,
            scales,
            aux,
            mask,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn axis(&self) -> GroupingAxis {
        self.axis
    }

    #[inline]
    pub fn config(&self) -> &QuantConfig {
        &self.cfg
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.rows * self.cols / self.cfg.group_size()
    }

    /// Number of groups along the grouped dimension of one row (Inner) or
    /// column (Outer).
    #[inline]
    pub fn groups_per_line(&self) -> usize {
        match self.axis {
            GroupingAxis::Inner => self.cols / self.cfg.group_size(),
            GroupingAxis::Outer => self.rows / self.cfg.group_size(),
        }
    }

    pub fn code_bytes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn aux_words(&self) -> &[u32] {
        &self.aux
    }

    /// Bit-packed mode mask, empty outside the hybrid modes.
    pub fn mask_bytes(&self) -> &[u8] {
        &self.mask
    }

    #[inline]
    pub fn is_group_symmetric(&self, g: usize) -> bool {
        match self.cfg.mode() {
            QuantMode::Sym => true,
            QuantMode::Asym => false,
            QuantMode::Hybrid | QuantMode::HybridPrefill => (self.mask[g / 8] >> (g % 8)) & 1 == 0,
        }
    }

    /// Symmetric flag of every group, in group order.
    pub fn mode_mask(&self) -> Vec<bool> {
        (0..self.num_groups())
            .map(|g| self.is_group_symmetric(g))
            .collect()
    }

    #[inline]
    pub fn group(&self, g: usize) -> GroupRef<'_> {
        let gb = self.cfg.group_code_bytes();
        GroupRef {
            scale: self.scales[g],
            aux: self.aux[g],
            is_symmetric: self.is_group_symmetric(g),
            packed_codes: &self.codes[g * gb..(g + 1) * gb],
        }
    }

    /// Group index and in-group position of logical element `(i, j)`.
    #[inline]
    pub fn locate(&self, i: usize, j: usize) -> (usize, usize) {
        let g = self.cfg.group_size();
        match self.axis {
            GroupingAxis::Inner => (i * (self.cols / g) + j / g, j % g),
            GroupingAxis::Outer => (j * (self.rows / g) + i / g, i % g),
        }
    }

    /// Dequantized value of logical element `(i, j)`.
    pub fn dequantize_element(&self, i: usize, j: usize) -> f32 {
        assert!(i < self.rows && j < self.cols, "element ({i}, {j}) out of range");
        let (g, k) = self.locate(i, j);
        dequantize_one(&self.group(g), k, self.cfg.bits())
    }

    pub fn view(&self) -> PackedView<'_> {
        PackedView {
            matrix: self,
            rows: 0..self.rows,
            cols: 0..self.cols,
        }
    }

    /// Packed storage size in bytes of the code, scale, aux and mask arrays.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len() + 4 * self.aux.len() + self.mask.len()
    }

    /// Appends the rows of `other` below this matrix. Only meaningful for the
    /// inner axis, where group order is row-major and appending rows appends
    /// groups.
    pub fn append_rows(&mut self, other: &PackedMatrix) -> Result<()> {
        self.check_compatible(other)?;
        if self.axis != GroupingAxis::Inner {
            return Err(Error::shape("append_rows needs inner-axis grouping"));
        }
        if self.num_groups() == 0 && self.rows == 0 {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(Error::shape(format!(
                "appending {}-col rows to a {}-col matrix",
                other.cols, self.cols
            )));
        }
        let base = self.num_groups();
        self.codes.extend_from_slice(&other.codes);
        self.scales.extend_from_slice(&other.scales);
        self.aux.extend_from_slice(&other.aux);
        self.rows += other.rows;
        if self.cfg.mode().has_mask() {
            self.mask.resize(self.num_groups().div_ceil(8), 0);
            for g in 0..other.num_groups() {
                if !other.is_group_symmetric(g) {
                    set_bit(&mut self.mask, base + g);
                }
            }
        }
        Ok(())
    }

    /// Appends the columns of `other` to the right of this matrix. Each row's
    /// new groups are spliced in after its existing ones.
    pub fn append_cols(&mut self, other: &PackedMatrix) -> Result<()> {
        self.check_compatible(other)?;
        if self.axis != GroupingAxis::Inner {
            return Err(Error::shape("append_cols needs inner-axis grouping"));
        }
        if self.num_groups() == 0 && self.cols == 0 {
            self.rows = other.rows;
        }
        if other.rows != self.rows {
            return Err(Error::shape(format!(
                "appending {}-row columns to a {}-row matrix",
                other.rows, self.rows
            )));
        }
        let old = std::mem::replace(self, Self::empty(0, 0, self.axis, self.cfg)?);
        let gb = self.cfg.group_code_bytes();
        let (gl_old, gl_new) = (old.groups_per_line(), other.groups_per_line());
        let total = old.num_groups() + other.num_groups();
        let mut codes = Vec::with_capacity(total * gb);
        let mut scales = Vec::with_capacity(total);
        let mut aux = Vec::with_capacity(total);
        let mut mask = vec![0u8; if self.cfg.mode().has_mask() { total.div_ceil(8) } else { 0 }];
        let mut out_g = 0;
        for r in 0..old.rows {
            for (src, gl) in [(&old, gl_old), (other, gl_new)] {
                for j in 0..gl {
                    let g = r * gl + j;
                    codes.extend_from_slice(&src.codes[g * gb..(g + 1) * gb]);
                    scales.push(src.scales[g]);
                    aux.push(src.aux[g]);
                    if !mask.is_empty() && !src.is_group_symmetric(g) {
                        set_bit(&mut mask, out_g);
                    }
                    out_g += 1;
                }
            }
        }
        *self = Self {
            rows: old.rows,
            cols: old.cols + other.cols,
            axis: old.axis,
            cfg: old.cfg,
            codes,
            scales,
            aux,
            mask,
        };
        Ok(())
    }

    fn check_compatible(&self, other: &PackedMatrix) -> Result<()> {
        if self.cfg != other.cfg || self.axis != other.axis {
            return Err(Error::shape("appending a matrix with a different layout"));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn set_bit(bits: &mut [u8], i: usize) {
    bits[i / 8] |= 1 << (i % 8);
}

/// A rectangular window of a [`PackedMatrix`]. The window's edges along the
/// grouped dimension fall on group boundaries.
#[derive(Debug, Clone)]
pub struct PackedView<'a> {
    matrix: &'a PackedMatrix,
    rows: Range<usize>,
    cols: Range<usize>,
}

impl<'a> PackedView<'a> {
    pub fn matrix(&self) -> &'a PackedMatrix {
        self.matrix
    }

    pub fn rows(&self) -> Range<usize> {
        self.rows.clone()
    }

    pub fn cols(&self) -> Range<usize> {
        self.cols.clone()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Result<Self> {
        self.slice(r, 0..self.n_cols())
    }

    pub fn slice_cols(&self, c: Range<usize>) -> Result<Self> {
        self.slice(0..self.n_rows(), c)
    }

    /// Sub-window in coordinates relative to this view.
    pub fn slice(&self, r: Range<usize>, c: Range<usize>) -> Result<Self> {
        if r.start > r.end || r.end > self.n_rows() || c.start > c.end || c.end > self.n_cols() {
            return Err(Error::OutOfRange(format!(
                "window {r:?} x {c:?} of a {}x{} view",
                self.n_rows(),
                self.n_cols()
            )));
        }
        let rows = self.rows.start + r.start..self.rows.start + r.end;
        let cols = self.cols.start + c.start..self.cols.start + c.end;
        let g = self.matrix.cfg.group_size();
        let aligned = match self.matrix.axis {
            GroupingAxis::Inner => cols.start % g == 0 && cols.end % g == 0,
            GroupingAxis::Outer => rows.start % g == 0 && rows.end % g == 0,
        };
        if !aligned {
            return Err(Error::shape(format!(
                "window {rows:?} x {cols:?} splits a quantization group of {g}"
            )));
        }
        Ok(Self {
            matrix: self.matrix,
            rows,
            cols,
        })
    }
}

/// Quantizes `m` as prefill data (hybrid-prefill behaves as hybrid).
pub fn quantize_matrix(m: &Matrix, axis: GroupingAxis, cfg: &QuantConfig) -> Result<PackedMatrix> {
    quantize_matrix_in_phase(m, axis, cfg, Phase::Prefill)
}

struct GroupSink<'a> {
    codes: &'a mut [u8],
    scales: &'a mut Vec<f32>,
    aux: &'a mut Vec<u32>,
    mask: &'a mut [u8],
}

/// Encodes every group of `m` in group order. `G` is fixed at compile time
/// so the per-group loops have a known trip count.
fn encode_groups<const G: usize>(
    m: &Matrix,
    axis: GroupingAxis,
    mode: QuantMode,
    cfg: &QuantConfig,
    out: GroupSink<'_>,
) -> Result<()> {
    let n_groups = m.rows() * m.cols() / G;
    let gb = cfg.group_code_bytes();
    let max_code = cfg.max_code();
    let bits = cfg.bits();
    let mut buf = [0.0f32; G];
    let mut group_codes = [0u8; G];
    for gi in 0..n_groups {
        let values: &[f32; G] = match axis {
            GroupingAxis::Inner => m.data()[gi * G..(gi + 1) * G]
                .try_into()
                .expect("group slice has G elements"),
            GroupingAxis::Outer => {
                let per_col = m.rows() / G;
                let (col, blk) = (gi / per_col, gi % per_col);
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = m.get(blk * G + t, col);
                }
                &buf
            }
        };
        let enc = match mode {
            QuantMode::Asym => encode_asym(values, max_code, &mut group_codes)?,
            QuantMode::Sym => encode_sym(values, max_code, &mut group_codes),
            QuantMode::Hybrid => encode_hybrid_select(values, max_code, &mut group_codes)?,
            QuantMode::HybridPrefill => unreachable!("resolved by effective_mode"),
        };
        write_codes(&group_codes, bits, &mut out.codes[gi * gb..(gi + 1) * gb]);
        out.scales.push(enc.scale);
        out.aux.push(enc.aux);
        if !enc.symmetric && !out.mask.is_empty() {
            set_bit(out.mask, gi);
        }
    }
    Ok(())
}

/// Quantizes each run of `G` elements along `axis` as one group, using the
/// selection rule `cfg` prescribes for `phase`.
pub fn quantize_matrix_in_phase(
    m: &Matrix,
    axis: GroupingAxis,
    cfg: &QuantConfig,
    phase: Phase,
) -> Result<PackedMatrix> {
    let g = cfg.group_size();
    let grouped = match axis {
        GroupingAxis::Inner => m.cols(),
        GroupingAxis::Outer => m.rows(),
    };
    if grouped % g != 0 {
        return Err(Error::shape(format!(
            "grouped dimension {grouped} is not a multiple of the group size {g}"
        )));
    }
    let n_groups = m.rows() * m.cols() / g;
    let gb = cfg.group_code_bytes();
    let mut codes = vec![0u8; n_groups * gb];
    let mut scales = Vec::with_capacity(n_groups);
    let mut aux = Vec::with_capacity(n_groups);
    let mut mask = vec![0u8; if cfg.mode().has_mask() { n_groups.div_ceil(8) } else { 0 }];

    let mode = cfg.effective_mode(phase);
    let out = GroupSink {
        codes: &mut codes,
        scales: &mut scales,
        aux: &mut aux,
        mask: &mut mask,
    };
    match g {
        8 => encode_groups::<8>(m, axis, mode, cfg, out)?,
        16 => encode_groups::<16>(m, axis, mode, cfg, out)?,
        _ => encode_groups::<32>(m, axis, mode, cfg, out)?,
    }

    Ok(PackedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        axis,
        cfg: *cfg,
        codes,
        scales,
        aux,
        mask,
    })
}

pub fn dequantize_matrix(p: &PackedMatrix) -> Matrix {
    let g = p.cfg.group_size();
    let mut data = vec![0.0f32; p.rows * p.cols];
    let mut buf = [0.0f32; MAX_GROUP];
    for gi in 0..p.num_groups() {
        let grp = p.group(gi);
        dequantize_group_into(grp.encoded(), grp.packed_codes, p.cfg.bits(), &mut buf[..g]);
        match p.axis {
            GroupingAxis::Inner => data[gi * g..(gi + 1) * g].copy_from_slice(&buf[..g]),
            GroupingAxis::Outer => {
                let per_col = p.rows / g;
                let (col, blk) = (gi / per_col, gi % per_col);
                for (t, &v) in buf[..g].iter().enumerate() {
                    data[(blk * g + t) * p.cols + col] = v;
                }
            }
        }
    }
    Matrix::new(p.rows, p.cols, data).expect("dequantized values are finite")
}
