//! Multiplication-free inner products, packed GEMM, im2col, and the float
//! reference convolutions.
//!
//! For rows a, b of length c with entries in {-1, +1} the dot product is
//! `c - 2 * popcount(a_sign XOR b_sign)`. With zeros allowed, both operands'
//! value planes are ANDed into a mask m and the dot product becomes
//! `popcount(XNOR & m) - popcount(XOR & m)`: the first popcount counts
//! matching-sign nonzero pairs, the second opposing-sign pairs. Padding lanes
//! carry value bit 0 and drop out of the mask, so whole words can be
//! processed without edge handling.
//!
//! Patch rows are channel-major: a row holds all kH*kW taps of input channel
//! 0, then channel 1, and so on. The same layout is used by the dense and
//! packed paths and matches the row-major flattening of a (Cout, Cin, kH, kW)
//! filter bank.

use crate::error::{Error, Result};
use crate::packed::{PackedRow, PackedTernaryTensor};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::DenseTensor;

/// Convolution geometry: input layout plus kernel placement parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || in_h == 0 || in_w == 0 || k_h == 0 || k_w == 0 {
            return Err(Error::Domain("geometry dimensions must be positive".into()));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Domain("stride and dilation must be at least 1".into()));
        }
        let g = Self { in_channels, in_h, in_w, k_h, k_w, stride, dilation, padding };
        g.out_size()?;
        Ok(g)
    }

    /// Effective kernel extent after dilation.
    fn span(k: usize, dilation: usize) -> usize {
        dilation * (k - 1) + 1
    }

    pub fn out_size(&self) -> Result<(usize, usize)> {
        let span_h = Self::span(self.k_h, self.dilation);
        let span_w = Self::span(self.k_w, self.dilation);
        let padded_h = self.in_h + 2 * self.padding;
        let padded_w = self.in_w + 2 * self.padding;
        if span_h > padded_h || span_w > padded_w {
            return Err(Error::Domain(format!(
                "kernel span {span_h}x{span_w} exceeds padded input {padded_h}x{padded_w}"
            )));
        }
        Ok(((padded_h - span_h) / self.stride + 1, (padded_w - span_w) / self.stride + 1))
    }

    /// Patch row length c = kH * kW * Cin.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_channels
    }
}

#[derive(Debug, Clone)]
pub enum PatchStorage {
    Dense(Vec<f32>),
    Packed(PackedTernaryTensor),
}

/// im2col output: one row per output position.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub storage: PatchStorage,
    pub geometry: Geometry,
}

/// Gather dense im2col patches; rows padded lanes are not a concern here.
pub(crate) fn gather_patches(input: &[f32], geom: &Geometry) -> Result<Vec<f32>> {
    let (out_h, out_w) = geom.out_size()?;
    let cols = geom.patch_len();
    let mut patches = vec![0f32; out_h * out_w * cols];
    let plane = geom.in_h * geom.in_w;
    for_each_chunk_mut(&mut patches, out_w * cols, |oy, band| {
        for ox in 0..out_w {
            let row = &mut band[ox * cols..(ox + 1) * cols];
            let mut k = 0;
            for c in 0..geom.in_channels {
                let chan = &input[c * plane..(c + 1) * plane];
                for kh in 0..geom.k_h {
                    let iy = (oy * geom.stride + kh * geom.dilation) as isize
                        - geom.padding as isize;
                    for kw in 0..geom.k_w {
                        let ix = (ox * geom.stride + kw * geom.dilation) as isize
                            - geom.padding as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            row[k] = chan[iy as usize * geom.in_w + ix as usize];
                        }
                        k += 1;
                    }
                }
            }
        }
    });
    Ok(patches)
}

/// Scatter-add the transpose of [`gather_patches`]: fold patch-row gradients
/// back onto the input grid.
pub(crate) fn scatter_patches(
    dpatches: &[f32],
    geom: &Geometry,
    dinput: &mut [f32],
) -> Result<()> {
    let (out_h, out_w) = geom.out_size()?;
    let cols = geom.patch_len();
    let plane = geom.in_h * geom.in_w;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &dpatches[(oy * out_w + ox) * cols..(oy * out_w + ox + 1) * cols];
            let mut k = 0;
            for c in 0..geom.in_channels {
                for kh in 0..geom.k_h {
                    let iy = (oy * geom.stride + kh * geom.dilation) as isize
                        - geom.padding as isize;
                    for kw in 0..geom.k_w {
                        let ix = (ox * geom.stride + kw * geom.dilation) as isize
                            - geom.padding as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            dinput[c * plane + iy as usize * geom.in_w + ix as usize] += row[k];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Dense im2col: input is a (Cin, H, W) tensor.
pub fn im2col(input: &DenseTensor, geom: &Geometry) -> Result<PatchMatrix> {
    check_input_shape(input.shape(), geom)?;
    let (out_h, out_w) = geom.out_size()?;
    let patches = gather_patches(input.data(), geom)?;
    Ok(PatchMatrix {
        rows: out_h * out_w,
        cols: geom.patch_len(),
        storage: PatchStorage::Dense(patches),
        geometry: *geom,
    })
}

/// Packed im2col over a (Cin, H, W) code map; each patch row is packed
/// independently and padded to a word boundary.
pub fn im2col_codes(codes: &[i8], geom: &Geometry) -> Result<PatchMatrix> {
    if codes.len() != geom.in_channels * geom.in_h * geom.in_w {
        return Err(Error::Shape(format!(
            "code map length {} does not match geometry {}x{}x{}",
            codes.len(),
            geom.in_channels,
            geom.in_h,
            geom.in_w
        )));
    }
    let (out_h, out_w) = geom.out_size()?;
    let cols = geom.patch_len();
    let rows = out_h * out_w;
    let plane = geom.in_h * geom.in_w;
    let mut patch_codes = vec![0i8; rows * cols];
    for_each_chunk_mut(&mut patch_codes, out_w * cols, |oy, band| {
        for ox in 0..out_w {
            let row = &mut band[ox * cols..(ox + 1) * cols];
            let mut k = 0;
            for c in 0..geom.in_channels {
                let chan = &codes[c * plane..(c + 1) * plane];
                for kh in 0..geom.k_h {
                    let iy = (oy * geom.stride + kh * geom.dilation) as isize
                        - geom.padding as isize;
                    for kw in 0..geom.k_w {
                        let ix = (ox * geom.stride + kw * geom.dilation) as isize
                            - geom.padding as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            row[k] = chan[iy as usize * geom.in_w + ix as usize];
                        }
                        k += 1;
                    }
                }
            }
        }
    });
    let packed = PackedTernaryTensor::pack(&patch_codes, &[rows, cols])?;
    Ok(PatchMatrix { rows, cols, storage: PatchStorage::Packed(packed), geometry: *geom })
}

fn check_input_shape(shape: &[usize], geom: &Geometry) -> Result<()> {
    if shape != [geom.in_channels, geom.in_h, geom.in_w] {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match geometry {}x{}x{}",
            shape, geom.in_channels, geom.in_h, geom.in_w
        )));
    }
    Ok(())
}

/// Dot product of two packed rows with entries restricted to {-1, +1}:
/// `c - 2 * popcount(sign XOR)`. Rows containing zeros are rejected; use
/// [`ternary_dot`] for those.
pub fn binary_dot(a: PackedRow<'_>, b: PackedRow<'_>) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::Shape(format!("row lengths differ: {} vs {}", a.len, b.len)));
    }
    let nz = |r: &PackedRow<'_>| r.value.iter().map(|w| w.count_ones() as usize).sum::<usize>();
    if nz(&a) != a.len || nz(&b) != b.len {
        return Err(Error::Domain(
            "binary_dot operand contains zero entries (use ternary_dot)".into(),
        ));
    }
    let xor_pop: u32 = a
        .sign
        .iter()
        .zip(b.sign)
        .map(|(&x, &y)| (x ^ y).count_ones())
        .sum();
    Ok(a.len as i32 - 2 * xor_pop as i32)
}

/// Dot product of two packed ternary rows via two masked popcounts.
pub fn ternary_dot(a: PackedRow<'_>, b: PackedRow<'_>) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::Shape(format!("row lengths differ: {} vs {}", a.len, b.len)));
    }
    Ok(ternary_dot_words(a.value, a.sign, b.value, b.sign))
}

/// Word-level kernel; padding lanes drop out through the value mask.
#[inline]
pub(crate) fn ternary_dot_words(av: &[u64], asgn: &[u64], bv: &[u64], bsgn: &[u64]) -> i32 {
    let mut acc = 0i32;
    for w in 0..av.len() {
        let mask = av[w] & bv[w];
        let xor = asgn[w] ^ bsgn[w];
        acc += (!xor & mask).count_ones() as i32 - (xor & mask).count_ones() as i32;
    }
    acc
}

/// Packed GEMM: `out[i][j] = alphas[j] * <patch row i, filter row j>`.
/// Accumulation is exact integer arithmetic; the scale is applied once.
pub fn ternary_gemm(
    patches: &PackedTernaryTensor,
    filters: &PackedTernaryTensor,
    alphas: &[f32],
) -> Result<DenseTensor> {
    if patches.row_len() != filters.row_len() {
        return Err(Error::Shape(format!(
            "patch row length {} does not match filter row length {}",
            patches.row_len(),
            filters.row_len()
        )));
    }
    if alphas.len() != filters.rows() {
        return Err(Error::Shape(format!(
            "{} scales for {} filters",
            alphas.len(),
            filters.rows()
        )));
    }
    let rows = patches.rows();
    let nf = filters.rows();
    let wpr = patches.words_per_row();
    let mut out = vec![0f32; rows * nf];
    let fv = filters.value_words();
    let fs = filters.sign_words();
    let pv = patches.value_words();
    let ps = patches.sign_words();
    for_each_chunk_mut(&mut out, nf, |r, out_row| {
        let av = &pv[r * wpr..(r + 1) * wpr];
        let asgn = &ps[r * wpr..(r + 1) * wpr];
        for (j, slot) in out_row.iter_mut().enumerate() {
            let dot = ternary_dot_words(av, asgn, &fv[j * wpr..(j + 1) * wpr], &fs[j * wpr..(j + 1) * wpr]);
            *slot = alphas[j] * dot as f32;
        }
    });
    DenseTensor::from_vec(&[rows, nf], out)
}

/// The crate's own float GEMM over patch rows: `out[i][j] = <patch i, filter j>`.
/// Plain Rust loops with a fixed summation order; this is both the reference
/// path and the benchmark baseline.
pub fn float_gemm(
    patches: &[f32],
    rows: usize,
    cols: usize,
    filters: &[f32],
    nf: usize,
) -> Vec<f32> {
    assert_eq!(patches.len(), rows * cols, "patch buffer size");
    assert_eq!(filters.len(), nf * cols, "filter buffer size");
    // Transposed filters make the j loop unit-stride.
    let mut ft = vec![0f32; cols * nf];
    for j in 0..nf {
        for k in 0..cols {
            ft[k * nf + j] = filters[j * cols + k];
        }
    }
    let mut out = vec![0f32; rows * nf];
    for_each_chunk_mut(&mut out, nf, |r, out_row| {
        let prow = &patches[r * cols..(r + 1) * cols];
        for (k, &a) in prow.iter().enumerate() {
            let frow = &ft[k * nf..(k + 1) * nf];
            for (o, &b) in out_row.iter_mut().zip(frow) {
                *o += a * b;
            }
        }
    });
    out
}

/// Transpose a [rows x nf] GEMM output into (nf, out_h, out_w).
fn to_channel_major(rc: &[f32], rows: usize, nf: usize, out_h: usize, out_w: usize) -> DenseTensor {
    let mut data = vec![0f32; rc.len()];
    for r in 0..rows {
        for j in 0..nf {
            data[j * rows + r] = rc[r * nf + j];
        }
    }
    DenseTensor::from_vec(&[nf, out_h, out_w], data).expect("sizes agree")
}

/// Standard dense cross-correlation; the oracle for the packed paths.
pub fn conv2d_float(
    input: &DenseTensor,
    weights: &DenseTensor,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let ws = weights.shape();
    if ws.len() != 4 {
        return Err(Error::Shape(format!("weights must be (Cout, Cin, kH, kW), got {ws:?}")));
    }
    let (cout, cin, k_h, k_w) = (ws[0], ws[1], ws[2], ws[3]);
    let is = input.shape();
    if is.len() != 3 || is[0] != cin {
        return Err(Error::Shape(format!(
            "input shape {is:?} does not match {cin} weight input channels"
        )));
    }
    let geom = Geometry::new(cin, is[1], is[2], k_h, k_w, stride, dilation, padding)?;
    let (out_h, out_w) = geom.out_size()?;
    let rows = out_h * out_w;
    let patches = gather_patches(input.data(), &geom)?;
    let rc = float_gemm(&patches, rows, geom.patch_len(), weights.data(), cout);
    Ok(to_channel_major(&rc, rows, cout, out_h, out_w))
}

/// Packed ternary convolution: im2col over the code map, popcount GEMM, then
/// reshape to (Cout, outH, outW). Output values are alpha-scaled integers.
/// Filters are one packed row per output channel with scales attached; the
/// kernel extent cannot be recovered from the row length and is passed in.
pub fn conv2d_ternary(
    input: &PackedTernaryTensor,
    filters: &PackedTernaryTensor,
    kernel: (usize, usize),
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let is = input.shape();
    if is.len() != 3 {
        return Err(Error::Shape(format!(
            "packed feature map must be (Cin, H, W), got {is:?}"
        )));
    }
    let alphas = filters
        .scales()
        .ok_or_else(|| Error::Domain("filter bank has no per-channel scales".into()))?;
    let geom = Geometry::new(is[0], is[1], is[2], kernel.0, kernel.1, stride, dilation, padding)?;
    if filters.row_len() != geom.patch_len() {
        return Err(Error::Shape(format!(
            "filter row length {} does not match patch length {}",
            filters.row_len(),
            geom.patch_len()
        )));
    }
    let codes = input.unpack()?;
    let (out_h, out_w) = geom.out_size()?;
    let patch = im2col_codes(&codes, &geom)?;
    let packed = match &patch.storage {
        PatchStorage::Packed(p) => p,
        PatchStorage::Dense(_) => unreachable!("im2col_codes packs its rows"),
    };
    let rc = ternary_gemm(packed, filters, alphas)?;
    Ok(to_channel_major(rc.data(), patch.rows, filters.rows(), out_h, out_w))
}
