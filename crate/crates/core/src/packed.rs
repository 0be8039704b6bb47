//! Two-bitplane storage for ternary tensors.
//!
//! Every element of {-1, 0, +1} is encoded by one bit in each of two planes:
//! the value bit is 1 iff the element is nonzero, and the sign bit is 1 iff
//! the element is +1. The canonical zero is (value 0, sign 0), so a sign bit
//! on a zero element is an invariant violation. Lanes are LSB-first: element
//! `j` of a row maps to bit `j % 64` of word `j / 64`.
//!
//! The innermost shape dimension is the packing axis. Each row is packed
//! independently and padded to a word boundary with canonical zeros, so row
//! dot products never cross row boundaries and padding contributes nothing
//! to the popcount kernels.

use std::fmt;

use crate::error::{Error, Result};

pub const LANES_PER_WORD: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryTensor {
    shape: Vec<usize>,
    words_per_row: usize,
    value_words: Vec<u64>,
    sign_words: Vec<u64>,
    scales: Option<Vec<f32>>,
}

/// Borrowed view of one packed row.
#[derive(Debug, Clone, Copy)]
pub struct PackedRow<'a> {
    pub value: &'a [u64],
    pub sign: &'a [u64],
    pub len: usize,
}

/// First violated invariant found by [`PackedTernaryTensor::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SignOnZero { row: usize, lane: usize },
    PaddingNonZero { row: usize, lane: usize },
    NonPositiveScale { channel: usize, value: f32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SignOnZero { row, lane } => {
                write!(f, "sign bit on zero element, row {row}, lane {lane}")
            }
            Violation::PaddingNonZero { row, lane } => {
                write!(f, "padding lane {lane} of row {row} is nonzero")
            }
            Violation::NonPositiveScale { channel, value } => {
                write!(f, "scale for channel {channel} is not positive ({value})")
            }
        }
    }
}

impl PackedTernaryTensor {
    /// Pack a tensor of {-1, 0, +1} codes along its innermost dimension.
    pub fn pack(codes: &[i8], shape: &[usize]) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Domain("cannot pack an empty shape".into()));
        }
        let len: usize = shape.iter().product();
        if codes.len() != len {
            return Err(Error::Shape(format!(
                "code length {} does not match shape {:?}",
                codes.len(),
                shape
            )));
        }
        if let Some(i) = codes.iter().position(|c| !matches!(c, -1 | 0 | 1)) {
            return Err(Error::Domain(format!(
                "code {} at index {i} is outside {{-1, 0, +1}}",
                codes[i]
            )));
        }
        let row_len = *shape.last().unwrap();
        if row_len == 0 {
            return Err(Error::Domain("packing axis has length 0".into()));
        }
        let rows = len / row_len;
        let wpr = row_len.div_ceil(LANES_PER_WORD);
        let mut value_words = vec![0u64; rows * wpr];
        let mut sign_words = vec![0u64; rows * wpr];
        for r in 0..rows {
            let src = &codes[r * row_len..(r + 1) * row_len];
            let dst = r * wpr;
            for (j, &c) in src.iter().enumerate() {
                if c != 0 {
                    let bit = 1u64 << (j % LANES_PER_WORD);
                    value_words[dst + j / LANES_PER_WORD] |= bit;
                    if c > 0 {
                        sign_words[dst + j / LANES_PER_WORD] |= bit;
                    }
                }
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            words_per_row: wpr,
            value_words,
            sign_words,
            scales: None,
        })
    }

    /// Rebuild from raw planes, e.g. when loading a model file. The caller is
    /// expected to run [`validate`](Self::validate) on untrusted input.
    pub fn from_raw_parts(
        shape: Vec<usize>,
        value_words: Vec<u64>,
        sign_words: Vec<u64>,
        scales: Option<Vec<f32>>,
    ) -> Result<Self> {
        if shape.is_empty() || *shape.last().unwrap() == 0 {
            return Err(Error::Domain("invalid packed shape".into()));
        }
        let row_len = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let wpr = row_len.div_ceil(LANES_PER_WORD);
        if value_words.len() != rows * wpr || sign_words.len() != rows * wpr {
            return Err(Error::Shape(format!(
                "plane length {}/{} does not match {} rows x {} words",
                value_words.len(),
                sign_words.len(),
                rows,
                wpr
            )));
        }
        Ok(Self { shape, words_per_row: wpr, value_words, sign_words, scales })
    }

    /// Unpack back to {-1, 0, +1} codes. Fails with an integrity error when
    /// the canonical-zero invariant is violated.
    pub fn unpack(&self) -> Result<Vec<i8>> {
        let row_len = self.row_len();
        let mut out = vec![0i8; self.rows() * row_len];
        for r in 0..self.rows() {
            let row = self.row(r);
            for (w, (&v, &s)) in row.value.iter().zip(row.sign).enumerate() {
                if s & !v != 0 {
                    let lane = w * LANES_PER_WORD + (s & !v).trailing_zeros() as usize;
                    return Err(Error::Integrity(format!(
                        "sign bit on zero element, row {r}, lane {lane}"
                    )));
                }
                if v & !row_mask(row_len, w) != 0 {
                    return Err(Error::Integrity(format!(
                        "padding lanes of row {r} are nonzero"
                    )));
                }
            }
            let dst = &mut out[r * row_len..(r + 1) * row_len];
            for (j, slot) in dst.iter_mut().enumerate() {
                let bit = 1u64 << (j % LANES_PER_WORD);
                let w = j / LANES_PER_WORD;
                if row.value[w] & bit != 0 {
                    *slot = if row.sign[w] & bit != 0 { 1 } else { -1 };
                }
            }
        }
        Ok(out)
    }

    /// Report the first violated invariant, or Ok. Never fails hard.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let row_len = self.row_len();
        for r in 0..self.rows() {
            let row = self.row(r);
            for w in 0..self.words_per_row {
                let mask = row_mask(row_len, w);
                let bad_sign = row.sign[w] & !row.value[w] & mask;
                if bad_sign != 0 {
                    return Err(Violation::SignOnZero {
                        row: r,
                        lane: w * LANES_PER_WORD + bad_sign.trailing_zeros() as usize,
                    });
                }
                let pad = (row.value[w] | row.sign[w]) & !mask;
                if pad != 0 {
                    return Err(Violation::PaddingNonZero {
                        row: r,
                        lane: w * LANES_PER_WORD + pad.trailing_zeros() as usize,
                    });
                }
            }
        }
        if let Some(scales) = &self.scales {
            for (c, &s) in scales.iter().enumerate() {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Violation::NonPositiveScale { channel: c, value: s });
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Logical length of the packing axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row(&self, r: usize) -> PackedRow<'_> {
        let span = r * self.words_per_row..(r + 1) * self.words_per_row;
        PackedRow {
            value: &self.value_words[span.clone()],
            sign: &self.sign_words[span],
            len: self.row_len(),
        }
    }

    pub fn value_words(&self) -> &[u64] {
        &self.value_words
    }

    pub fn sign_words(&self) -> &[u64] {
        &self.sign_words
    }

    pub fn scales(&self) -> Option<&[f32]> {
        self.scales.as_deref()
    }

    pub fn with_scales(mut self, scales: Vec<f32>) -> Self {
        self.scales = Some(scales);
        self
    }

    /// Number of nonzero elements (popcount of the value plane).
    pub fn nonzero_count(&self) -> usize {
        self.value_words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bytes of bitplane payload: 2 planes x ceil(row/64) words x 8 bytes.
    pub fn payload_bytes(&self) -> usize {
        (self.value_words.len() + self.sign_words.len()) * 8
    }
}

/// Mask of logical (non-padding) lanes in word `w` of a row of length `len`.
fn row_mask(len: usize, w: usize) -> u64 {
    let start = w * LANES_PER_WORD;
    if len >= start + LANES_PER_WORD {
        u64::MAX
    } else if len <= start {
        0
    } else {
        (1u64 << (len - start)) - 1
    }
}
