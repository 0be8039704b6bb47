//! Weight ternarisation/binarisation and hard activation quantisers.
//!
//! The ternary weight approximation W ~ alpha * W~ picks, per output channel
//! of n weights, the threshold `delta = (0.7 / n) * sum(|w|)` and the scale
//! `alpha = mean(|w|)` over the surviving (nonzero-coded) weights. The sparse
//! variant instead forces an exact fraction of zeros per filter by ranking
//! magnitudes.

use crate::error::{Error, Result};
use crate::packed::PackedTernaryTensor;
use crate::tensor::DenseTensor;

/// Output of a weight quantiser: codes shaped like the filter bank plus one
/// scale and one threshold per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub codes: Vec<i8>,
    pub shape: Vec<usize>,
    pub alpha: Vec<f32>,
    pub delta: Vec<f32>,
}

impl QuantResult {
    pub fn out_channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn filter_len(&self) -> usize {
        self.codes.len() / self.alpha.len()
    }

    /// Pack the codes as one row per output channel, scales attached.
    pub fn pack_filters(&self) -> Result<PackedTernaryTensor> {
        let packed = PackedTernaryTensor::pack(
            &self.codes,
            &[self.out_channels(), self.filter_len()],
        )?;
        Ok(packed.with_scales(self.alpha.clone()))
    }

    /// Dense `alpha * codes` tensor in the original filter-bank shape.
    pub fn dequantize(&self) -> DenseTensor {
        let n = self.filter_len();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.alpha[i / n] * c as f32)
            .collect();
        DenseTensor::from_vec(&self.shape, data).expect("codes match shape")
    }

    /// Fraction of zero codes over the whole bank.
    pub fn zero_fraction(&self) -> f32 {
        let zeros = self.codes.iter().filter(|&&c| c == 0).count();
        zeros as f32 / self.codes.len() as f32
    }
}

fn filter_bank_dims(w: &DenseTensor) -> Result<(usize, usize)> {
    let shape = w.shape();
    if shape.is_empty() || shape[0] == 0 || w.is_empty() {
        return Err(Error::Domain("empty filter bank".into()));
    }
    let cout = shape[0];
    Ok((cout, w.len() / cout))
}

/// Ternarise a filter bank per output channel (threshold 0.7 * mean |w|).
pub fn ternarize_weights(w: &DenseTensor) -> Result<QuantResult> {
    w.ensure_finite("filter bank")?;
    let (cout, n) = filter_bank_dims(w)?;
    let mut codes = vec![0i8; w.len()];
    let mut alpha = vec![0f32; cout];
    let mut delta = vec![0f32; cout];
    for f in 0..cout {
        let weights = &w.data()[f * n..(f + 1) * n];
        let abs_sum: f64 = weights.iter().map(|v| v.abs() as f64).sum();
        let d = (0.7 * abs_sum / n as f64) as f32;
        let mut surv_sum = 0f64;
        let mut surv_count = 0usize;
        for (j, &v) in weights.iter().enumerate() {
            codes[f * n + j] = if v > d {
                1
            } else if v < -d {
                -1
            } else {
                0
            };
            if codes[f * n + j] != 0 {
                surv_sum += v.abs() as f64;
                surv_count += 1;
            }
        }
        delta[f] = d;
        alpha[f] = if surv_count == 0 { 0.0 } else { (surv_sum / surv_count as f64) as f32 };
    }
    Ok(QuantResult { codes, shape: w.shape().to_vec(), alpha, delta })
}

/// Ternarise with an exact per-filter zero fraction: the ceil(sparsity * n)
/// smallest magnitudes (ties broken by ascending index) quantise to zero.
pub fn ternarize_sparse(w: &DenseTensor, sparsity: f32) -> Result<QuantResult> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Domain(format!(
            "sparsity {sparsity} is outside [0, 1)"
        )));
    }
    w.ensure_finite("filter bank")?;
    let (cout, n) = filter_bank_dims(w)?;
    let zeros_per_filter = (sparsity as f64 * n as f64).ceil() as usize;
    let mut codes = vec![0i8; w.len()];
    let mut alpha = vec![0f32; cout];
    let mut delta = vec![0f32; cout];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for f in 0..cout {
        let weights = &w.data()[f * n..(f + 1) * n];
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            weights[a]
                .abs()
                .partial_cmp(&weights[b].abs())
                .expect("finite magnitudes")
                .then(a.cmp(&b))
        });
        let mut surv_sum = 0f64;
        let mut surv_count = 0usize;
        for &j in &order[zeros_per_filter..] {
            let v = weights[j];
            codes[f * n + j] = if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            };
            if codes[f * n + j] != 0 {
                surv_sum += v.abs() as f64;
                surv_count += 1;
            }
        }
        delta[f] = if zeros_per_filter == 0 {
            0.0
        } else {
            weights[order[zeros_per_filter - 1]].abs()
        };
        alpha[f] = if surv_count == 0 { 0.0 } else { (surv_sum / surv_count as f64) as f32 };
    }
    Ok(QuantResult { codes, shape: w.shape().to_vec(), alpha, delta })
}

/// Binary baseline: `sgn(w)` codes with `alpha = mean(|w|)` per channel.
pub fn binarize_weights(w: &DenseTensor) -> Result<QuantResult> {
    w.ensure_finite("filter bank")?;
    let (cout, n) = filter_bank_dims(w)?;
    let mut codes = vec![0i8; w.len()];
    let mut alpha = vec![0f32; cout];
    for f in 0..cout {
        let weights = &w.data()[f * n..(f + 1) * n];
        let abs_sum: f64 = weights.iter().map(|v| v.abs() as f64).sum();
        for (j, &v) in weights.iter().enumerate() {
            codes[f * n + j] = sign_hard_scalar(v);
        }
        alpha[f] = (abs_sum / n as f64) as f32;
    }
    Ok(QuantResult { codes, shape: w.shape().to_vec(), alpha, delta: vec![0.0; cout] })
}

/// Hard ternary step: +1 above 0.5, -1 below -0.5, 0 on the plateau.
#[inline]
pub fn tern_hard_scalar(x: f32) -> i8 {
    if x > 0.5 {
        1
    } else if x < -0.5 {
        -1
    } else {
        0
    }
}

pub fn tern_hard(xs: &[f32]) -> Vec<i8> {
    xs.iter().map(|&x| tern_hard_scalar(x)).collect()
}

/// Sign step with sgn(0) = +1.
#[inline]
pub fn sign_hard_scalar(x: f32) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn sign_hard(xs: &[f32]) -> Vec<i8> {
    xs.iter().map(|&x| sign_hard_scalar(x)).collect()
}
