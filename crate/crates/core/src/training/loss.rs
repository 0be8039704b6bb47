//! Weighted cross-entropy over two-class score maps and the Dice overlap.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

fn score_dims(scores: &DenseTensor) -> Result<(usize, usize)> {
    let s = scores.shape();
    match s.len() {
        3 if s[0] == 2 => Ok((1, s[1] * s[2])),
        4 if s[1] == 2 => Ok((s[0], s[2] * s[3])),
        _ => Err(Error::Shape(format!("expected 2-class scores, got {s:?}"))),
    }
}

/// Mean over pixels of `w_class * (-log softmax(scores)[class])`.
pub fn weighted_cross_entropy(
    scores: &DenseTensor,
    targets: &[u8],
    w_bg: f32,
    w_fg: f32,
) -> Result<f64> {
    Ok(softmax_wce_with_grad(scores, targets, w_bg, w_fg)?.0)
}

/// Loss plus gradient w.r.t. the scores (softmax and cross-entropy fused).
pub(crate) fn softmax_wce_with_grad(
    scores: &DenseTensor,
    targets: &[u8],
    w_bg: f32,
    w_fg: f32,
) -> Result<(f64, DenseTensor)> {
    let (n, plane) = score_dims(scores)?;
    if targets.len() != n * plane {
        return Err(Error::Shape(format!(
            "{} targets for {} pixels",
            targets.len(),
            n * plane
        )));
    }
    let total = (n * plane) as f64;
    let mut loss = 0f64;
    let mut grad = vec![0f32; scores.len()];
    let data = scores.data();
    for s in 0..n {
        let b0 = s * 2 * plane;
        let b1 = b0 + plane;
        for i in 0..plane {
            let (s0, s1) = (data[b0 + i], data[b1 + i]);
            let t = targets[s * plane + i];
            let w = if t == 0 { w_bg } else { w_fg };
            let m = s0.max(s1);
            let e0 = ((s0 - m) as f64).exp();
            let e1 = ((s1 - m) as f64).exp();
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            let log_pt = if t == 0 { p0.ln() } else { p1.ln() };
            loss -= w as f64 * log_pt;
            let scale = w as f64 / total;
            let (t0, t1) = if t == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            grad[b0 + i] = (scale * (p0 - t0)) as f32;
            grad[b1 + i] = (scale * (p1 - t1)) as f32;
        }
    }
    loss /= total;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    Ok((loss, DenseTensor::from_vec(scores.shape(), grad)?))
}

/// Dice overlap 2|A n B| / (|A| + |B|); two empty masks count as 1.
pub fn dice(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p != 0, t != 0);
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Argmax mask from a (2, H, W) score map: 1 where the foreground class wins.
pub fn scores_to_mask(scores: &DenseTensor) -> Result<Vec<u8>> {
    let s = scores.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Shape(format!("expected (2, H, W) scores, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let data = scores.data();
    Ok((0..plane).map(|i| (data[plane + i] > data[i]) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_weighted_ln2() {
        let scores = DenseTensor::zeros(&[2, 2, 2]);
        let fg = weighted_cross_entropy(&scores, &[1, 1, 1, 1], 0.5, 2.5).unwrap();
        assert!((fg - 2.5 * std::f64::consts::LN_2).abs() < 1e-9, "{fg}");
        let bg = weighted_cross_entropy(&scores, &[0, 0, 0, 0], 0.5, 2.5).unwrap();
        assert!((bg - 0.5 * std::f64::consts::LN_2).abs() < 1e-9, "{bg}");
    }

    #[test]
    fn confident_correct_prediction_approaches_zero() {
        let mut scores = DenseTensor::zeros(&[2, 1, 2]);
        scores.data_mut().copy_from_slice(&[12.0, -12.0, -12.0, 12.0]);
        let loss = weighted_cross_entropy(&scores, &[0, 1], 0.5, 2.5).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn wce_shape_mismatch() {
        let scores = DenseTensor::zeros(&[2, 2, 2]);
        assert!(weighted_cross_entropy(&scores, &[0, 0], 0.5, 2.5).is_err());
        let bad = DenseTensor::zeros(&[3, 2, 2]);
        assert!(weighted_cross_entropy(&bad, &[0; 4], 0.5, 2.5).is_err());
    }

    #[test]
    fn wce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut scores = DenseTensor::zeros(&[2, 2, 3, 3]);
        for v in scores.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let targets: Vec<u8> = (0..18).map(|_| rng.gen_range(0..=1u8)).collect();
        let (_, grad) = softmax_wce_with_grad(&scores, &targets, 0.5, 2.5).unwrap();
        let h = 1e-3f32;
        for i in (0..scores.len()).step_by(7) {
            let orig = scores.data()[i];
            scores.data_mut()[i] = orig + h;
            let up = weighted_cross_entropy(&scores, &targets, 0.5, 2.5).unwrap();
            scores.data_mut()[i] = orig - h;
            let down = weighted_cross_entropy(&scores, &targets, 0.5, 2.5).unwrap();
            scores.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let a = grad.data()[i] as f64;
            assert!((a - fd).abs() < 1e-4 * fd.abs().max(1e-2), "i={i}: {a} vs {fd}");
        }
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0, 0], &[0, 0, 1]).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        let pred: Vec<u8> = (0..200).map(|i| (i < 100) as u8).collect();
        let target: Vec<u8> = (0..200).map(|i| (50 <= i && i < 150) as u8).collect();
        assert!((dice(&pred, &target).unwrap() - 0.5).abs() < 1e-12);
        assert!(dice(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn mask_from_scores() {
        let scores =
            DenseTensor::from_vec(&[2, 1, 3], vec![0.2, 1.0, -0.3, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(scores_to_mask(&scores).unwrap(), vec![1, 0, 1]);
    }
}
