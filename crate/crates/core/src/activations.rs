//! The ternary hyperbolic tangent, its analytic derivative, the binary tanh
//! continuation, the boxcar straight-through baseline, and the slope schedule.
//!
//! `tern_tanh(x) = 0.5 * tanh(2*beta*x - beta) - 0.5 * tanh(-2*beta*x - beta)`
//! forms plateaus around 0 and beyond +-1; as beta grows it converges to the
//! hard ternary step with transitions at +-0.5. Beta is the single slope
//! parameter and is ramped once per epoch during training.

use crate::error::{Error, Result};

/// Linear beta ramp, constant within an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationSchedule {
    pub beta_start: f32,
    pub beta_end: f32,
    pub total_epochs: usize,
}

impl ContinuationSchedule {
    pub fn new(beta_start: f32, beta_end: f32, total_epochs: usize) -> Result<Self> {
        if !(beta_start > 0.0 && beta_end > 0.0 && beta_start.is_finite() && beta_end.is_finite())
        {
            return Err(Error::Domain(format!(
                "beta range ({beta_start}, {beta_end}) must be positive and finite"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Domain(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::Domain("schedule needs at least one epoch".into()));
        }
        Ok(Self { beta_start, beta_end, total_epochs })
    }

    /// Constant beta for every epoch (the no-continuation variant).
    pub fn fixed(beta: f32, total_epochs: usize) -> Result<Self> {
        Self::new(beta, beta, total_epochs)
    }

    pub fn is_fixed(&self) -> bool {
        self.beta_start == self.beta_end
    }

    /// Beta for a given epoch, interpolated evenly from start to end.
    pub fn beta_at(&self, epoch: usize) -> Result<f32> {
        if epoch >= self.total_epochs {
            return Err(Error::Domain(format!(
                "epoch {epoch} out of range 0..{}",
                self.total_epochs
            )));
        }
        if self.total_epochs == 1 {
            return Ok(self.beta_end);
        }
        let t = epoch as f32 / (self.total_epochs - 1) as f32;
        Ok(self.beta_start + (self.beta_end - self.beta_start) * t)
    }
}

fn check_beta(beta: f32) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Reference scalar evaluation in f64.
#[inline]
pub fn tern_tanh_at(x: f64, beta: f64) -> f64 {
    0.5 * (2.0 * beta * x - beta).tanh() - 0.5 * (-2.0 * beta * x - beta).tanh()
}

/// Analytic derivative: beta * (sech^2(2bx - b) + sech^2(2bx + b)).
#[inline]
pub fn tern_tanh_slope_at(x: f64, beta: f64) -> f64 {
    beta * (sech2(2.0 * beta * x - beta) + sech2(2.0 * beta * x + beta))
}

#[inline]
fn sech2(t: f64) -> f64 {
    let s = 1.0 / t.cosh();
    s * s
}

#[inline]
fn sech2_f32(t: f32) -> f32 {
    let s = 1.0 / t.cosh();
    s * s
}

/// Elementwise ternary tanh.
pub fn tern_tanh(xs: &[f32], beta: f32) -> Result<Vec<f32>> {
    check_beta(beta)?;
    Ok(xs
        .iter()
        .map(|&x| 0.5 * (2.0 * beta * x - beta).tanh() - 0.5 * (-2.0 * beta * x - beta).tanh())
        .collect())
}

/// Elementwise derivative of [`tern_tanh`].
pub fn tern_tanh_grad(xs: &[f32], beta: f32) -> Result<Vec<f32>> {
    check_beta(beta)?;
    Ok(xs
        .iter()
        .map(|&x| beta * (sech2_f32(2.0 * beta * x - beta) + sech2_f32(2.0 * beta * x + beta)))
        .collect())
}

/// Binary continuation `tanh(beta * x)`; approaches sgn(x) as beta grows.
pub fn tanh_beta(xs: &[f32], beta: f32) -> Vec<f32> {
    xs.iter().map(|&x| (beta * x).tanh()).collect()
}

/// Boxcar straight-through baseline: forward is sgn(x) (+-1), backward is a
/// gradient mask of 1 where |x| <= 1 and 0 elsewhere. Forward and backward
/// intentionally differ.
pub fn boxcar_ste(xs: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let forward = xs.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect();
    let mask = xs.iter().map(|&x| if x.abs() <= 1.0 { 1.0 } else { 0.0 }).collect();
    (forward, mask)
}
