//! Synthetic segmentation data: one soft-edged ellipse on a textured noise
//! background, replicated across the input slices with sub-pixel jitter. The
//! mask is the exact rasterisation of the central slice's ellipse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in pixels.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised squared radius; <= 1 inside.
    pub fn field(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// (slices, H, W), normalised to zero mean and unit variance.
    pub image: DenseTensor,
    /// (H * W) binary mask of the central slice's ellipse.
    pub mask: Vec<u8>,
    pub ellipse: Ellipse,
}

/// Exact hard rasterisation of an ellipse at pixel centres.
pub fn rasterize_ellipse(e: &Ellipse, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if e.field(x as f64, y as f64) <= 1.0 {
                mask[y * size + x] = 1;
            }
        }
    }
    mask
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Coarse random grid, bilinearly upsampled: low-frequency texture.
fn texture(rng: &mut ChaCha8Rng, size: usize, cells: usize, amplitude: f64) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| normal(rng) * amplitude).collect();
    let mut out = vec![0f64; size * size];
    let step = size as f64 / cells as f64;
    for y in 0..size {
        let gy = (y as f64 / step).min(cells as f64 - 1e-9);
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..size {
            let gx = (x as f64 / step).min(cells as f64 - 1e-9);
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let v00 = grid[y0 * g + x0];
            let v01 = grid[y0 * g + x0 + 1];
            let v10 = grid[(y0 + 1) * g + x0];
            let v11 = grid[(y0 + 1) * g + x0 + 1];
            out[y * size + x] =
                v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
        }
    }
    out
}

pub(crate) fn gen_sample(rng: &mut ChaCha8Rng, size: usize, in_slices: usize) -> Sample {
    let s = size as f64;
    let ellipse = Ellipse {
        cx: rng.gen_range(0.3 * s..0.7 * s),
        cy: rng.gen_range(0.3 * s..0.7 * s),
        a: rng.gen_range(0.09 * s..0.17 * s),
        b: rng.gen_range(0.09 * s..0.17 * s),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let tex = texture(rng, size, 8, 0.45);
    let amplitude = 1.0 + normal(rng) * 0.15;
    let edge = 6.0;

    // Dimmer distractor blobs that must not be segmented: the foreground is
    // defined by amplitude, not by being the only structure.
    let n_distractors = rng.gen_range(1..=3usize);
    let distractors: Vec<(Ellipse, f64)> = (0..n_distractors)
        .map(|_| {
            let e = Ellipse {
                cx: rng.gen_range(0.15 * s..0.85 * s),
                cy: rng.gen_range(0.15 * s..0.85 * s),
                a: rng.gen_range(0.06 * s..0.13 * s),
                b: rng.gen_range(0.06 * s..0.13 * s),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            };
            (e, amplitude * rng.gen_range(0.35..0.5))
        })
        .collect();

    let center = in_slices / 2;
    let mut image = vec![0f32; in_slices * size * size];
    for slice in 0..in_slices {
        let (jx, jy) = if slice == center {
            (0.0, 0.0)
        } else {
            (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        };
        let shifted = Ellipse { cx: ellipse.cx + jx, cy: ellipse.cy + jy, ..ellipse };
        let base = slice * size * size;
        for y in 0..size {
            for x in 0..size {
                let d = shifted.field(x as f64, y as f64);
                let fg = 1.0 / (1.0 + (-(1.0 - d) * edge).exp());
                let mut v = tex[y * size + x] + amplitude * fg;
                for (de, da) in &distractors {
                    let dd = de.field(x as f64, y as f64);
                    v += da / (1.0 + (-(1.0 - dd) * edge).exp());
                }
                let noise = normal(rng) * 0.35;
                image[base + y * size + x] = (v + noise) as f32;
            }
        }
    }

    // zero mean, unit variance over the whole stack
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-9);
    for v in image.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }

    Sample {
        image: DenseTensor::from_vec(&[in_slices, size, size], image).expect("sizes agree"),
        mask: rasterize_ellipse(&ellipse, size),
        ellipse,
    }
}

/// Deterministic labelled dataset: same seed, same bytes.
pub fn synth_dataset(seed: u64, n: usize, size: usize, in_slices: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_sample(&mut rng, size, in_slices)).collect()
}
