//! Batched layer operations with reverse-mode gradients.
//!
//! Tensors are (N, C, H, W). Convolutions run per sample over im2col patches;
//! batch norm couples samples through its batch statistics. Backward passes
//! recompute patches from the cached layer inputs instead of storing them.

use crate::error::{Error, Result};
use crate::kernels::{float_gemm, gather_patches, scatter_patches, Geometry};
use crate::parallel::map_indexed;
use crate::tensor::DenseTensor;

/// Activation used during a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    /// Plain tanh (full-precision baseline).
    Tanh,
    /// Soft ternary tanh at the given slope.
    TernTanh(f32),
    /// Soft binary continuation tanh(beta x).
    TanhBeta(f32),
    /// Hard sign forward with boxcar gradient mask (the adhoc baseline).
    Boxcar,
}

pub(crate) fn batch_dims(x: &DenseTensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected (N, C, H, W), got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn conv_geom(x: &DenseTensor, w: &DenseTensor, padding: usize) -> Result<Geometry> {
    let (_, c, h, wd) = batch_dims(x)?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(Error::Shape(format!(
            "weights {ws:?} do not match {c} input channels"
        )));
    }
    Geometry::new(c, h, wd, ws[2], ws[3], 1, 1, padding)
}

/// Batched convolution (stride 1, dilation 1 in the training nets).
pub(crate) fn conv_forward(x: &DenseTensor, w: &DenseTensor, padding: usize) -> Result<DenseTensor> {
    let (n, c, h, wd) = batch_dims(x)?;
    let geom = conv_geom(x, w, padding)?;
    let (oh, ow) = geom.out_size()?;
    let cout = w.shape()[0];
    let rows = oh * ow;
    let cols = geom.patch_len();
    let sample_in = c * h * wd;
    let sample_out = cout * rows;
    let outs: Vec<Result<Vec<f32>>> = map_indexed(n, |s| {
        let patches = gather_patches(&x.data()[s * sample_in..(s + 1) * sample_in], &geom)?;
        let rc = float_gemm(&patches, rows, cols, w.data(), cout);
        // transpose to channel-major (Cout, oh, ow)
        let mut per = vec![0f32; sample_out];
        for r in 0..rows {
            for j in 0..cout {
                per[j * rows + r] = rc[r * cout + j];
            }
        }
        Ok(per)
    });
    let mut data = Vec::with_capacity(n * sample_out);
    for per in outs {
        data.extend_from_slice(&per?);
    }
    DenseTensor::from_vec(&[n, cout, oh, ow], data)
}

/// Gradients w.r.t. input and weights.
pub(crate) fn conv_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    padding: usize,
    dout: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let (n, c, h, wd) = batch_dims(x)?;
    let geom = conv_geom(x, w, padding)?;
    let (oh, ow) = geom.out_size()?;
    let cout = w.shape()[0];
    let rows = oh * ow;
    let cols = geom.patch_len();
    let sample_in = c * h * wd;
    let sample_out = cout * rows;

    let per_sample: Vec<Result<(Vec<f32>, Vec<f32>)>> = map_indexed(n, |s| {
        let xin = &x.data()[s * sample_in..(s + 1) * sample_in];
        let dy = &dout.data()[s * sample_out..(s + 1) * sample_out];
        let patches = gather_patches(xin, &geom)?;

        // dW[oc][k] += sum_r dy[oc][r] * patch[r][k]
        let mut dw = vec![0f32; cout * cols];
        for oc in 0..cout {
            let drow = &dy[oc * rows..(oc + 1) * rows];
            let wrow = &mut dw[oc * cols..(oc + 1) * cols];
            for (r, &g) in drow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let prow = &patches[r * cols..(r + 1) * cols];
                for (o, &p) in wrow.iter_mut().zip(prow) {
                    *o += g * p;
                }
            }
        }

        // dpatch[r][k] = sum_oc dy[oc][r] * w[oc][k], then fold back
        let mut dpatch = vec![0f32; rows * cols];
        for oc in 0..cout {
            let drow = &dy[oc * rows..(oc + 1) * rows];
            let wrow = &w.data()[oc * cols..(oc + 1) * cols];
            for (r, &g) in drow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let prow = &mut dpatch[r * cols..(r + 1) * cols];
                for (o, &wv) in prow.iter_mut().zip(wrow) {
                    *o += g * wv;
                }
            }
        }
        let mut dx = vec![0f32; sample_in];
        scatter_patches(&dpatch, &geom, &mut dx)?;
        Ok((dx, dw))
    });

    let mut dx = Vec::with_capacity(n * sample_in);
    let mut dw_total = vec![0f32; cout * cols];
    for item in per_sample {
        let (dxs, dws) = item?;
        dx.extend_from_slice(&dxs);
        for (a, b) in dw_total.iter_mut().zip(&dws) {
            *a += b;
        }
    }
    Ok((
        DenseTensor::from_vec(&[n, c, h, wd], dx)?,
        DenseTensor::from_vec(w.shape(), dw_total)?,
    ))
}

/// Per-channel batch statistics cached for the backward pass and for the
/// running-average update.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub invstd: Vec<f32>,
}

pub(crate) fn bn_forward(
    x: &DenseTensor,
    gain: &[f32],
    shift: &[f32],
    eps: f32,
) -> Result<(DenseTensor, BnCache)> {
    let (n, c, h, w) = batch_dims(x)?;
    if gain.len() != c || shift.len() != c {
        return Err(Error::Shape("batch-norm parameter length mismatch".into()));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    let mut invstd = vec![0f32; c];
    for ch in 0..c {
        let mut sum = 0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                sum += v as f64;
            }
        }
        let mu = sum / m;
        let mut sq = 0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                let d = v as f64 - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
        invstd[ch] = 1.0 / (var[ch] + eps).sqrt();
    }
    let mut out = vec![0f32; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (mu, is, g, b) = (mean[ch], invstd[ch], gain[ch], shift[ch]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&x.data()[base..base + plane]) {
                *o = (v - mu) * is * g + b;
            }
        }
    }
    Ok((DenseTensor::from_vec(x.shape(), out)?, BnCache { mean, var, invstd }))
}

pub(crate) fn bn_backward(
    x: &DenseTensor,
    cache: &BnCache,
    gain: &[f32],
    dy: &DenseTensor,
) -> Result<(DenseTensor, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = batch_dims(x)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dgain = vec![0f32; c];
    let mut dshift = vec![0f32; c];
    let mut dx = vec![0f32; x.len()];
    for ch in 0..c {
        let (mu, is) = (cache.mean[ch] as f64, cache.invstd[ch] as f64);
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let g = dy.data()[base + i] as f64;
                let xhat = (x.data()[base + i] as f64 - mu) * is;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dgain[ch] = sum_dy_xhat as f32;
        dshift[ch] = sum_dy as f32;
        let scale = gain[ch] as f64 * is / m;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let g = dy.data()[base + i] as f64;
                let xhat = (x.data()[base + i] as f64 - mu) * is;
                dx[base + i] = (scale * (m * g - sum_dy - xhat * sum_dy_xhat)) as f32;
            }
        }
    }
    Ok((DenseTensor::from_vec(x.shape(), dx)?, dgain, dshift))
}

pub(crate) fn avg_pool_forward(x: &DenseTensor) -> Result<DenseTensor> {
    let (n, c, h, w) = batch_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("avg pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f32; n * c * oh * ow];
    let src = x.data();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let p = ib + 2 * oy * w + 2 * ox;
                out[ob + oy * ow + ox] =
                    (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]) * 0.25;
            }
        }
    }
    DenseTensor::from_vec(&[n, c, oh, ow], out)
}

pub(crate) fn avg_pool_backward(dy: &DenseTensor) -> Result<DenseTensor> {
    let (n, c, oh, ow) = batch_dims(dy)?;
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = vec![0f32; n * c * h * w];
    let g = dy.data();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[ob + oy * ow + ox] * 0.25;
                let p = ib + 2 * oy * w + 2 * ox;
                dx[p] += v;
                dx[p + 1] += v;
                dx[p + w] += v;
                dx[p + w + 1] += v;
            }
        }
    }
    DenseTensor::from_vec(&[n, c, h, w], dx)
}

pub(crate) fn upsample_forward(x: &DenseTensor) -> Result<DenseTensor> {
    let (n, c, h, w) = batch_dims(x)?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0f32; n * c * oh * ow];
    let src = x.data();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for y in 0..h {
            for xx in 0..w {
                let v = src[ib + y * w + xx];
                let p = ob + 2 * y * ow + 2 * xx;
                out[p] = v;
                out[p + 1] = v;
                out[p + ow] = v;
                out[p + ow + 1] = v;
            }
        }
    }
    DenseTensor::from_vec(&[n, c, oh, ow], out)
}

pub(crate) fn upsample_backward(dy: &DenseTensor) -> Result<DenseTensor> {
    let (n, c, oh, ow) = batch_dims(dy)?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape("upsample gradient dims must be even".into()));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0f32; n * c * h * w];
    let g = dy.data();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for y in 0..h {
            for xx in 0..w {
                let p = ob + 2 * y * ow + 2 * xx;
                dx[ib + y * w + xx] = g[p] + g[p + 1] + g[p + ow] + g[p + ow + 1];
            }
        }
    }
    DenseTensor::from_vec(&[n, c, h, w], dx)
}

/// Concatenate along the channel axis: [main, skip].
pub(crate) fn concat_forward(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (n, ca, h, w) = batch_dims(a)?;
    let (nb, cb, hb, wb) = batch_dims(b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![0f32; n * (ca + cb) * plane];
    for s in 0..n {
        let ob = s * (ca + cb) * plane;
        out[ob..ob + ca * plane]
            .copy_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out[ob + ca * plane..ob + (ca + cb) * plane]
            .copy_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    DenseTensor::from_vec(&[n, ca + cb, h, w], out)
}

pub(crate) fn concat_backward(
    dy: &DenseTensor,
    ca: usize,
) -> Result<(DenseTensor, DenseTensor)> {
    let (n, c, h, w) = batch_dims(dy)?;
    let cb = c - ca;
    let plane = h * w;
    let mut da = vec![0f32; n * ca * plane];
    let mut db = vec![0f32; n * cb * plane];
    for s in 0..n {
        let ib = s * c * plane;
        da[s * ca * plane..(s + 1) * ca * plane]
            .copy_from_slice(&dy.data()[ib..ib + ca * plane]);
        db[s * cb * plane..(s + 1) * cb * plane]
            .copy_from_slice(&dy.data()[ib + ca * plane..ib + c * plane]);
    }
    Ok((
        DenseTensor::from_vec(&[n, ca, h, w], da)?,
        DenseTensor::from_vec(&[n, cb, h, w], db)?,
    ))
}

pub(crate) fn act_forward(x: &DenseTensor, kind: ActKind) -> Result<DenseTensor> {
    let data: Vec<f32> = match kind {
        ActKind::Tanh => x.data().iter().map(|&v| v.tanh()).collect(),
        ActKind::TernTanh(beta) => crate::activations::tern_tanh(x.data(), beta)?,
        ActKind::TanhBeta(beta) => crate::activations::tanh_beta(x.data(), beta),
        ActKind::Boxcar => crate::activations::boxcar_ste(x.data()).0,
    };
    DenseTensor::from_vec(x.shape(), data)
}

/// `x` is the activation input, `y` its output (both cached on the tape).
pub(crate) fn act_backward(
    x: &DenseTensor,
    y: &DenseTensor,
    kind: ActKind,
    dy: &DenseTensor,
) -> Result<DenseTensor> {
    let data: Vec<f32> = match kind {
        ActKind::Tanh => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&yv, &g)| g * (1.0 - yv * yv))
            .collect(),
        ActKind::TernTanh(beta) => {
            let slope = crate::activations::tern_tanh_grad(x.data(), beta)?;
            slope.iter().zip(dy.data()).map(|(&s, &g)| g * s).collect()
        }
        ActKind::TanhBeta(beta) => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&yv, &g)| g * beta * (1.0 - yv * yv))
            .collect(),
        ActKind::Boxcar => {
            let (_, mask) = crate::activations::boxcar_ste(x.data());
            mask.iter().zip(dy.data()).map(|(&m, &g)| g * m).collect()
        }
    };
    DenseTensor::from_vec(x.shape(), data)
}
