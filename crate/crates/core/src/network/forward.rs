//! Inference over a layer graph.
//!
//! In the packed modes every convolution after the first consumes hard
//! quantised activations, so its input values are exactly {-1, 0, +1} and the
//! popcount path applies. The reference engine runs the same quantised
//! network through dense arithmetic on the unpacked codes with the channel
//! scale applied after accumulation; since all pre-scale values are small
//! integers, the two engines agree bit-exactly.

use crate::activations::{tanh_beta, tern_tanh};
use crate::error::{Error, Result};
use crate::kernels::{conv2d_float, conv2d_ternary};
use crate::packed::PackedTernaryTensor;
use crate::quantize::{sign_hard, tern_hard};
use crate::tensor::DenseTensor;

use super::{LayerKind, LayerWeights, Mode, Model};

/// Which arithmetic executes quantised convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvEngine {
    /// Bit-packed popcount GEMM.
    #[default]
    Packed,
    /// Dense float simulation on the unpacked codes (the oracle path).
    Reference,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Override the model's stored mode.
    pub mode: Option<Mode>,
    /// Slope for soft activations (required in ternary-weights mode).
    pub beta: Option<f32>,
    pub engine: ConvEngine,
}

/// Run one (C, H, W) input stack through the network; returns per-class
/// scores shaped (2, H', W').
pub fn forward(model: &Model, input: &DenseTensor, opts: &ForwardOptions) -> Result<DenseTensor> {
    let spec = &model.spec;
    spec.validate()?;
    let mode = opts.mode.unwrap_or(spec.mode);
    let want = [spec.input.slices, spec.input.h, spec.input.w];
    if input.shape() != want {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            want
        )));
    }

    let mut x = input.clone();
    let mut conv_seen = false;
    if spec.ternarize_input && matches!(mode, Mode::TernaryFull | Mode::BinaryFull) {
        let codes = match mode {
            Mode::BinaryFull => sign_hard(x.data()),
            _ => tern_hard(x.data()),
        };
        x = codes_to_tensor(&codes, x.shape())?;
        conv_seen = true; // first conv may run packed now
    }

    let skip_sources = spec.skip_sources();
    let mut saved: Vec<Option<DenseTensor>> = vec![None; spec.layers.len()];

    for (i, layer) in spec.layers.iter().enumerate() {
        x = match layer.kind {
            LayerKind::Conv => {
                let out = run_conv(model, i, &x, mode, opts.engine, conv_seen)?;
                conv_seen = true;
                out
            }
            LayerKind::Prediction => {
                let weights = dense_weights(model, i)?;
                conv2d_float(&x, weights, layer.stride, layer.dilation, layer.padding)?
            }
            LayerKind::BatchNorm => {
                let bn = model.params.bn[i]
                    .as_ref()
                    .ok_or_else(|| Error::Integrity(format!("layer {i} has no batch-norm params")))?;
                apply_bn_folded(&x, bn)?
            }
            LayerKind::AvgPool => avg_pool2(&x)?,
            LayerKind::Upsample => upsample2_nearest(&x)?,
            LayerKind::ConcatSkip => {
                let src = layer.skip_source.expect("validated");
                let skip = saved[src]
                    .as_ref()
                    .ok_or_else(|| Error::Integrity(format!("skip source {src} not recorded")))?;
                concat_channels(&x, skip)?
            }
            LayerKind::Activation => apply_activation(&x, mode, opts.beta)?,
        };
        if skip_sources.contains(&i) {
            saved[i] = Some(x.clone());
        }
    }
    Ok(x)
}

fn dense_weights<'m>(model: &'m Model, i: usize) -> Result<&'m DenseTensor> {
    match &model.params.conv[i] {
        Some(LayerWeights::Dense(t)) => Ok(t),
        Some(LayerWeights::Packed(_)) => Err(Error::Domain(format!(
            "layer {i} holds packed weights where dense ones are required"
        ))),
        None => Err(Error::Integrity(format!("layer {i} has no weights"))),
    }
}

fn run_conv(
    model: &Model,
    i: usize,
    x: &DenseTensor,
    mode: Mode,
    engine: ConvEngine,
    conv_seen: bool,
) -> Result<DenseTensor> {
    let layer = &model.spec.layers[i];
    match (&model.params.conv[i], mode) {
        (Some(LayerWeights::Dense(w)), Mode::Float) => {
            conv2d_float(x, w, layer.stride, layer.dilation, layer.padding)
        }
        (Some(LayerWeights::Dense(_)), _) => Err(Error::Domain(format!(
            "mode '{}' needs quantised weights but layer {i} is full precision; quantise the model first",
            mode.as_str()
        ))),
        (Some(LayerWeights::Packed(p)), mode) => {
            // The first conv consumes the raw real-valued input and must run
            // densely (unless the input itself was ternarised). Soft-activation
            // modes are dense throughout.
            let hard = matches!(mode, Mode::TernaryFull | Mode::BinaryFull);
            let packed_ok = hard && conv_seen && engine == ConvEngine::Packed;
            if packed_ok {
                conv_packed(x, p, layer.kernel, layer.stride, layer.dilation, layer.padding)
            } else {
                conv_quantized_dense(x, p, layer.kernel, layer.stride, layer.dilation, layer.padding)
            }
        }
        (None, _) => Err(Error::Integrity(format!("layer {i} has no weights"))),
    }
}

/// Dense convolution on unpacked codes with the per-channel scale applied
/// after accumulation, mirroring the packed path's `alpha * integer`.
pub(crate) fn conv_quantized_dense(
    x: &DenseTensor,
    filters: &PackedTernaryTensor,
    kernel: (usize, usize),
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let alphas = filters
        .scales()
        .ok_or_else(|| Error::Domain("packed filters have no scales".into()))?
        .to_vec();
    let cout = filters.rows();
    let cin = x.shape()[0];
    if filters.row_len() != cin * kernel.0 * kernel.1 {
        return Err(Error::Shape(format!(
            "filter row length {} does not match {}x{}x{}",
            filters.row_len(),
            cin,
            kernel.0,
            kernel.1
        )));
    }
    let codes = filters.unpack()?;
    let weights = DenseTensor::from_vec(
        &[cout, cin, kernel.0, kernel.1],
        codes.iter().map(|&c| c as f32).collect(),
    )?;
    let mut out = conv2d_float(x, &weights, stride, dilation, padding)?;
    let plane = out.len() / cout;
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v = alphas[idx / plane] * *v;
    }
    Ok(out)
}

/// Packed convolution on a feature map whose values are exact codes.
fn conv_packed(
    x: &DenseTensor,
    filters: &PackedTernaryTensor,
    kernel: (usize, usize),
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let codes = tensor_to_codes(x)?;
    let packed = PackedTernaryTensor::pack(&codes, x.shape())?;
    conv2d_ternary(&packed, filters, kernel, stride, dilation, padding)
}

fn tensor_to_codes(x: &DenseTensor) -> Result<Vec<i8>> {
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else if v == -1.0 {
                Ok(-1)
            } else {
                Err(Error::Integrity(format!(
                    "packed conv input is not ternary: value {v} at index {i}"
                )))
            }
        })
        .collect()
}

fn codes_to_tensor(codes: &[i8], shape: &[usize]) -> Result<DenseTensor> {
    DenseTensor::from_vec(shape, codes.iter().map(|&c| c as f32).collect())
}

pub(crate) fn apply_bn_folded(x: &DenseTensor, bn: &super::BNParams) -> Result<DenseTensor> {
    let c = x.shape()[0];
    if bn.channels() != c {
        return Err(Error::Shape(format!(
            "batch norm over {} channels applied to {c}",
            bn.channels()
        )));
    }
    let (a, b) = bn.folded();
    let plane = x.len() / c;
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = idx / plane;
        *v = a[ch] * *v + b[ch];
    }
    Ok(out)
}

fn apply_activation(x: &DenseTensor, mode: Mode, beta: Option<f32>) -> Result<DenseTensor> {
    let data = match mode {
        Mode::Float => x.data().iter().map(|&v| v.tanh()).collect(),
        Mode::TernaryWeightsOnly => {
            let beta = beta.ok_or_else(|| {
                Error::Domain("ternary-weights mode needs a beta for soft activations".into())
            })?;
            tern_tanh(x.data(), beta)?
        }
        Mode::TernaryFull => tern_hard(x.data()).iter().map(|&c| c as f32).collect(),
        Mode::BinaryFull => sign_hard(x.data()).iter().map(|&c| c as f32).collect(),
    };
    let _ = tanh_beta; // binary soft continuation is used by training only
    DenseTensor::from_vec(x.shape(), data)
}

/// 2x2 average pooling, stride 2, on a (C, H, W) tensor.
pub(crate) fn avg_pool2(x: &DenseTensor) -> Result<DenseTensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::Shape(format!("avg pool needs even (C, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f32; c * oh * ow];
    let src = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let sum = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
                out[(ch * oh + oy) * ow + ox] = sum * 0.25;
            }
        }
    }
    DenseTensor::from_vec(&[c, oh, ow], out)
}

/// Nearest-neighbour 2x upsampling on a (C, H, W) tensor.
pub(crate) fn upsample2_nearest(x: &DenseTensor) -> Result<DenseTensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("upsample needs (C, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0f32; c * oh * ow];
    let src = x.data();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = src[(ch * h + y) * w + xx];
                let base = (ch * oh + 2 * y) * ow + 2 * xx;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    DenseTensor::from_vec(&[c, oh, ow], out)
}

/// Channel concatenation [current, skip]; spatial sizes must agree.
pub(crate) fn concat_channels(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(Error::Shape(format!(
            "concat spatial mismatch: {sa:?} vs {sb:?}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    DenseTensor::from_vec(&[sa[0] + sb[0], sa[1], sa[2]], data)
}
