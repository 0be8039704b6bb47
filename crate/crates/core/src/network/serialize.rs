//! Model file format (little-endian throughout).
//!
//! ```text
//! magic   "TNN1"
//! u16     format version (1)
//! u8      mode (0 float, 1 ternary-weights, 2 ternary, 3 binary)
//! u8      flags (bit 0: ternarize_input)
//! u32 x3  input slices, h, w
//! u32     width multiplier
//! u32     layer count
//! per layer:
//!   u8    kind (0 conv, 1 pool, 2 upsample, 3 concat, 4 bn, 5 act, 6 prediction)
//!   u8    precision (0 none, 1 float32, 2 ternary, 3 binary)
//!   u32 x13  kH kW stride dilation padding cin cout outH outW fH fW fkH fkW
//!   u32   skip source + 1 (0 = none)
//!   payload:
//!     float32 weights:  u64 count, f32 x count
//!     packed weights:   u32 rows, u32 rowLen, u64 value words, u64 sign words,
//!                       f32 alpha x rows   (value plane first)
//!     batch norm:       u32 channels, f32 eps, f32: mean var gain shift x channels
//! u32     CRC32 (IEEE) of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::packed::PackedTernaryTensor;
use crate::tensor::DenseTensor;

use super::{
    BNParams, InputGeometry, LayerKind, LayerSpec, LayerWeights, Mode, Model, ModelParams,
    NetworkSpec,
};

const MAGIC: &[u8; 4] = b"TNN1";
const VERSION: u16 = 1;

pub fn serialize(model: &Model, path: &Path) -> Result<()> {
    let bytes = serialize_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn deserialize(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    deserialize_bytes(&bytes)
}

pub fn serialize_bytes(model: &Model) -> Result<Vec<u8>> {
    let spec = &model.spec;
    spec.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(mode_byte(spec.mode));
    out.push(spec.ternarize_input as u8);
    for v in [spec.input.slices, spec.input.h, spec.input.w, spec.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());

    for (i, layer) in spec.layers.iter().enumerate() {
        out.push(kind_byte(layer.kind));
        let weights = model.params.conv[i].as_ref();
        let precision = match (layer.kind, weights, &model.params.bn[i]) {
            (LayerKind::BatchNorm, _, Some(_)) => 1u8,
            (_, Some(LayerWeights::Dense(_)), _) => 1,
            (_, Some(LayerWeights::Packed(p)), _) => {
                if p.nonzero_count() == p.rows() * p.row_len() {
                    3 // no zero codes anywhere: binary bank
                } else {
                    2
                }
            }
            _ => 0,
        };
        out.push(precision);
        let g = [
            layer.kernel.0,
            layer.kernel.1,
            layer.stride,
            layer.dilation,
            layer.padding,
            layer.in_channels,
            layer.out_channels,
            layer.declared_out.0,
            layer.declared_out.1,
            layer.flops_size.0,
            layer.flops_size.1,
            layer.flops_kernel.0,
            layer.flops_kernel.1,
            layer.skip_source.map_or(0, |s| s + 1),
        ];
        for v in g {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        match (layer.kind, weights, &model.params.bn[i]) {
            (LayerKind::Conv | LayerKind::Prediction, Some(w), _) => write_weights(&mut out, w),
            (LayerKind::Conv | LayerKind::Prediction, None, _) => {
                return Err(Error::Integrity(format!("layer {i} has no weights to serialize")))
            }
            (LayerKind::BatchNorm, _, Some(bn)) => write_bn(&mut out, bn),
            (LayerKind::BatchNorm, _, None) => {
                return Err(Error::Integrity(format!("layer {i} has no batch-norm params")))
            }
            _ => {}
        }
    }

    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn deserialize_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("file shorter than magic + checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let mode = parse_mode(r.u8()?)?;
    let flags = r.u8()?;
    let input = InputGeometry {
        slices: r.u32()? as usize,
        h: r.u32()? as usize,
        w: r.u32()? as usize,
    };
    let width = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    if layer_count > 10_000 {
        return Err(Error::Format(format!("unreasonable layer count {layer_count}")));
    }

    let mut layers = Vec::with_capacity(layer_count);
    let mut conv: Vec<Option<LayerWeights>> = Vec::with_capacity(layer_count);
    let mut bn: Vec<Option<BNParams>> = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = parse_kind(r.u8()?)?;
        let precision = r.u8()?;
        let mut g = [0usize; 14];
        for v in g.iter_mut() {
            *v = r.u32()? as usize;
        }
        let layer = LayerSpec {
            kind,
            kernel: (g[0], g[1]),
            stride: g[2],
            dilation: g[3],
            padding: g[4],
            in_channels: g[5],
            out_channels: g[6],
            declared_out: (g[7], g[8]),
            flops_size: (g[9], g[10]),
            flops_kernel: (g[11], g[12]),
            skip_source: if g[13] == 0 { None } else { Some(g[13] - 1) },
        };
        let mut w = None;
        let mut b = None;
        match kind {
            LayerKind::Conv | LayerKind::Prediction => {
                w = Some(read_weights(&mut r, &layer, precision)?);
            }
            LayerKind::BatchNorm => {
                b = Some(read_bn(&mut r)?);
            }
            _ => {}
        }
        layers.push(layer);
        conv.push(w);
        bn.push(b);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes before checksum",
            body.len() - r.pos
        )));
    }

    let model = Model {
        spec: NetworkSpec {
            layers,
            input,
            width,
            mode,
            ternarize_input: flags & 1 != 0,
        },
        params: ModelParams { conv, bn },
    };
    model.spec.validate()?;
    for (i, w) in model.params.conv.iter().enumerate() {
        if let Some(LayerWeights::Packed(p)) = w {
            if let Err(v) = p.validate() {
                return Err(Error::Integrity(format!("layer {i}: {v}")));
            }
        }
    }
    Ok(model)
}

fn write_weights(out: &mut Vec<u8>, w: &LayerWeights) {
    match w {
        LayerWeights::Dense(t) => {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        LayerWeights::Packed(p) => {
            out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.row_len() as u32).to_le_bytes());
            for &word in p.value_words() {
                out.extend_from_slice(&word.to_le_bytes());
            }
            for &word in p.sign_words() {
                out.extend_from_slice(&word.to_le_bytes());
            }
            let scales = p.scales().unwrap_or(&[]);
            for &s in scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
}

fn read_weights(r: &mut Reader<'_>, layer: &LayerSpec, precision: u8) -> Result<LayerWeights> {
    match precision {
        1 => {
            let count = r.u64()? as usize;
            let expect = layer.weight_count();
            if count != expect {
                return Err(Error::Format(format!(
                    "dense payload holds {count} weights, layer expects {expect}"
                )));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f32()?);
            }
            Ok(LayerWeights::Dense(DenseTensor::from_vec(
                &[layer.out_channels, layer.in_channels, layer.kernel.0, layer.kernel.1],
                data,
            )?))
        }
        2 | 3 => {
            let rows = r.u32()? as usize;
            let row_len = r.u32()? as usize;
            if rows != layer.out_channels || row_len != layer.weight_count() / layer.out_channels.max(1)
            {
                return Err(Error::Format(format!(
                    "packed payload {rows}x{row_len} does not match layer geometry"
                )));
            }
            let wpr = row_len.div_ceil(64);
            let mut value = Vec::with_capacity(rows * wpr);
            for _ in 0..rows * wpr {
                value.push(r.u64()?);
            }
            let mut sign = Vec::with_capacity(rows * wpr);
            for _ in 0..rows * wpr {
                sign.push(r.u64()?);
            }
            let mut scales = Vec::with_capacity(rows);
            for _ in 0..rows {
                scales.push(r.f32()?);
            }
            Ok(LayerWeights::Packed(
                PackedTernaryTensor::from_raw_parts(vec![rows, row_len], value, sign, Some(scales))?,
            ))
        }
        other => Err(Error::Format(format!("unknown weight precision byte {other}"))),
    }
}

fn write_bn(out: &mut Vec<u8>, bn: &BNParams) {
    out.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
    out.extend_from_slice(&bn.epsilon.to_le_bytes());
    for arr in [&bn.mean, &bn.variance, &bn.gain, &bn.shift] {
        for &v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_bn(r: &mut Reader<'_>) -> Result<BNParams> {
    let channels = r.u32()? as usize;
    if channels > 1 << 20 {
        return Err(Error::Format(format!("unreasonable channel count {channels}")));
    }
    let epsilon = r.f32()?;
    let mut arrays = [const { Vec::new() }; 4];
    for arr in arrays.iter_mut() {
        arr.reserve(channels);
        for _ in 0..channels {
            arr.push(r.f32()?);
        }
    }
    let [mean, variance, gain, shift] = arrays;
    let bn = BNParams { mean, variance, gain, shift, epsilon };
    bn.validate()?;
    Ok(bn)
}

fn mode_byte(mode: Mode) -> u8 {
    match mode {
        Mode::Float => 0,
        Mode::TernaryWeightsOnly => 1,
        Mode::TernaryFull => 2,
        Mode::BinaryFull => 3,
    }
}

fn parse_mode(b: u8) -> Result<Mode> {
    match b {
        0 => Ok(Mode::Float),
        1 => Ok(Mode::TernaryWeightsOnly),
        2 => Ok(Mode::TernaryFull),
        3 => Ok(Mode::BinaryFull),
        other => Err(Error::Format(format!("unknown mode byte {other}"))),
    }
}

fn kind_byte(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv => 0,
        LayerKind::AvgPool => 1,
        LayerKind::Upsample => 2,
        LayerKind::ConcatSkip => 3,
        LayerKind::BatchNorm => 4,
        LayerKind::Activation => 5,
        LayerKind::Prediction => 6,
    }
}

fn parse_kind(b: u8) -> Result<LayerKind> {
    match b {
        0 => Ok(LayerKind::Conv),
        1 => Ok(LayerKind::AvgPool),
        2 => Ok(LayerKind::Upsample),
        3 => Ok(LayerKind::ConcatSkip),
        4 => Ok(LayerKind::BatchNorm),
        5 => Ok(LayerKind::Activation),
        6 => Ok(LayerKind::Prediction),
        other => Err(Error::Format(format!("unknown layer kind byte {other}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated(format!(
                "need {n} bytes at offset {}, file body has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// CRC32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[cfg(test)]
mod tests {
    use super::super::{build_toy, Mode, Model};
    use super::*;

    fn toy_model(seed: u64) -> Model {
        Model::init_dense(build_toy(4, 2, 2, 16).unwrap(), seed).unwrap()
    }

    #[test]
    fn crc32_known_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn roundtrip_float_model() {
        let model = toy_model(1);
        let bytes = serialize_bytes(&model).unwrap();
        let back = deserialize_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        // and byte-stable on re-serialization
        assert_eq!(serialize_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn roundtrip_ternary_and_binary_models() {
        for mode in [Mode::TernaryFull, Mode::BinaryFull] {
            let model = toy_model(2).quantized(mode, None).unwrap();
            let bytes = serialize_bytes(&model).unwrap();
            let back = deserialize_bytes(&bytes).unwrap();
            assert_eq!(back, model, "mode {mode:?}");
        }
    }

    #[test]
    fn ternary_file_size_matches_format_arithmetic() {
        let model = toy_model(3).quantized(Mode::TernaryFull, None).unwrap();
        let bytes = serialize_bytes(&model).unwrap();
        let mut expect = 4 + 2 + 1 + 1 + 4 * 4 + 4; // header
        for (i, layer) in model.spec.layers.iter().enumerate() {
            expect += 2 + 14 * 4; // kind, precision, geometry
            match &model.params.conv[i] {
                Some(LayerWeights::Packed(p)) => {
                    expect += 8 + p.payload_bytes() + 4 * p.rows();
                }
                Some(LayerWeights::Dense(t)) => {
                    expect += 8 + 4 * t.len();
                }
                None => {}
            }
            if let Some(bn) = &model.params.bn[i] {
                expect += 8 + 16 * bn.channels();
            }
            let _ = layer;
        }
        expect += 4; // crc
        assert_eq!(bytes.len(), expect);
    }

    #[test]
    fn corrupt_magic_is_bad_magic() {
        let mut bytes = serialize_bytes(&toy_model(4)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(deserialize_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn truncated_file_is_detected() {
        let bytes = serialize_bytes(&toy_model(5)).unwrap();
        // cutting the tail breaks the checksum over the shortened body
        let cut = &bytes[..bytes.len() - 9];
        match deserialize_bytes(cut) {
            Err(Error::ChecksumMismatch { .. }) | Err(Error::Truncated(_)) => {}
            other => panic!("expected checksum/truncation error, got {other:?}"),
        }
        // a file below the minimum length is reported as truncation
        assert!(matches!(deserialize_bytes(b"TNN1\x00"), Err(Error::Truncated(_))));
    }

    #[test]
    fn flipped_payload_byte_is_checksum_mismatch() {
        let mut bytes = serialize_bytes(&toy_model(6)).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            deserialize_bytes(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn ternarize_input_flag_roundtrips() {
        let mut model = toy_model(7).quantized(Mode::TernaryFull, None).unwrap();
        model.spec.ternarize_input = true;
        let back = deserialize_bytes(&serialize_bytes(&model).unwrap()).unwrap();
        assert!(back.spec.ternarize_input);
        assert_eq!(back.spec.mode, Mode::TernaryFull);
    }
}
