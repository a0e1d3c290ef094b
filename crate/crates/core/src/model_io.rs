//! The MPQW weight container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "MPQW"
//! version      u32      1
//! has_config   u8       0 or 1
//! config       7 x u32  n_layers, d_model, n_heads, d_ff, vocab_size,
//!                       max_seq_len, task (0 = classification, 1 = LM),
//!              u32      n_classes (0 for LM)           -- only if has_config
//! n_records    u32
//! record*:
//!   name_len   u16, then name_len bytes of UTF-8
//!   dtype      u8       0 = fp32, 1 = fp16, 2 = int8, 3 = int4
//!   rank       u32, then rank x u32 dims
//!   axis       u8       channel axis, 255 = per-tensor
//!   n_scales   u32      0 for fp32/fp16, dims[axis] or 1 otherwise
//!   scales     n_scales x f32
//!   mins       n_scales x f32
//!   payload    fp32: 4 bytes/elem, fp16: 2, int8: 1,
//!              int4: rows x ceil(last_dim / 2), two codes per byte, low
//!              nibble first, odd rows padded with a zero nibble
//! crc32        u32      IEEE CRC-32 of every preceding byte
//! ```
//!
//! Memory accounting counts payload bytes plus 8 bytes (one scale, one min)
//! per quantization channel; names and dims are not counted.

use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskHead, TransformerModel};
use crate::quant::{dequantize, QuantParams, QuantizedTensor};
use crate::tensor::{check_shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MPQW";
pub const FORMAT_VERSION: u32 = 1;
const PER_TENSOR: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Fp32 = 0,
    Fp16 = 1,
    Int8 = 2,
    Int4 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::Fp32,
            1 => DType::Fp16,
            2 => DType::Int8,
            3 => DType::Int4,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Vec<f32>),
    /// Raw binary16 bit patterns.
    Fp16(Vec<u16>),
    Quantized(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

fn int4_row_bytes(cols: usize) -> usize {
    cols.div_ceil(2)
}

impl TensorRecord {
    pub fn fp32(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::Fp32(t.data().to_vec()),
        }
    }

    /// Binary16 storage, round-to-nearest-even.
    pub fn f16(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::Fp16(
                t.data()
                    .iter()
                    .map(|&x| f16::from_f32(x).to_bits())
                    .collect(),
            ),
        }
    }

    pub fn quantized(name: impl Into<String>, q: QuantizedTensor) -> Self {
        Self {
            name: name.into(),
            shape: q.shape.clone(),
            payload: Payload::Quantized(q),
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.payload {
            Payload::Fp32(_) => DType::Fp32,
            Payload::Fp16(_) => DType::Fp16,
            Payload::Quantized(q) if q.params.bits == 4 => DType::Int4,
            Payload::Quantized(_) => DType::Int8,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> u64 {
        let n = self.numel();
        (match self.dtype() {
            DType::Fp32 => 4 * n,
            DType::Fp16 => 2 * n,
            DType::Int8 => n,
            DType::Int4 => {
                let cols = *self.shape.last().unwrap_or(&1);
                (n / cols) * int4_row_bytes(cols)
            }
        }) as u64
    }

    /// Scale and min bytes carried by quantized records.
    pub fn metadata_bytes(&self) -> u64 {
        match &self.payload {
            Payload::Quantized(q) => 8 * q.params.n_channels() as u64,
            _ => 0,
        }
    }

    /// Bytes this record contributes to quantized-memory accounting.
    pub fn stored_bytes(&self) -> u64 {
        self.payload_bytes() + self.metadata_bytes()
    }

    /// The `f32` values this record represents.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::Fp32(v) => Tensor::new(self.shape.clone(), v.clone()),
            Payload::Fp16(v) => Tensor::new(
                self.shape.clone(),
                v.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            ),
            Payload::Quantized(q) => Ok(dequantize(q)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "tensor name of {} bytes exceeds 65535",
                self.name.len()
            )));
        }
        let n = check_shape(&self.shape)?;
        let len = match &self.payload {
            Payload::Fp32(v) => v.len(),
            Payload::Fp16(v) => v.len(),
            Payload::Quantized(q) => {
                if q.shape != self.shape {
                    return Err(Error::dim("quantized shape differs from record shape"));
                }
                let p = &q.params;
                if p.bits != 4 && p.bits != 8 {
                    return Err(Error::Format(format!("unsupported bit width {}", p.bits)));
                }
                let expect = match p.channel_axis {
                    None => 1,
                    Some(a) if a < self.shape.len() && a < PER_TENSOR as usize => self.shape[a],
                    Some(a) => return Err(Error::dim(format!("channel axis {a} out of range"))),
                };
                if p.scales.len() != expect || p.mins.len() != expect {
                    return Err(Error::Format(format!(
                        "{}: expected {expect} scales and mins",
                        self.name
                    )));
                }
                if q.codes
                    .iter()
                    .any(|&c| (c as i32) < p.q_min() || (c as i32) > p.q_max())
                {
                    return Err(Error::Format(format!("{}: code out of range", self.name)));
                }
                q.codes.len()
            }
        };
        if len != n {
            return Err(Error::dim(format!(
                "{}: {len} values for shape {:?}",
                self.name, self.shape
            )));
        }
        Ok(())
    }
}

/// Pack 4-bit codes row by row: two per byte, low nibble first, an odd row
/// ends in a zero high nibble.
pub fn pack_int4(codes: &[i8], row_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(row_len) * int4_row_bytes(row_len));
    for row in codes.chunks(row_len) {
        for pair in row.chunks(2) {
            let lo = (pair[0] as u8) & 0x0F;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
            out.push(lo | (hi << 4));
        }
    }
    out
}

/// Inverse of [`pack_int4`] for `n` codes.
pub fn unpack_int4(bytes: &[u8], n: usize, row_len: usize) -> Vec<i8> {
    let sign = |nib: u8| ((nib << 4) as i8) >> 4;
    let mut out = Vec::with_capacity(n);
    for row in bytes.chunks(int4_row_bytes(row_len)) {
        let mut remaining = row_len;
        for &b in row {
            out.push(sign(b & 0x0F));
            remaining -= 1;
            if remaining == 0 {
                break;
            }
            out.push(sign(b >> 4));
            remaining -= 1;
        }
        if out.len() >= n {
            break;
        }
    }
    out.truncate(n);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    pub config: Option<ModelConfig>,
    pub records: Vec<TensorRecord>,
}

impl WeightContainer {
    pub fn new(config: Option<ModelConfig>, records: Vec<TensorRecord>) -> Result<Self> {
        records.iter().try_for_each(TensorRecord::validate)?;
        Ok(Self { config, records })
    }

    /// Every parameter of `model` stored as fp32.
    pub fn from_model(model: &TransformerModel) -> Self {
        let records = model
            .named_params()
            .map(|(name, t)| TensorRecord::fp32(name, t))
            .collect();
        Self {
            config: Some(*model.config()),
            records,
        }
    }

    /// Rebuild a model, dequantizing every record.
    pub fn to_model(&self) -> Result<TransformerModel> {
        let cfg = self
            .config
            .ok_or_else(|| Error::Format("container carries no model config".into()))?;
        let layout = cfg.layout();
        if self.records.len() != layout.len() {
            return Err(Error::Format(format!(
                "{} records for a model with {} parameters",
                self.records.len(),
                layout.len()
            )));
        }
        let params = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.name != layout.name(i) {
                    return Err(Error::Format(format!(
                        "record {i} is `{}`, expected `{}`",
                        r.name,
                        layout.name(i)
                    )));
                }
                r.to_tensor()
            })
            .collect::<Result<Vec<_>>>()?;
        TransformerModel::from_params(cfg, params)
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        match &self.config {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                let (task, classes) = match c.task_head {
                    TaskHead::Classification { n_classes } => (0, n_classes),
                    TaskHead::LanguageModel => (1, 0),
                };
                for v in [
                    c.n_layers,
                    c.d_model,
                    c.n_heads,
                    c.d_ff,
                    c.vocab_size,
                    c.max_seq_len,
                    task,
                    classes,
                ] {
                    put_u32(&mut out, v)?;
                }
            }
        }
        put_u32(&mut out, self.records.len())?;
        for r in &self.records {
            r.validate()?;
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype() as u8);
            put_u32(&mut out, r.shape.len())?;
            for &d in &r.shape {
                put_u32(&mut out, d)?;
            }
            match &r.payload {
                Payload::Fp32(v) => {
                    out.push(PER_TENSOR);
                    put_u32(&mut out, 0)?;
                    v.iter()
                        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Payload::Fp16(v) => {
                    out.push(PER_TENSOR);
                    put_u32(&mut out, 0)?;
                    v.iter()
                        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Payload::Quantized(q) => {
                    out.push(q.params.channel_axis.map_or(PER_TENSOR, |a| a as u8));
                    put_u32(&mut out, q.params.scales.len())?;
                    for s in q.params.scales.iter().chain(&q.params.mins) {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                    if q.params.bits == 4 {
                        out.extend(pack_int4(&q.codes, *r.shape.last().unwrap()));
                    } else {
                        out.extend(q.codes.iter().map(|&c| c as u8));
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                offset: 0,
                needed: 4,
                available: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                offset: 4,
                needed: 8,
                available: bytes.len() - 4,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let body = &bytes[..bytes.len() - 4];
        let container = Reader { buf: body, pos: 8 }.read_container()?;
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), &bytes).map_err(|source| Error::Path {
            path: path.as_ref().to_path_buf(),
            source,
        })?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|source| Error::Path {
            path: path.as_ref().to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn read_container(mut self) -> Result<WeightContainer> {
        let config = match self.u8()? {
            0 => None,
            1 => {
                let mut v = [0usize; 8];
                for x in v.iter_mut() {
                    *x = self.u32()?;
                }
                let task_head = match v[6] {
                    0 => TaskHead::Classification { n_classes: v[7] },
                    1 => TaskHead::LanguageModel,
                    t => return Err(Error::Format(format!("unknown task code {t}"))),
                };
                let cfg = ModelConfig {
                    n_layers: v[0],
                    d_model: v[1],
                    n_heads: v[2],
                    d_ff: v[3],
                    vocab_size: v[4],
                    max_seq_len: v[5],
                    task_head,
                };
                cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
                Some(cfg)
            }
            f => return Err(Error::Format(format!("bad config flag {f}"))),
        };
        let n = self.u32()?;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            records.push(self.read_record()?);
        }
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} unexpected bytes after the last record",
                self.buf.len() - self.pos
            )));
        }
        WeightContainer::new(config, records)
    }

    fn read_record(&mut self) -> Result<TensorRecord> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let dtype = DType::from_code(self.u8()?)?;
        let rank = self.u32()?;
        if !(1..=3).contains(&rank) {
            return Err(Error::Format(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel = check_shape(&shape).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        let axis = self.u8()?;
        let n_scales = self.u32()?;
        let scales = self.f32s(n_scales)?;
        let mins = self.f32s(n_scales)?;
        let payload = match dtype {
            DType::Fp32 => Payload::Fp32(self.f32s(numel)?),
            DType::Fp16 => Payload::Fp16(
                self.take(numel.checked_mul(2).ok_or_else(overflow)?)?
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::Int8 | DType::Int4 => {
                let bits = if dtype == DType::Int8 { 8 } else { 4 };
                let codes = if bits == 8 {
                    self.take(numel)?.iter().map(|&b| b as i8).collect()
                } else {
                    let cols = *shape.last().unwrap();
                    let bytes = self.take((numel / cols) * int4_row_bytes(cols))?;
                    unpack_int4(bytes, numel, cols)
                };
                Payload::Quantized(QuantizedTensor {
                    shape: shape.clone(),
                    codes,
                    params: QuantParams {
                        bits,
                        channel_axis: (axis != PER_TENSOR).then_some(axis as usize),
                        scales,
                        mins,
                    },
                })
            }
        };
        Ok(TensorRecord {
            name,
            shape,
            payload,
        })
    }
}

fn overflow() -> Error {
    Error::Format("length overflow".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Bytes of the model held entirely in fp32.
    pub m_o_bytes: u64,
    /// Quantized payload bytes plus scale/min metadata.
    pub m_q_bytes: u64,
    /// Compression ratio `M_O / M_Q`.
    pub cr: f64,
    /// Percentage reduction `100 (1 - M_Q / M_O)`.
    pub fpr_percent: f64,
}

impl MemoryReport {
    pub fn from_bytes(m_o_bytes: u64, m_q_bytes: u64) -> Self {
        let (o, q) = (m_o_bytes as f64, m_q_bytes as f64);
        Self {
            m_o_bytes,
            m_q_bytes,
            cr: o / q,
            fpr_percent: 100.0 * (1.0 - q / o),
        }
    }
}

pub fn memory_report(
    original: &WeightContainer,
    quantized: &WeightContainer,
) -> Result<MemoryReport> {
    if original.records.len() != quantized.records.len() {
        return Err(Error::dim(format!(
            "{} original records vs {} quantized",
            original.records.len(),
            quantized.records.len()
        )));
    }
    let mut m_o = 0u64;
    let mut m_q = 0u64;
    for (o, q) in original.records.iter().zip(&quantized.records) {
        if o.name != q.name || o.shape != q.shape {
            return Err(Error::dim(format!(
                "record `{}` {:?} does not match `{}` {:?}",
                o.name, o.shape, q.name, q.shape
            )));
        }
        m_o += 4 * o.numel() as u64;
        m_q += q.stored_bytes();
    }
    if m_o == 0 || m_q == 0 {
        return Err(Error::domain("empty container"));
    }
    Ok(MemoryReport::from_bytes(m_o, m_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    fn sample() -> WeightContainer {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 3.5], &[0.25, 0.0, -1.0]]).unwrap();
        WeightContainer::new(
            None,
            vec![
                TensorRecord::fp32("a", &a),
                TensorRecord::f16("b", &a),
                TensorRecord::quantized("c", quantize(&a, 8, Some(0)).unwrap()),
                TensorRecord::quantized("d", quantize(&a, 4, None).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn int4_odd_rows_pad_high_nibble() {
        let packed = pack_int4(&[1, -1, 7, -8, 0, 3], 3);
        assert_eq!(packed, vec![0xF1, 0x07, 0x08, 0x03]);
        assert_eq!(unpack_int4(&packed, 6, 3), vec![1, -1, 7, -8, 0, 3]);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            WeightContainer::from_bytes(&bad),
            Err(Error::Format(_))
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            WeightContainer::from_bytes(&bad),
            Err(Error::UnsupportedVersion(9))
        ));

        let mut bad = bytes.clone();
        let last_payload = bytes.len() - 5;
        bad[last_payload] ^= 0x10;
        assert!(matches!(
            WeightContainer::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));

        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(
            WeightContainer::from_bytes(cut),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn long_names_rejected() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        let name = "x".repeat(70_000);
        assert!(WeightContainer::new(None, vec![TensorRecord::fp32(name, &t)]).is_err());
    }

    #[test]
    fn fp16_and_identity_ratios() {
        let t = Tensor::full(&[8, 8], 0.5);
        let orig = WeightContainer::new(None, vec![TensorRecord::fp32("w", &t)]).unwrap();
        let same = memory_report(&orig, &orig).unwrap();
        assert_eq!((same.cr, same.fpr_percent), (1.0, 0.0));
        let half = WeightContainer::new(None, vec![TensorRecord::f16("w", &t)]).unwrap();
        let r = memory_report(&orig, &half).unwrap();
        assert_eq!(r.cr, 2.0);
        assert_eq!(r.fpr_percent, 50.0);
    }

    #[test]
    fn mismatched_containers_rejected() {
        let t = Tensor::full(&[2, 2], 0.5);
        let a = WeightContainer::new(None, vec![TensorRecord::fp32("w", &t)]).unwrap();
        let b = WeightContainer::new(None, vec![TensorRecord::fp32("v", &t)]).unwrap();
        assert!(memory_report(&a, &b).is_err());
    }
}
