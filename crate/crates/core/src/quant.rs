//! Affine min-max quantization of weights to 4 or 8 bits.
//!
//! For a channel with range `[min, max]` and `b` bits,
//! `scale = (max - min) / (q_max - q_min)` and
//! `code = clamp(round((x - min) / scale) + q_min, q_min, q_max)` with
//! `q_min = -2^(b-1)`, `q_max = 2^(b-1) - 1`. Dequantization is
//! `(code - q_min) * scale + min`. Channels whose values are all equal get
//! `scale = 1`, every code `q_min`, and reconstruct exactly.
//!
//! 16-bit tiers do not go through this operator; they are stored as IEEE
//! binary16 (see [`fp16_round`]).

use half::f16;
use serde::{Deserialize, Serialize};

use crate::allocate::PrecisionPlan;
use crate::error::{Error, Result};
use crate::model::{ParamRole, TransformerModel};
use crate::model_io::{TensorRecord, WeightContainer};
use crate::tensor::Tensor;

/// Storage width of one layer in a precision plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    Int4,
    Int8,
    Fp16,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Int4, Precision::Int8, Precision::Fp16];

    pub fn bits(self) -> u8 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Fp16 => 16,
        }
    }
}

impl TryFrom<u8> for Precision {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        match bits {
            4 => Ok(Precision::Int4),
            8 => Ok(Precision::Int8),
            16 => Ok(Precision::Fp16),
            b => Err(Error::domain(format!(
                "bit width {b} is not one of 4, 8, 16"
            ))),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.bits()
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// How `(x - min) / scale` is turned into an integer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round to nearest, ties to even.
    #[default]
    NearestEven,
    /// Truncate toward negative infinity.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    /// `None` quantizes the whole tensor with one scale.
    pub channel_axis: Option<usize>,
    pub scales: Vec<f32>,
    pub mins: Vec<f32>,
}

impl QuantParams {
    pub fn q_min(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn q_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn n_channels(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// One code per element, row-major, each in `[q_min, q_max]`.
    pub codes: Vec<i8>,
    pub params: QuantParams,
}

/// Maps flat element indices to channel indices along `axis`.
#[derive(Clone, Copy)]
struct ChannelIndex {
    stride: usize,
    len: usize,
}

impl ChannelIndex {
    fn new(shape: &[usize], axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Ok(Self { stride: 1, len: 1 }),
            Some(a) if a < shape.len() => Ok(Self {
                stride: shape[a + 1..].iter().product(),
                len: shape[a],
            }),
            Some(a) => Err(Error::dim(format!(
                "channel axis {a} out of range for shape {shape:?}"
            ))),
        }
    }

    #[inline]
    fn of(&self, i: usize) -> usize {
        if self.len == 1 {
            0
        } else {
            (i / self.stride) % self.len
        }
    }
}

pub fn quantize(x: &Tensor, bits: u8, channel_axis: Option<usize>) -> Result<QuantizedTensor> {
    quantize_with(x, bits, channel_axis, Rounding::NearestEven)
}

pub fn quantize_with(
    x: &Tensor,
    bits: u8,
    channel_axis: Option<usize>,
    rounding: Rounding,
) -> Result<QuantizedTensor> {
    if bits != 4 && bits != 8 {
        return Err(Error::domain(format!(
            "integer quantization supports 4 or 8 bits, got {bits}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    let idx = ChannelIndex::new(x.shape(), channel_axis)?;
    let mut mins = vec![f32::INFINITY; idx.len];
    let mut maxs = vec![f32::NEG_INFINITY; idx.len];
    for (i, &v) in x.data().iter().enumerate() {
        let c = idx.of(i);
        mins[c] = mins[c].min(v);
        maxs[c] = maxs[c].max(v);
    }
    let mut params = QuantParams {
        bits,
        channel_axis,
        scales: Vec::with_capacity(idx.len),
        mins,
    };
    let (q_min, q_max) = (params.q_min(), params.q_max());
    let levels = (q_max - q_min) as f64;
    for (c, &hi) in maxs.iter().enumerate() {
        let scale = ((hi as f64 - params.mins[c] as f64) / levels) as f32;
        params.scales.push(if scale > 0.0 { scale } else { 1.0 });
    }
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = idx.of(i);
            let t = (v as f64 - params.mins[c] as f64) / params.scales[c] as f64;
            let r = match rounding {
                Rounding::NearestEven => t.round_ties_even(),
                Rounding::Floor => t.floor(),
            };
            (r as i64 + q_min as i64).clamp(q_min as i64, q_max as i64) as i8
        })
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let idx = ChannelIndex::new(&q.shape, q.params.channel_axis).expect("validated axis");
    let q_min = q.params.q_min();
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = idx.of(i);
            ((code as i32 - q_min) as f64 * q.params.scales[c] as f64 + q.params.mins[c] as f64)
                as f32
        })
        .collect();
    Tensor::new(q.shape.clone(), data).expect("shape carried from the source tensor")
}

/// Frobenius norm of `w - dequantize(q)`.
pub fn quant_error(w: &Tensor, q: &QuantizedTensor) -> Result<f64> {
    if w.shape() != q.shape.as_slice() {
        return Err(Error::dim(format!(
            "shape {:?} vs quantized {:?}",
            w.shape(),
            q.shape
        )));
    }
    frobenius_diff(w, &dequantize(q))
}

pub(crate) fn frobenius_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("shape mismatch"));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Round every element to the nearest binary16 value (ties to even).
pub fn fp16_round(t: &Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&x| f16::from_f32(x).to_f32())
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Reconstruction of `w` stored at precision `p` (per-output-channel for the
/// integer widths).
pub fn reconstruct(w: &Tensor, p: Precision) -> Result<Tensor> {
    Ok(match p {
        Precision::Fp16 => fp16_round(w),
        Precision::Int8 | Precision::Int4 => dequantize(&quantize(w, p.bits(), Some(0))?),
    })
}

/// Storage record of one weight matrix at precision `p`.
pub fn encode(name: String, w: &Tensor, p: Precision) -> Result<TensorRecord> {
    Ok(match p {
        Precision::Fp16 => TensorRecord::f16(name, w),
        Precision::Int8 | Precision::Int4 => {
            TensorRecord::quantized(name, quantize(w, p.bits(), Some(0))?)
        }
    })
}

/// Quantize a model under a plan.
///
/// Each layer's six weight matrices are stored at the layer's width,
/// per output channel for 4 and 8 bits. Everything else (embeddings,
/// layer-norm parameters, the output head) is stored as binary16. Returns the
/// packed container and the simulated model rebuilt from it.
pub fn apply_plan(
    model: &TransformerModel,
    plan: &PrecisionPlan,
) -> Result<(WeightContainer, TransformerModel)> {
    if plan.bits.len() != model.n_layers() {
        return Err(Error::domain(format!(
            "plan covers {} layers, model has {}",
            plan.bits.len(),
            model.n_layers()
        )));
    }
    let layout = model.layout();
    let records = model
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let name = layout.name(i);
            match layout.role(i) {
                ParamRole::Layer(l, c) if c.is_matrix() => encode(name, w, plan.bits[l]),
                _ => Ok(TensorRecord::f16(name, w)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let container = WeightContainer::new(Some(*model.config()), records)?;
    let simulated = container.to_model()?;
    Ok((container, simulated))
}
