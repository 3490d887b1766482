//! Numeric kernels: dtype decode/encode, normalized Frobenius difference and
//! weighted linear combination.
//!
//! Working values are `f64`. Every supported float format and the 8/32-bit
//! integers decode exactly; `I64` decodes exactly only up to 2^53 in magnitude.
//! Reductions and weighted sums accumulate in `f64` with a fixed summation
//! order (ascending model index), so results do not depend on scheduling.

use std::fmt;
use std::ops::Deref;

use half::{bf16, f16};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dtype::DType;
use crate::error::{Error, Result};

/// Decoded tensor elements in working precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkingBuffer(Vec<f64>);

impl WorkingBuffer {
    pub fn new(values: Vec<f64>) -> Self {
        WorkingBuffer(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn non_finite_count(&self) -> usize {
        self.0.iter().filter(|v| !v.is_finite()).count()
    }
}

impl Deref for WorkingBuffer {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for WorkingBuffer {
    fn from(values: Vec<f64>) -> Self {
        WorkingBuffer(values)
    }
}

/// A normalized Frobenius norm (root-mean-square of element differences).
///
/// Serialized as a JSON number, or as the strings `"NaN"`, `"inf"` for the
/// non-finite values that parents with NaN/Inf elements can produce.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct NormValue(pub f64);

impl NormValue {
    pub const ZERO: NormValue = NormValue(0.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for NormValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl Serialize for NormValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serialize_f64(self.0, serializer)
    }
}

impl<'de> Deserialize<'de> for NormValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        deserialize_f64(deserializer).map(NormValue)
    }
}

pub(crate) fn serialize_f64<S: Serializer>(
    v: f64,
    serializer: S,
) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        serializer.serialize_f64(v)
    } else if v.is_nan() {
        serializer.serialize_str("NaN")
    } else if v > 0.0 {
        serializer.serialize_str("inf")
    } else {
        serializer.serialize_str("-inf")
    }
}

pub(crate) fn deserialize_f64<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(deserializer)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "NaN" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(serde::de::Error::custom(format!(
                "expected a number, \"NaN\", \"inf\" or \"-inf\", got {other:?}"
            ))),
        },
    }
}

/// Decodes little-endian element bytes into working precision.
pub fn decode(raw: &[u8], dtype: DType) -> Result<WorkingBuffer> {
    let width = dtype.byte_width();
    if !raw.len().is_multiple_of(width) {
        return Err(Error::LengthMismatch(format!(
            "{} bytes is not a multiple of the {dtype} element width {width}",
            raw.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F16 => raw
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
        DType::BF16 => raw
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
        DType::I64 => raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::I32 => raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::I8 => raw.iter().map(|&b| b as i8 as f64).collect(),
        DType::U8 | DType::Bool => raw.iter().map(|&b| b as f64).collect(),
    };
    Ok(WorkingBuffer(values))
}

/// Encodes working values into `dtype` bytes.
///
/// Floats round to nearest, ties to even, directly from `f64` (no double
/// rounding); overflow goes to signed infinity. Integers round ties-to-even and
/// saturate, NaN maps to 0. `BOOL` stores 1 for any nonzero value.
pub fn encode(values: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_width());
    match dtype {
        DType::F64 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F16 => values.iter().for_each(|&v| {
            out.extend_from_slice(&f64_to_f16_bits(v).to_le_bytes());
        }),
        DType::BF16 => values.iter().for_each(|&v| {
            out.extend_from_slice(&f64_to_bf16_bits(v).to_le_bytes());
        }),
        DType::I64 => values.iter().for_each(|&v| {
            out.extend_from_slice(&(round_int(v) as i64).to_le_bytes());
        }),
        DType::I32 => values.iter().for_each(|&v| {
            out.extend_from_slice(&(round_int(v) as i32).to_le_bytes());
        }),
        DType::I8 => values
            .iter()
            .for_each(|&v| out.push(round_int(v) as i8 as u8)),
        DType::U8 => values.iter().for_each(|&v| out.push(round_int(v) as u8)),
        DType::Bool => values.iter().for_each(|&v| out.push(u8::from(v != 0.0))),
    }
    out
}

// `as` casts saturate and send NaN to zero.
fn round_int(v: f64) -> f64 {
    v.round_ties_even()
}

/// Narrows to f32 with round-to-odd. A second round-to-nearest-even step into
/// any format with at most 22 significand bits is then correctly rounded.
fn f64_to_f32_round_odd(v: f64) -> f32 {
    let r = v as f32;
    if r.is_nan() || r as f64 == v {
        return r;
    }
    let mut bits = r.to_bits();
    if (r as f64).abs() > v.abs() {
        bits -= 1;
    }
    f32::from_bits(bits | 1)
}

pub fn f64_to_bf16_bits(v: f64) -> u16 {
    bf16::from_f32(f64_to_f32_round_odd(v)).to_bits()
}

pub fn f64_to_f16_bits(v: f64) -> u16 {
    f16::from_f32(f64_to_f32_round_odd(v)).to_bits()
}

/// Frobenius norm of `a - b` divided by the square root of the element count.
pub fn normalized_frobenius_diff(a: &[f64], b: &[f64]) -> Result<NormValue> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "cannot diff tensors of {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::LengthMismatch("cannot diff empty tensors".into()));
    }
    let n = a.len() as f64;
    let sum_sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    if sum_sq.is_nan() || (sum_sq > 0.0 && sum_sq.is_finite()) {
        return Ok(NormValue((sum_sq / n).sqrt()));
    }
    // Squares underflowed to zero or overflowed; redo with scaling.
    let scale = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max);
    if scale == 0.0 || scale.is_infinite() {
        return Ok(NormValue(scale));
    }
    let scaled: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y) / scale;
            d * d
        })
        .sum();
    Ok(NormValue(scale * (scaled / n).sqrt()))
}

/// `out[j] = Σ_i lambdas[i] * tensors[i][j]`, summed in ascending `i`.
///
/// Accepts arbitrary affine weights; convexity is enforced by the caller.
pub fn linear_combination(tensors: &[&[f64]], lambdas: &[f64]) -> Result<WorkingBuffer> {
    let Some(first) = tensors.first() else {
        return Err(Error::LengthMismatch("no tensors to combine".into()));
    };
    if tensors.len() != lambdas.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tensors but {} coefficients",
            tensors.len(),
            lambdas.len()
        )));
    }
    let len = first.len();
    if let Some(t) = tensors.iter().find(|t| t.len() != len) {
        return Err(Error::LengthMismatch(format!(
            "tensor lengths differ ({} vs {len})",
            t.len()
        )));
    }
    let mut out = vec![0.0_f64; len];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = lambdas[0] * first[j];
        for (t, &lambda) in tensors.iter().zip(lambdas).skip(1) {
            acc += lambda * t[j];
        }
        *slot = acc;
    }
    Ok(WorkingBuffer(out))
}
