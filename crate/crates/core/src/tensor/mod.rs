//! Dense n-dimensional tensors over the storage dtypes the toolkit supports.
//!
//! A [`DenseTensor`] is a row-major buffer plus a shape. Numerics are done by
//! widening to `f64`; `f32`/`f16` exist as storage formats, and the integer
//! dtypes (`i8`, packed `i4`) belong to quantized payloads. Packed `i4` stores
//! two signed nibbles per byte, low nibble first.

mod factor;
mod svd;

pub use factor::balanced_factorization;
pub use svd::{truncated_svd, SvdResult};

pub(crate) use svd::svd_truncate_f64;

use crate::error::{Error, Result};
use half::f16;

/// Storage dtype of a tensor payload.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Dtype {
    F64,
    F32,
    F16,
    I8,
    /// Two's-complement 4-bit integers packed two per byte, low nibble first.
    I4Packed,
}

impl Dtype {
    /// Canonical lowercase name, used in plans and reports.
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::I8 => "i8",
            Dtype::I4Packed => "i4packed",
        }
    }

    /// Parse the canonical name produced by [`Dtype::name`].
    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            "i8" => Ok(Dtype::I8),
            "i4packed" => Ok(Dtype::I4Packed),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    /// True for `f64`/`f32`/`f16`.
    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F64 | Dtype::F32 | Dtype::F16)
    }

    /// Bytes needed to store `count` elements of this dtype.
    ///
    /// Packed `i4` rounds up to whole bytes; everything else is exact.
    pub fn payload_bytes(self, count: usize) -> usize {
        match self {
            Dtype::F64 => count * 8,
            Dtype::F32 => count * 4,
            Dtype::F16 => count * 2,
            Dtype::I8 => count,
            Dtype::I4Packed => count.div_ceil(2),
        }
    }
}

/// Typed storage behind a [`DenseTensor`].
#[derive(Clone, PartialEq, Debug)]
pub enum Buffer {
    F64(Vec<f64>),
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
    /// Packed nibbles; the logical element count comes from the shape.
    I4Packed(Vec<u8>),
}

/// Row-major dense tensor. Every axis extent is at least 1, so the element
/// count is always positive.
#[derive(Clone, PartialEq, Debug)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Buffer,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::ShapeMismatch("shape must have at least one axis".into()));
    }
    let mut count: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "zero-extent axis in shape {shape:?}"
            )));
        }
        count = count.checked_mul(d).ok_or_else(|| {
            Error::ShapeMismatch(format!("element count overflows for shape {shape:?}"))
        })?;
    }
    Ok(count)
}

impl DenseTensor {
    fn new(shape: Vec<usize>, data: Buffer) -> Result<DenseTensor> {
        let count = validate_shape(&shape)?;
        let stored = match &data {
            Buffer::F64(v) => v.len(),
            Buffer::F32(v) => v.len(),
            Buffer::F16(v) => v.len(),
            Buffer::I8(v) => v.len(),
            Buffer::I4Packed(v) => {
                if v.len() != count.div_ceil(2) {
                    return Err(Error::ShapeMismatch(format!(
                        "i4 payload is {} bytes but shape {:?} needs {}",
                        v.len(),
                        shape,
                        count.div_ceil(2)
                    )));
                }
                count
            }
        };
        if stored != count {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {stored} elements but shape {shape:?} needs {count}"
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<DenseTensor> {
        DenseTensor::new(shape.to_vec(), Buffer::F64(data))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<DenseTensor> {
        DenseTensor::new(shape.to_vec(), Buffer::F32(data))
    }

    pub fn from_f16(shape: &[usize], data: Vec<f16>) -> Result<DenseTensor> {
        DenseTensor::new(shape.to_vec(), Buffer::F16(data))
    }

    pub fn from_i8(shape: &[usize], data: Vec<i8>) -> Result<DenseTensor> {
        DenseTensor::new(shape.to_vec(), Buffer::I8(data))
    }

    /// Build a packed-`i4` tensor from raw bytes (low nibble first). The byte
    /// count must equal `ceil(element_count / 2)`.
    pub fn from_i4_packed(shape: &[usize], bytes: Vec<u8>) -> Result<DenseTensor> {
        DenseTensor::new(shape.to_vec(), Buffer::I4Packed(bytes))
    }

    /// Pack signed-nibble values (each in `-8..=7`) into an `i4` tensor.
    pub fn from_i4_values(shape: &[usize], values: &[i8]) -> Result<DenseTensor> {
        for &v in values {
            if !(-8..=7).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "value {v} does not fit in a signed 4-bit nibble"
                )));
            }
        }
        DenseTensor::new(shape.to_vec(), Buffer::I4Packed(pack_i4(values)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Logical element count (product of the shape).
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // every axis extent is >= 1
    }

    pub fn dtype(&self) -> Dtype {
        match &self.data {
            Buffer::F64(_) => Dtype::F64,
            Buffer::F32(_) => Dtype::F32,
            Buffer::F16(_) => Dtype::F16,
            Buffer::I8(_) => Dtype::I8,
            Buffer::I4Packed(_) => Dtype::I4Packed,
        }
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    /// Widen every element to `f64` in row-major order. Integer dtypes widen
    /// to their exact values.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Buffer::F64(v) => v.clone(),
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F16(v) => v.iter().map(|&x| x.to_f64()).collect(),
            Buffer::I8(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::I4Packed(v) => unpack_i4(v, self.len()).iter().map(|&x| x as f64).collect(),
        }
    }

    /// Integer elements in row-major order; errors for float dtypes.
    pub fn to_i8_vec(&self) -> Result<Vec<i8>> {
        match &self.data {
            Buffer::I8(v) => Ok(v.clone()),
            Buffer::I4Packed(v) => Ok(unpack_i4(v, self.len())),
            _ => Err(Error::InvalidArgument(format!(
                "expected an integer tensor, got {}",
                self.dtype().name()
            ))),
        }
    }

    /// Cast between float dtypes, rounding to nearest. Integer tensors and
    /// integer targets are rejected: re-quantization is not a cast.
    pub fn cast(&self, dtype: Dtype) -> Result<DenseTensor> {
        if !self.dtype().is_float() || !dtype.is_float() {
            return Err(Error::InvalidArgument(format!(
                "cast supports float dtypes only, got {} -> {}",
                self.dtype().name(),
                dtype.name()
            )));
        }
        if dtype == self.dtype() {
            return Ok(self.clone());
        }
        let wide = self.to_f64_vec();
        let data = match dtype {
            Dtype::F64 => Buffer::F64(wide),
            Dtype::F32 => Buffer::F32(wide.iter().map(|&x| x as f32).collect()),
            Dtype::F16 => Buffer::F16(wide.iter().map(|&x| f16::from_f64(x)).collect()),
            _ => unreachable!(),
        };
        DenseTensor::new(self.shape.clone(), data)
    }

    /// Borrow the raw elements of an `f64` tensor, or `None` for any other
    /// dtype.
    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.data {
            Buffer::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Mutable access to the raw elements of an `f64` tensor. The shape is
    /// untouched, so tensor invariants cannot be broken through this view.
    pub fn as_f64_slice_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            Buffer::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Little-endian byte serialization of the payload.
    pub fn payload_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Buffer::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Buffer::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Buffer::F16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            Buffer::I8(v) => v.iter().map(|&x| x as u8).collect(),
            Buffer::I4Packed(v) => v.clone(),
        }
    }

    /// Rebuild a tensor from little-endian payload bytes.
    pub fn from_le_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<DenseTensor> {
        let count = validate_shape(shape)?;
        let expected = dtype.payload_bytes(count);
        if bytes.len() != expected {
            return Err(Error::OffsetError(format!(
                "{} payload for shape {:?} needs {} bytes, got {}",
                dtype.name(),
                shape,
                expected,
                bytes.len()
            )));
        }
        let data = match dtype {
            Dtype::F64 => Buffer::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => Buffer::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F16 => Buffer::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            Dtype::I8 => Buffer::I8(bytes.iter().map(|&b| b as i8).collect()),
            Dtype::I4Packed => Buffer::I4Packed(bytes.to_vec()),
        };
        DenseTensor::new(shape.to_vec(), data)
    }
}

/// Pack signed nibbles two per byte, low nibble first. An odd tail leaves the
/// final high nibble zero.
pub fn pack_i4(values: &[i8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() == 2 { (pair[1] as u8) & 0x0F } else { 0 };
        out.push(lo | (hi << 4));
    }
    out
}

/// Unpack `count` signed nibbles (low nibble first, sign-extended).
pub fn unpack_i4(bytes: &[u8], count: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let b = bytes[i / 2];
        let nibble = if i % 2 == 0 { b & 0x0F } else { b >> 4 };
        out.push(((nibble << 4) as i8) >> 4);
    }
    out
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

fn validate_permutation(perm: &[usize], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "permutation {perm:?} has length {} but tensor rank is {rank}",
            perm.len()
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank {
            return Err(Error::InvalidArgument(format!(
                "axis {p} out of range for rank {rank}"
            )));
        }
        if seen[p] {
            return Err(Error::InvalidArgument(format!(
                "axis {p} repeated in permutation {perm:?}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Raw-buffer permute used by the tensor-train contraction kernels, which
/// track shapes themselves and skip the `DenseTensor` wrapper.
pub(crate) fn permute_f64(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    permute_buf(data, shape, perm)
}

fn permute_buf<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // Odometer increment over the output index, keeping the input offset
        // in sync so each element costs O(1) amortized.
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += mapped[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= mapped[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    (out_shape, out)
}

/// Reorder tensor axes: output axis `a` is input axis `perm[a]`, so a matrix
/// transpose is `permute_axes(t, &[1, 0])`.
pub fn permute_axes(t: &DenseTensor, perm: &[usize]) -> Result<DenseTensor> {
    validate_permutation(perm, t.rank())?;
    let (shape, data) = match t.buffer() {
        Buffer::F64(v) => {
            let (s, d) = permute_buf(v, t.shape(), perm);
            (s, Buffer::F64(d))
        }
        Buffer::F32(v) => {
            let (s, d) = permute_buf(v, t.shape(), perm);
            (s, Buffer::F32(d))
        }
        Buffer::F16(v) => {
            let (s, d) = permute_buf(v, t.shape(), perm);
            (s, Buffer::F16(d))
        }
        Buffer::I8(v) => {
            let (s, d) = permute_buf(v, t.shape(), perm);
            (s, Buffer::I8(d))
        }
        Buffer::I4Packed(v) => {
            let unpacked = unpack_i4(v, t.len());
            let (s, d) = permute_buf(&unpacked, t.shape(), perm);
            (s, Buffer::I4Packed(pack_i4(&d)))
        }
    };
    DenseTensor::new(shape, data)
}

/// Reinterpret the row-major buffer under a new shape with the same element
/// count. No data moves.
pub fn reshape(t: &DenseTensor, new_shape: &[usize]) -> Result<DenseTensor> {
    let count = validate_shape(new_shape)?;
    if count != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
            t.shape(),
            t.len(),
            new_shape,
            count
        )));
    }
    DenseTensor::new(new_shape.to_vec(), t.buffer().clone())
}

/// Frobenius norm, accumulated in `f64`. Rejects packed-`i4` tensors, whose
/// elements only have meaning next to their quantization scales.
pub fn frobenius_norm(t: &DenseTensor) -> Result<f64> {
    if t.dtype() == Dtype::I4Packed {
        return Err(Error::InvalidArgument(
            "frobenius_norm is not defined for packed i4 tensors".into(),
        ));
    }
    let mut acc = 0.0f64;
    match t.buffer() {
        Buffer::F64(v) => {
            for &x in v {
                acc += x * x;
            }
        }
        Buffer::F32(v) => {
            for &x in v {
                let w = x as f64;
                acc += w * w;
            }
        }
        Buffer::F16(v) => {
            for &x in v {
                let w = x.to_f64();
                acc += w * w;
            }
        }
        Buffer::I8(v) => {
            for &x in v {
                let w = x as f64;
                acc += w * w;
            }
        }
        Buffer::I4Packed(_) => unreachable!(),
    }
    Ok(acc.sqrt())
}
