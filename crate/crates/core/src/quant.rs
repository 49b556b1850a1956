//! Symmetric affine integer quantization of weight matrices.
//!
//! Values are mapped to signed integers by `q = round(w / scale)` with a
//! symmetric range (`[-127, 127]` for 8-bit, `[-7, 7]` for 4-bit) and no
//! zero point, so `0.0` always quantizes to `0` exactly. Scales are chosen
//! per tensor or per row as `max|w| / qmax`, computed in `f64` and stored as
//! `f32`; the same `f32` scale is used for both directions, which bounds the
//! round-trip error of any entry by `scale / 2` and makes
//! quantize-dequantize-quantize a fixed point.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Dtype};

/// Scope over which one quantization scale applies.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Granularity {
    PerTensor,
    PerRow,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerRow => "per_row",
        }
    }

    pub fn parse(s: &str) -> Result<Granularity> {
        match s {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_row" => Ok(Granularity::PerRow),
            other => Err(Error::InvalidArgument(format!(
                "unknown granularity {other:?} (expected per_tensor or per_row)"
            ))),
        }
    }
}

/// Largest representable magnitude for the supported bit widths. The 8-bit
/// range is kept symmetric by excluding -128.
fn qmax_for(bits: u8) -> Result<i32> {
    match bits {
        8 => Ok(127),
        4 => Ok(7),
        other => Err(Error::InvalidArgument(format!(
            "unsupported bit width {other} (expected 4 or 8)"
        ))),
    }
}

/// A quantized 2-D tensor: integer payload plus the scales to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    qdata: DenseTensor,
    scales: Vec<f32>,
    rows: usize,
    cols: usize,
    bits: u8,
    granularity: Granularity,
}

impl QuantizedTensor {
    /// Reassemble from stored parts, validating payload dtype against `bits`
    /// and scale count against `granularity`.
    pub fn from_parts(
        qdata: DenseTensor,
        scales: Vec<f32>,
        bits: u8,
        granularity: Granularity,
    ) -> Result<QuantizedTensor> {
        if qdata.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "quantized payload must be 2-D, got shape {:?}",
                qdata.shape()
            )));
        }
        let expected_dtype = match bits {
            8 => Dtype::I8,
            4 => Dtype::I4Packed,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported bit width {other} (expected 4 or 8)"
                )))
            }
        };
        if qdata.dtype() != expected_dtype {
            return Err(Error::InvalidArgument(format!(
                "{bits}-bit payload should be {}, got {}",
                expected_dtype.name(),
                qdata.dtype().name()
            )));
        }
        let (rows, cols) = (qdata.shape()[0], qdata.shape()[1]);
        let expected_scales = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
        };
        if scales.len() != expected_scales {
            return Err(Error::ShapeMismatch(format!(
                "{} quantization of {rows} rows needs {expected_scales} scales, got {}",
                granularity.name(),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(
                "quantization scales must be finite and positive".into(),
            ));
        }
        Ok(QuantizedTensor {
            qdata,
            scales,
            rows,
            cols,
            bits,
            granularity,
        })
    }

    pub fn qdata(&self) -> &DenseTensor {
        &self.qdata
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Shape `(rows, cols)` of the tensor this quantizes.
    pub fn original_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Logical parameter count: quantized entries plus stored scales.
    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.scales.len()
    }
}

/// Quantize a 2-D float tensor to `bits` (4 or 8) with symmetric affine
/// scaling at the given granularity.
///
/// All-zero groups get scale `1.0` so dequantization stays well-defined.
/// Non-finite inputs are rejected.
pub fn quantize_affine(
    w: &DenseTensor,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "quantize_affine needs a 2-D tensor, got shape {:?}",
            w.shape()
        )));
    }
    if !w.dtype().is_float() {
        return Err(Error::InvalidArgument(format!(
            "quantize_affine needs a float tensor, got {}",
            w.dtype().name()
        )));
    }
    let qmax = qmax_for(bits)?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let wide = w.to_f64_vec();
    if wide.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "cannot quantize non-finite values".into(),
        ));
    }

    let groups: Vec<(usize, usize)> = match granularity {
        Granularity::PerTensor => vec![(0, rows * cols)],
        Granularity::PerRow => (0..rows).map(|r| (r * cols, (r + 1) * cols)).collect(),
    };

    let mut scales = Vec::with_capacity(groups.len());
    let mut q = vec![0i8; rows * cols];
    for &(start, end) in &groups {
        let amax = wide[start..end].iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        // Scale math in f64, stored and applied as f32 so both directions of
        // the round trip see the identical value.
        let scale = if amax == 0.0 {
            1.0f32
        } else {
            (amax / qmax as f64) as f32
        };
        scales.push(scale);
        let s = scale as f64;
        for (slot, &x) in q[start..end].iter_mut().zip(&wide[start..end]) {
            let rounded = (x / s).round();
            *slot = rounded.clamp(-(qmax as f64), qmax as f64) as i8;
        }
    }

    let qdata = match bits {
        8 => DenseTensor::from_i8(&[rows, cols], q)?,
        4 => DenseTensor::from_i4_values(&[rows, cols], &q)?,
        _ => unreachable!(),
    };
    QuantizedTensor::from_parts(qdata, scales, bits, granularity)
}

/// Expand a quantized tensor back to `f32`: `w = q * scale`, computed in
/// `f32` so values that quantized exactly come back bit-identical.
pub fn dequantize(q: &QuantizedTensor) -> Result<DenseTensor> {
    let ints = q.qdata.to_i8_vec()?;
    let (rows, cols) = (q.rows, q.cols);
    let mut out = vec![0.0f32; rows * cols];
    match q.granularity {
        Granularity::PerTensor => {
            let s = q.scales[0];
            for (slot, &v) in out.iter_mut().zip(&ints) {
                *slot = v as f32 * s;
            }
        }
        Granularity::PerRow => {
            for r in 0..rows {
                let s = q.scales[r];
                for c in 0..cols {
                    out[r * cols + c] = ints[r * cols + c] as f32 * s;
                }
            }
        }
    }
    DenseTensor::from_f32(&[rows, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_trip_error_bound_holds(w: &[f64], rows: usize, cols: usize, bits: u8, g: Granularity) {
        let t = DenseTensor::from_f64(&[rows, cols], w.to_vec()).unwrap();
        let q = quantize_affine(&t, bits, g).unwrap();
        let back = dequantize(&q).unwrap().to_f64_vec();
        for (r, (orig, rebuilt)) in w.iter().zip(&back).enumerate() {
            let scale = match g {
                Granularity::PerTensor => q.scales()[0],
                Granularity::PerRow => q.scales()[r / cols],
            } as f64;
            // Half a quantization step, plus slack for the f64->f32 scale
            // rounding that shifts the effective step size.
            let bound = 0.5 * scale * (1.0 + 1e-6);
            assert!(
                (orig - rebuilt).abs() <= bound,
                "entry {r}: |{orig} - {rebuilt}| > {bound}"
            );
        }
    }

    #[test]
    fn round_trip_error_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for bits in [4u8, 8u8] {
            for g in [Granularity::PerTensor, Granularity::PerRow] {
                let (rows, cols) = (7, 9);
                let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
                round_trip_error_bound_holds(&w, rows, cols, bits, g);
            }
        }
    }

    #[test]
    fn quantize_dequantize_quantize_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for bits in [4u8, 8u8] {
            for g in [Granularity::PerTensor, Granularity::PerRow] {
                let (rows, cols) = (5, 6);
                let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t = DenseTensor::from_f64(&[rows, cols], w).unwrap();
                let q1 = quantize_affine(&t, bits, g).unwrap();
                let d1 = dequantize(&q1).unwrap();
                let q2 = quantize_affine(&d1, bits, g).unwrap();
                assert_eq!(
                    q1.qdata().payload_le_bytes(),
                    q2.qdata().payload_le_bytes(),
                    "bits={bits} {g:?}: requantized payload changed"
                );
                let d2 = dequantize(&q2).unwrap();
                assert_eq!(
                    d1.payload_le_bytes(),
                    d2.payload_le_bytes(),
                    "bits={bits} {g:?}: second dequantization differs"
                );
            }
        }
    }

    #[test]
    fn endpoints_and_zero_are_exact() {
        let t = DenseTensor::from_f64(&[1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        for bits in [4u8, 8u8] {
            let q = quantize_affine(&t, bits, Granularity::PerTensor).unwrap();
            let qmax = if bits == 8 { 127i8 } else { 7i8 };
            assert_eq!(q.qdata().to_i8_vec().unwrap(), vec![-qmax, 0, qmax]);
            let back = dequantize(&q).unwrap();
            // qmax * (1/qmax as f32) rounds to exactly 1.0f32 here.
            let vals: Vec<f32> = back.to_f64_vec().iter().map(|&x| x as f32).collect();
            assert_eq!(vals, vec![-1.0f32, 0.0, 1.0]);
        }
    }

    #[test]
    fn per_row_scales_isolate_rows() {
        // A huge row must not destroy a small row's resolution.
        let w = vec![1000.0, -500.0, 0.25, 0.5, 0.125, -0.25];
        let t = DenseTensor::from_f64(&[2, 3], w.clone()).unwrap();
        let q = quantize_affine(&t, 8, Granularity::PerRow).unwrap();
        assert_eq!(q.scales().len(), 2);
        let back = dequantize(&q).unwrap().to_f64_vec();
        for (orig, rebuilt) in w[3..].iter().zip(&back[3..]) {
            assert!(
                (orig - rebuilt).abs() <= 0.5 / 127.0 * (1.0 + 1e-6),
                "small row entry degraded: {orig} vs {rebuilt}"
            );
        }
        // Per-tensor, by contrast, flattens the small row entirely.
        let qt = quantize_affine(&t, 8, Granularity::PerTensor).unwrap();
        let flat = dequantize(&qt).unwrap().to_f64_vec();
        assert_eq!(flat[4], 0.0, "0.125 under a 1000-range scale rounds to 0");
    }

    #[test]
    fn all_zero_group_gets_unit_scale() {
        let t = DenseTensor::from_f64(&[2, 2], vec![0.0; 4]).unwrap();
        for g in [Granularity::PerTensor, Granularity::PerRow] {
            let q = quantize_affine(&t, 8, g).unwrap();
            assert!(q.scales().iter().all(|&s| s == 1.0));
            let back = dequantize(&q).unwrap();
            assert_eq!(back.to_f64_vec(), vec![0.0; 4]);
        }
    }

    #[test]
    fn four_bit_payload_is_packed() {
        let t = DenseTensor::from_f64(&[3, 3], vec![0.5; 9]).unwrap();
        let q = quantize_affine(&t, 4, Granularity::PerTensor).unwrap();
        assert_eq!(q.qdata().dtype(), Dtype::I4Packed);
        assert_eq!(q.qdata().payload_le_bytes().len(), 5); // ceil(9 / 2)
        assert_eq!(q.param_count(), 9 + 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = DenseTensor::from_f64(&[2, 2], vec![1.0; 4]).unwrap();
        assert!(quantize_affine(&t, 16, Granularity::PerTensor).is_err());
        assert!(quantize_affine(&t, 0, Granularity::PerTensor).is_err());
        let cube = DenseTensor::from_f64(&[2, 2, 1], vec![1.0; 4]).unwrap();
        assert!(quantize_affine(&cube, 8, Granularity::PerTensor).is_err());
        let nan = DenseTensor::from_f64(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(quantize_affine(&nan, 8, Granularity::PerTensor).is_err());
        let int = DenseTensor::from_i8(&[2, 2], vec![0; 4]).unwrap();
        assert!(quantize_affine(&int, 8, Granularity::PerTensor).is_err());
    }

    #[test]
    fn from_parts_validates() {
        let qd = DenseTensor::from_i8(&[2, 3], vec![0; 6]).unwrap();
        assert!(QuantizedTensor::from_parts(qd.clone(), vec![1.0], 8, Granularity::PerTensor).is_ok());
        // wrong scale count
        assert!(QuantizedTensor::from_parts(qd.clone(), vec![1.0], 8, Granularity::PerRow).is_err());
        // wrong dtype for bits
        assert!(QuantizedTensor::from_parts(qd.clone(), vec![1.0], 4, Granularity::PerTensor).is_err());
        // non-positive scale
        assert!(QuantizedTensor::from_parts(qd, vec![0.0], 8, Granularity::PerTensor).is_err());
    }

    #[test]
    fn granularity_names_round_trip() {
        for g in [Granularity::PerTensor, Granularity::PerRow] {
            assert_eq!(Granularity::parse(g.name()).unwrap(), g);
        }
        assert!(Granularity::parse("per_column").is_err());
    }
}
