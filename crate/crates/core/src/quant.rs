//! Symmetric uniform quantizers: per-output-channel weights, per-token
//! activations, learnable clipping and straight-through gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{FakeQuantParams, Tape, Tensor, Var};
use crate::Scalar;

/// Lower bound of the clip-factor projection; the factor lives in `(0, 1]`.
pub const CLIP_MIN: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale per column of a `[in, out]` weight.
    PerOutputChannel,
    /// One scale per row of the last axis.
    PerToken,
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u32, granularity: Granularity) -> Result<Self> {
        if !matches!(bits, 2..=8 | 16) {
            return Err(Error::InvalidArgument(format!(
                "unsupported bit-width {}",
                bits
            )));
        }
        Ok(Self { bits, granularity })
    }

    pub fn weight(bits: u32) -> Self {
        Self::new(bits, Granularity::PerOutputChannel).expect("valid bits")
    }

    pub fn activation(bits: u32) -> Self {
        Self::new(bits, Granularity::PerToken).expect("valid bits")
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= 16
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

/// Largest code of the symmetric range `[-qmax, qmax]`.
pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits.min(16) - 1)) - 1
}

/// Maps flat element indices to quantization groups.
#[derive(Clone, Copy, Debug)]
pub struct GroupLayout {
    pub groups: usize,
    granularity: Granularity,
    last: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self> {
        let n: usize = shape.iter().product();
        let last = shape.last().copied().unwrap_or(1);
        let groups = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => {
                if shape.is_empty() {
                    return Err(shape_err("quantize", "per-token needs rank >= 1"));
                }
                n / last.max(1)
            }
            Granularity::PerOutputChannel => {
                if shape.len() < 2 {
                    return Err(shape_err("quantize", "per-output-channel needs rank >= 2"));
                }
                last
            }
        };
        Ok(Self {
            groups,
            granularity,
            last: last.max(1),
        })
    }

    #[inline]
    pub fn group_of(&self, i: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => i / self.last,
            Granularity::PerOutputChannel => i % self.last,
        }
    }
}

/// Integer codes plus scales, or the untouched tensor for 16-bit specs.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantizedValue<T> {
    Quantized {
        shape: Vec<usize>,
        codes: Vec<i32>,
        scales: Vec<T>,
        spec: QuantSpec,
    },
    PassThrough(Tensor<T>),
}

impl<T: Scalar> QuantizedValue<T> {
    pub fn dequantize(&self) -> Tensor<T> {
        match self {
            QuantizedValue::PassThrough(t) => t.clone(),
            QuantizedValue::Quantized {
                shape,
                codes,
                scales,
                spec,
            } => {
                let layout = GroupLayout::new(shape, spec.granularity).expect("validated layout");
                Tensor::from_fn(shape, |i| {
                    T::lit(codes[i] as f64) * scales[layout.group_of(i)]
                })
            }
        }
    }

    pub fn codes(&self) -> Option<&[i32]> {
        match self {
            QuantizedValue::Quantized { codes, .. } => Some(codes),
            QuantizedValue::PassThrough(_) => None,
        }
    }

    pub fn scales(&self) -> Option<&[T]> {
        match self {
            QuantizedValue::Quantized { scales, .. } => Some(scales),
            QuantizedValue::PassThrough(_) => None,
        }
    }
}

/// Per-group scales `clip * max|x_g| / qmax`; all-zero groups get scale 1.
pub fn group_scales<T: Scalar>(
    x: &Tensor<T>,
    spec: QuantSpec,
    clip: &[T],
) -> Result<(GroupLayout, Vec<T>)> {
    let layout = GroupLayout::new(x.shape(), spec.granularity)?;
    if clip.len() != 1 && clip.len() != layout.groups {
        return Err(shape_err(
            "quantize",
            format!("{} clip factors for {} groups", clip.len(), layout.groups),
        ));
    }
    let mut absmax = vec![T::zero(); layout.groups];
    for (i, &v) in x.data().iter().enumerate() {
        let g = layout.group_of(i);
        absmax[g] = absmax[g].max(v.abs());
    }
    let qm = T::lit(spec.qmax() as f64);
    let scales = absmax
        .iter()
        .enumerate()
        .map(|(g, &m)| {
            if m > T::zero() {
                let c = if clip.len() == 1 { clip[0] } else { clip[g] };
                c * m / qm
            } else {
                T::one()
            }
        })
        .collect();
    Ok((layout, scales))
}

/// Symmetric quantization with round-half-away-from-zero and codes clamped
/// to `[-qmax, qmax]`.
pub fn quantize<T: Scalar>(
    x: &Tensor<T>,
    spec: QuantSpec,
    clip: &[T],
) -> Result<QuantizedValue<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    if spec.is_passthrough() {
        return Ok(QuantizedValue::PassThrough(x.clone()));
    }
    let (layout, scales) = group_scales(x, spec, clip)?;
    let qm = T::lit(spec.qmax() as f64);
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let u = (v / scales[layout.group_of(i)]).max(-qm).min(qm);
            u.round_half_away().to_i32().expect("code in range")
        })
        .collect();
    Ok(QuantizedValue::Quantized {
        shape: x.shape().to_vec(),
        codes,
        scales,
        spec,
    })
}

/// `dequantize(quantize(x))` without recording gradients.
pub fn fake_quant_tensor<T: Scalar>(
    x: &Tensor<T>,
    spec: QuantSpec,
    clip: &[T],
) -> Result<Tensor<T>> {
    Ok(quantize(x, spec, clip)?.dequantize())
}

/// Fake quantization on a tape. Gradient w.r.t. `x` is 1 inside the clip
/// range and 0 outside; the clip gradient flows through the scale with a
/// straight-through estimate for rounding. `exempt_rows` (per-token only)
/// marks rows that bypass quantization, repeating with the mask's length.
pub fn fake_quant<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    clip: Var,
    spec: QuantSpec,
    exempt_rows: Option<Arc<[bool]>>,
) -> Result<Var> {
    let params = FakeQuantParams {
        bits: spec.bits,
        granularity: spec.granularity,
        exempt_rows,
    };
    tape.fake_quant(x, clip, &params)
}

/// Projects clip factors back into `[CLIP_MIN, 1]`.
pub fn project_clip<T: Scalar>(clip: &mut [T]) {
    let lo = T::lit(CLIP_MIN);
    for c in clip {
        *c = c.max(lo).min(T::one());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor<f64> {
        Tensor::new(&[d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn worked_example_4bit_per_tensor() {
        let spec = QuantSpec::new(4, Granularity::PerTensor).unwrap();
        let q = quantize(&v(&[1.0, -0.5, 0.25]), spec, &[1.0]).unwrap();
        assert_eq!(q.codes().unwrap(), &[7, -4, 2]);
        assert_eq!(q.scales().unwrap(), &[1.0 / 7.0]);
        let d = q.dequantize();
        let want = [1.0, -4.0 / 7.0, 2.0 / 7.0];
        for (a, b) in d.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sixteen_bits_pass_through() {
        let x = v(&[0.1, -3.7, 1e-9]);
        let y = fake_quant_tensor(
            &x,
            QuantSpec::new(16, Granularity::PerTensor).unwrap(),
            &[1.0],
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_group_gets_unit_scale() {
        let x = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let q = quantize(&x, QuantSpec::activation(4), &[1.0]).unwrap();
        assert_eq!(q.scales().unwrap()[0], 1.0);
        assert_eq!(&q.codes().unwrap()[..2], &[0, 0]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let m = 2.5;
        let x = v(&[7.0, -7.0, 3.0, 0.0, -1.0]).map(|k| k / 7.0 * m);
        let y = fake_quant_tensor(
            &x,
            QuantSpec::new(4, Granularity::PerTensor).unwrap(),
            &[1.0],
        )
        .unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-15 * m);
        }
    }

    #[test]
    fn per_channel_groups_are_columns() {
        let w = Tensor::new(&[2, 2], vec![1.0, 10.0, -0.5, 5.0]).unwrap();
        let q = quantize(&w, QuantSpec::weight(4), &[1.0, 1.0]).unwrap();
        assert_eq!(q.scales().unwrap(), &[1.0 / 7.0, 10.0 / 7.0]);
    }

    #[test]
    fn rejects_non_finite_and_bad_bits() {
        assert!(quantize(&v(&[f64::NAN]), QuantSpec::activation(4), &[1.0]).is_err());
        assert!(QuantSpec::new(1, Granularity::PerTensor).is_err());
        assert!(QuantSpec::new(12, Granularity::PerTensor).is_err());
    }

    #[test]
    fn clip_projection() {
        let mut c = [1.5, 0.5, -1.0, 0.0];
        project_clip(&mut c);
        assert_eq!(c, [1.0, 0.5, CLIP_MIN, CLIP_MIN]);
    }
}
