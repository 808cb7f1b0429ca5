//! Layer-wise ternary and uniform k-bit weight quantizers.
//!
//! Both quantizers use a single scale per layer. The ternary quantizer follows
//! the TWN recipe (threshold `0.7·mean|W|`, scale = mean magnitude above the
//! threshold); the uniform quantizer maps `[-max|W|, max|W|]` onto `2^k` evenly
//! spaced levels.

use thiserror::Error;

use crate::tensor::{BatchNormParams, Tensor, TensorError};

/// Ratio between the ternary threshold and the mean absolute weight.
pub const TERNARY_THRESHOLD_RATIO: f64 = 0.7;

/// Widest code supported by `i8` code storage.
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("cannot quantize an empty tensor")]
    Empty,
    #[error("bit-width {0} is outside the supported range 1..=8")]
    Bits(u32),
    #[error("scale must be positive, got {0}")]
    Scale(f32),
    #[error("ternary codes must be -1, 0 or +1; found {0}")]
    TernaryCode(i8),
    #[error("uniform code {code} exceeds the {bits}-bit range")]
    UniformCode { code: i32, bits: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Rounding used by the uniform quantizer: half away from zero.
#[inline]
pub fn round_code(x: f64) -> f64 {
    x.round()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryQuant {
    /// `{-1, 0, +1}` codes, same shape as the source weight.
    pub codes: Tensor,
    pub alpha: f32,
    pub delta: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuant {
    /// Level indices in `[0, 2^bits - 1]`, stored as `i8` bit patterns
    /// (8-bit codes above 127 wrap; read them back with [`UniformQuant::code`]).
    pub codes: Tensor,
    pub bits: u32,
    pub scale: f32,
}

/// A quantized layer weight of either flavour.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantRecord {
    Ternary(TernaryQuant),
    Uniform(UniformQuant),
}

impl QuantRecord {
    pub fn dequantize(&self) -> Result<Tensor> {
        match self {
            QuantRecord::Ternary(q) => q.dequantize(),
            QuantRecord::Uniform(q) => q.dequantize(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            QuantRecord::Ternary(q) => q.codes.shape(),
            QuantRecord::Uniform(q) => q.codes.shape(),
        }
    }
}

pub fn ternary_quantize(w: &Tensor) -> Result<TernaryQuant> {
    let data = w.as_f32()?;
    if data.is_empty() {
        return Err(QuantError::Empty);
    }
    let mean_abs = data.iter().map(|&x| f64::from(x.abs())).sum::<f64>() / data.len() as f64;
    let delta = (TERNARY_THRESHOLD_RATIO * mean_abs) as f32;

    let mut support_sum = 0.0f64;
    let mut support_len = 0usize;
    let codes: Vec<i8> = data
        .iter()
        .map(|&x| {
            if x > delta {
                support_sum += f64::from(x);
                support_len += 1;
                1
            } else if x < -delta {
                support_sum -= f64::from(x);
                support_len += 1;
                -1
            } else {
                0
            }
        })
        .collect();
    let alpha = if support_len == 0 {
        0.0
    } else {
        (support_sum / support_len as f64) as f32
    };
    Ok(TernaryQuant {
        codes: Tensor::from_i8(w.shape().to_vec(), codes)?,
        alpha,
        delta,
    })
}

impl TernaryQuant {
    pub fn dequantize(&self) -> Result<Tensor> {
        let data = self
            .codes
            .as_i8()?
            .iter()
            .map(|&c| self.alpha * f32::from(c))
            .collect();
        Ok(Tensor::from_f32(self.codes.shape().to_vec(), data)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.codes.as_i8()?.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(QuantError::TernaryCode(bad));
        }
        Ok(())
    }
}

fn levels(bits: u32) -> Result<f64> {
    if bits == 0 || bits > MAX_BITS {
        return Err(QuantError::Bits(bits));
    }
    Ok(f64::from((1u32 << bits) - 1))
}

pub fn uniform_quantize(w: &Tensor, bits: u32) -> Result<UniformQuant> {
    let levels = levels(bits)?;
    let data = w.as_f32()?;
    if data.is_empty() {
        return Err(QuantError::Empty);
    }
    let scale = data.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    let codes = data
        .iter()
        .map(|&x| {
            let unit = if scale > 0.0 {
                f64::from(x) / (2.0 * f64::from(scale))
            } else {
                0.0
            };
            let n = round_code(levels * (unit + 0.5)).clamp(0.0, levels);
            n as u8 as i8
        })
        .collect();
    Ok(UniformQuant {
        codes: Tensor::from_i8(w.shape().to_vec(), codes)?,
        bits,
        scale,
    })
}

impl UniformQuant {
    /// Level index of a stored code.
    #[inline]
    pub fn code(raw: i8) -> u32 {
        u32::from(raw as u8)
    }

    /// Value represented by level `n`.
    #[inline]
    pub fn level_value(&self, n: u32) -> f32 {
        let levels = f64::from((1u32 << self.bits) - 1);
        (f64::from(self.scale) * (2.0 * f64::from(n) / levels - 1.0)) as f32
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        levels(self.bits)?;
        let data = self
            .codes
            .as_i8()?
            .iter()
            .map(|&c| self.level_value(Self::code(c)))
            .collect();
        Ok(Tensor::from_f32(self.codes.shape().to_vec(), data)?)
    }

    pub fn validate(&self) -> Result<()> {
        let top = levels(self.bits)? as u32;
        if let Some(&bad) = self.codes.as_i8()?.iter().find(|&&c| Self::code(c) > top) {
            return Err(QuantError::UniformCode {
                code: Self::code(bad) as i32,
                bits: self.bits,
            });
        }
        Ok(())
    }
}

/// `dequantize(uniform_quantize(w, bits)) - w`, elementwise.
pub fn quant_error(w: &Tensor, bits: u32) -> Result<Tensor> {
    let q = uniform_quantize(w, bits)?.dequantize()?;
    let data = q
        .as_f32()?
        .iter()
        .zip(w.as_f32()?)
        .map(|(a, b)| a - b)
        .collect();
    Ok(Tensor::from_f32(w.shape().to_vec(), data)?)
}

/// Folds a positive per-layer scale `s` applied to the BN input into the BN
/// parameters: `batch_norm(x, absorb(bn, s)) == batch_norm(s·x, bn)`.
pub fn absorb_scale_into_bn(bn: &BatchNormParams, s: f32) -> Result<BatchNormParams> {
    if !s.is_finite() || s <= 0.0 {
        return Err(QuantError::Scale(s));
    }
    Ok(BatchNormParams {
        gamma: bn.gamma.iter().map(|g| g * s).collect(),
        beta: bn.beta.clone(),
        running_mean: bn.running_mean.iter().map(|m| m / s).collect(),
        running_var: bn.running_var.clone(),
        epsilon: bn.epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::batch_norm;
    use proptest::prelude::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::from_f32(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn ternary_hand_example() {
        let q = ternary_quantize(&t(&[0.5, -0.2, 0.1, -0.8])).unwrap();
        assert!((q.delta - 0.28).abs() < 1e-7);
        assert_eq!(q.codes.as_i8().unwrap(), &[1, 0, 0, -1]);
        assert!((q.alpha - 0.65).abs() < 1e-7);
    }

    #[test]
    fn ternary_degenerate_and_constant() {
        let q = ternary_quantize(&t(&[0.0; 5])).unwrap();
        assert_eq!(q.delta, 0.0);
        assert_eq!(q.alpha, 0.0);
        assert!(q.codes.as_i8().unwrap().iter().all(|&c| c == 0));

        let q = ternary_quantize(&t(&[1.0; 4])).unwrap();
        assert!((q.delta - 0.7).abs() < 1e-7);
        assert_eq!(q.codes.as_i8().unwrap(), &[1, 1, 1, 1]);
        assert_eq!(q.alpha, 1.0);
    }

    #[test]
    fn empty_inputs_rejected() {
        let e = Tensor::from_f32(vec![0], vec![]).unwrap();
        assert_eq!(ternary_quantize(&e), Err(QuantError::Empty));
        assert_eq!(uniform_quantize(&e, 4).unwrap_err(), QuantError::Empty);
    }

    #[test]
    fn uniform_hand_examples() {
        let q = uniform_quantize(&t(&[-1.0, 0.5]), 2).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.codes.as_i8().unwrap(), &[0, 2]);
        let d = q.dequantize().unwrap();
        assert_eq!(d.as_f32().unwrap(), &[-1.0, 1.0 / 3.0]);

        let q = uniform_quantize(&t(&[0.1, -1.0]), 1).unwrap();
        assert_eq!(q.codes.as_i8().unwrap()[0], 1);
        assert_eq!(q.dequantize().unwrap().as_f32().unwrap()[0], 1.0);

        let q = uniform_quantize(&t(&[0.3, -0.1, 0.7]), 5).unwrap();
        assert_eq!(UniformQuant::code(q.codes.as_i8().unwrap()[2]), 31);
        assert_eq!(q.dequantize().unwrap().as_f32().unwrap()[2], 0.7);
    }

    #[test]
    fn eight_bit_codes_survive_i8_storage() {
        let q = uniform_quantize(&t(&[1.0, -1.0, 0.0]), 8).unwrap();
        let raw = q.codes.as_i8().unwrap();
        assert_eq!(UniformQuant::code(raw[0]), 255);
        assert_eq!(UniformQuant::code(raw[1]), 0);
        assert_eq!(UniformQuant::code(raw[2]), 128);
        q.validate().unwrap();
    }

    #[test]
    fn bit_width_limits() {
        assert_eq!(
            uniform_quantize(&t(&[1.0]), 0).unwrap_err(),
            QuantError::Bits(0)
        );
        assert_eq!(
            uniform_quantize(&t(&[1.0]), 9).unwrap_err(),
            QuantError::Bits(9)
        );
    }

    #[test]
    fn all_zero_uniform_maps_to_zero() {
        let q = uniform_quantize(&t(&[0.0, 0.0]), 3).unwrap();
        assert_eq!(q.scale, 0.0);
        assert!(q
            .dequantize()
            .unwrap()
            .as_f32()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dequantize_examples() {
        let q = TernaryQuant {
            codes: Tensor::from_i8(vec![3], vec![1, 0, -1]).unwrap(),
            alpha: 0.65,
            delta: 0.1,
        };
        assert_eq!(
            q.dequantize().unwrap().as_f32().unwrap(),
            &[0.65, 0.0, -0.65]
        );
        let q = UniformQuant {
            codes: Tensor::from_i8(vec![1], vec![0]).unwrap(),
            bits: 2,
            scale: 1.0,
        };
        assert_eq!(q.dequantize().unwrap().as_f32().unwrap(), &[-1.0]);
    }

    #[test]
    fn quant_error_examples() {
        let e = quant_error(&t(&[0.5, -1.0]), 2).unwrap();
        let e = e.as_f32().unwrap();
        assert!((e[0] - (1.0 / 3.0 - 0.5)).abs() < 1e-7);
        assert_eq!(e[1], 0.0);
        // -1/3 is on the 2-bit grid of scale 1.
        let e = quant_error(&t(&[-1.0 / 3.0, 1.0]), 2).unwrap();
        assert!(e.as_f32().unwrap()[0].abs() < 1e-7);
    }

    #[test]
    fn absorb_examples() {
        let bn = BatchNormParams::new(vec![2.0], vec![0.5], vec![4.0], vec![1.0], 1e-5).unwrap();
        assert_eq!(absorb_scale_into_bn(&bn, 1.0).unwrap(), bn);
        let a = absorb_scale_into_bn(&bn, 2.0).unwrap();
        assert_eq!(a.gamma, vec![4.0]);
        assert_eq!(a.running_mean, vec![2.0]);
        assert_eq!(
            absorb_scale_into_bn(&bn, 0.0).unwrap_err(),
            QuantError::Scale(0.0)
        );
        assert!(absorb_scale_into_bn(&bn, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn ternary_codes_follow_threshold(w in prop::collection::vec(-3.0f32..3.0, 1..64)) {
            let q = ternary_quantize(&t(&w)).unwrap();
            q.validate().unwrap();
            for (&x, &c) in w.iter().zip(q.codes.as_i8().unwrap()) {
                if x.abs() > q.delta {
                    prop_assert_eq!(c, x.signum() as i8);
                } else {
                    prop_assert_eq!(c, 0);
                }
            }
        }

        #[test]
        fn uniform_error_bound_and_monotone(
            w in prop::collection::vec(-5.0f32..5.0, 2..64),
            bits in 1u32..=8,
        ) {
            let q = uniform_quantize(&t(&w), bits).unwrap();
            q.validate().unwrap();
            let bound = q.scale / ((1u32 << bits) - 1) as f32 + 1e-6;
            let e = quant_error(&t(&w), bits).unwrap();
            prop_assert!(e.as_f32().unwrap().iter().all(|v| v.abs() <= bound));
            let codes = q.codes.as_i8().unwrap();
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] <= w[j] {
                        prop_assert!(UniformQuant::code(codes[i]) <= UniformQuant::code(codes[j]));
                    }
                }
            }
            let d = q.dequantize().unwrap();
            prop_assert!(d.as_f32().unwrap().iter().all(|v| v.abs() <= q.scale));
        }

        #[test]
        fn uniform_requantize_is_idempotent(
            w in prop::collection::vec(-5.0f32..5.0, 1..64),
            bits in 1u32..=8,
        ) {
            let q = uniform_quantize(&t(&w), bits).unwrap();
            let again = uniform_quantize(&q.dequantize().unwrap(), bits).unwrap();
            prop_assert_eq!(again, q);
        }

        #[test]
        fn absorb_matches_scaled_input(
            x in prop::collection::vec(-4.0f32..4.0, 6),
            s in 0.05f32..20.0,
        ) {
            let bn = BatchNormParams::new(
                vec![0.7, -1.3], vec![0.1, 0.4], vec![0.3, -0.2], vec![0.9, 2.5], 1e-5,
            ).unwrap();
            let xt = Tensor::from_f32(vec![2, 1, 3], x).unwrap();
            let lhs = batch_norm(&xt, &absorb_scale_into_bn(&bn, s).unwrap()).unwrap();
            let rhs = batch_norm(&xt.scale(s).unwrap(), &bn).unwrap();
            for (a, b) in lhs.as_f32().unwrap().iter().zip(rhs.as_f32().unwrap()) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()) * 4.0);
            }
        }
    }
}
