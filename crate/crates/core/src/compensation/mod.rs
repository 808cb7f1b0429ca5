//! Data-free channel compensation between a low-bit layer and the high-bit
//! layer that consumes it.
//!
//! For every output channel `j` of the low-bit layer `l` (equivalently input
//! channel `j` of layer `l+1`) a non-negative coefficient `c_j` rescales the
//! high-bit weights feeding on that channel. The coefficient minimizes
//!
//! ```text
//! J_j(c) = w_Γ·‖c·Ŵˡ_j − Wˡ_j‖² + w_Θ·c²·‖ΔQˡ⁺¹_{·,j}‖² + λ2·c²
//! ```
//!
//! where `Ŵ` is the dequantized low-bit weight and `ΔQ` the quantization
//! error of the high-bit weight. By default `w_Γ = 1` and `w_Θ = λ1`; see
//! [`Lambda1Placement`]. The quadratic has the closed-form minimizer used by
//! [`solve_coefficients`]; [`oracle::oracle_minimize`] checks it numerically.

pub mod oracle;

use thiserror::Error;

use crate::quant::{self, QuantError, QuantRecord, UniformQuant};
use crate::tensor::{relu, BatchNormParams, Tensor, TensorError, WeightedOp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompensationError {
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("coefficient vector has {actual} entries, pair has {expected} channels")]
    Length { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CompensationError>;

/// Non-weighted operation between the two layers of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interlude<'a> {
    Relu,
    BatchNorm(&'a BatchNormParams),
}

/// A borrowed weighted layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    pub name: &'a str,
    pub weight: &'a Tensor,
    pub bias: Option<&'a [f32]>,
    pub op: WeightedOp,
}

impl<'a> LayerRef<'a> {
    pub fn conv(name: &'a str, weight: &'a Tensor, params: crate::tensor::ConvParams) -> Self {
        Self {
            name,
            weight,
            bias: None,
            op: WeightedOp::Conv(params),
        }
    }

    pub fn output_channels(&self) -> Result<usize> {
        Ok(self.weight.oikk()?.0)
    }

    pub fn input_channels(&self) -> Result<usize> {
        Ok(self.weight.oikk()?.1 * self.op.groups())
    }
}

/// A low-bit layer followed (through only BN/ReLU) by the high-bit layer
/// that compensates it.
#[derive(Debug, Clone)]
pub struct LayerPair<'a> {
    pub low: LayerRef<'a>,
    pub high: LayerRef<'a>,
    pub low_bits: u32,
    pub high_bits: u32,
    pub between: Vec<Interlude<'a>>,
}

impl<'a> LayerPair<'a> {
    pub fn new(
        low: LayerRef<'a>,
        high: LayerRef<'a>,
        low_bits: u32,
        high_bits: u32,
        between: Vec<Interlude<'a>>,
    ) -> Result<Self> {
        let pair = Self {
            low,
            high,
            low_bits,
            high_bits,
            between,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.low.output_channels()?;
        let inp = self.high.input_channels()?;
        if out != inp {
            return Err(CompensationError::Pairing(format!(
                "{} has {out} output channels but {} consumes {inp}",
                self.low.name, self.high.name
            )));
        }
        if self.low_bits > self.high_bits {
            return Err(CompensationError::Pairing(format!(
                "low layer {} uses {} bits, more than high layer {} ({} bits)",
                self.low.name, self.low_bits, self.high.name, self.high_bits
            )));
        }
        for step in &self.between {
            if let Interlude::BatchNorm(bn) = step {
                if bn.channels() != out {
                    return Err(CompensationError::Pairing(format!(
                        "batch-norm between {} and {} has {} channels, expected {out}",
                        self.low.name,
                        self.high.name,
                        bn.channels()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Shared channel count (`o_l == i_{l+1}`).
    pub fn channel_count(&self) -> usize {
        self.low.weight.shape()[0]
    }

    /// Quantizes both layers and extracts the per-channel problem.
    pub fn prepare(&self) -> Result<PreparedPair> {
        self.validate()?;
        let low = quantize_low(self.low.weight, self.low_bits)?;
        let high = quant::uniform_quantize(self.high.weight, self.high_bits)?;
        PreparedPair::from_parts(
            low,
            high,
            self.low.weight,
            self.high.weight,
            self.high.op.groups(),
        )
    }
}

/// Ternary at 2 bits, uniform otherwise.
pub fn quantize_low(weight: &Tensor, bits: u32) -> Result<QuantRecord> {
    Ok(if bits == 2 {
        QuantRecord::Ternary(quant::ternary_quantize(weight)?)
    } else {
        QuantRecord::Uniform(quant::uniform_quantize(weight, bits)?)
    })
}

/// Visits every element of input channel `j` of a (possibly grouped) weight,
/// passing the flat element index.
pub fn for_each_input_channel_index(
    shape: (usize, usize, usize, usize),
    groups: usize,
    j: usize,
    mut f: impl FnMut(usize),
) {
    let (o, ipg, kh, kw) = shape;
    let opg = o / groups;
    let g = j / ipg;
    let local = j % ipg;
    let k = kh * kw;
    for oc in g * opg..(g + 1) * opg {
        let start = (oc * ipg + local) * k;
        (start..start + k).for_each(&mut f);
    }
}

/// Which term the first regularization weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Lambda1Placement {
    /// `‖Γ‖² + λ1·‖Θ‖²`
    #[default]
    Theta,
    /// `λ1·‖Γ‖² + ‖Θ‖²`
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub lambda1: f64,
    pub lambda2: f64,
    pub placement: Lambda1Placement,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.0,
            placement: Lambda1Placement::Theta,
        }
    }
}

impl Regularization {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(CompensationError::Argument(format!(
                "regularization weights must be finite and non-negative, got λ1={lambda1}, λ2={lambda2}"
            )));
        }
        Ok(Self {
            lambda1,
            lambda2,
            placement: Lambda1Placement::Theta,
        })
    }

    /// `(w_Γ, w_Θ)`
    fn weights(&self) -> (f64, f64) {
        match self.placement {
            Lambda1Placement::Theta => (1.0, self.lambda1),
            Lambda1Placement::Gamma => (self.lambda1, 1.0),
        }
    }
}

/// Per-channel data of one compensation problem, in `f64`.
#[derive(Debug, Clone)]
pub struct ChannelData {
    /// Output-channel slice `j` of the full-precision low-bit layer weight.
    pub original: Vec<f64>,
    /// Same slice of the dequantized low-bit weight.
    pub quantized: Vec<f64>,
    /// `‖ΔQ_{·,j}‖²` of the high-bit layer's input-channel slice `j`.
    pub high_error_sq: f64,
}

impl ChannelData {
    /// `J_j(c)` by direct summation.
    pub fn objective(&self, c: f64, reg: &Regularization) -> f64 {
        let (wg, wt) = reg.weights();
        wg * self.gamma_sq(c) + wt * self.theta_sq(c) + reg.lambda2 * c * c
    }

    pub fn gamma_sq(&self, c: f64) -> f64 {
        self.quantized
            .iter()
            .zip(&self.original)
            .map(|(q, w)| {
                let r = c * q - w;
                r * r
            })
            .sum()
    }

    pub fn theta_sq(&self, c: f64) -> f64 {
        c * c * self.high_error_sq
    }
}

/// A quantized pair with its per-channel compensation problem.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub low: QuantRecord,
    pub high: UniformQuant,
    pub high_groups: usize,
    pub channels: Vec<ChannelData>,
}

impl PreparedPair {
    pub fn from_parts(
        low: QuantRecord,
        high: UniformQuant,
        low_weight: &Tensor,
        high_weight: &Tensor,
        high_groups: usize,
    ) -> Result<Self> {
        let low_dq = low.dequantize()?;
        let low_dq = low_dq.as_f32()?;
        let low_fp = low_weight.as_f32()?;
        let (o, ..) = low_weight.oikk()?;
        let per = low_fp.len() / o.max(1);

        let high_shape = high_weight.oikk()?;
        let high_fp = high_weight.as_f32()?;
        let high_dq = high.dequantize()?;
        let high_dq = high_dq.as_f32()?;

        let channels = (0..o)
            .map(|j| {
                let range = j * per..(j + 1) * per;
                let mut err = 0.0f64;
                for_each_input_channel_index(high_shape, high_groups, j, |idx| {
                    let d = f64::from(high_dq[idx]) - f64::from(high_fp[idx]);
                    err += d * d;
                });
                ChannelData {
                    original: low_fp[range.clone()]
                        .iter()
                        .map(|&x| f64::from(x))
                        .collect(),
                    quantized: low_dq[range].iter().map(|&x| f64::from(x)).collect(),
                    high_error_sq: err,
                }
            })
            .collect();
        Ok(Self {
            low,
            high,
            high_groups,
            channels,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn check_len(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.channels.len() {
            return Err(CompensationError::Length {
                expected: self.channels.len(),
                actual: c.len(),
            });
        }
        Ok(())
    }

    /// Per-channel objective values and their sum.
    pub fn objective_value(&self, c: &[f64], reg: &Regularization) -> Result<(Vec<f64>, f64)> {
        self.check_len(c)?;
        let per: Vec<f64> = self
            .channels
            .iter()
            .zip(c)
            .map(|(ch, &cj)| ch.objective(cj, reg))
            .collect();
        let total = per.iter().sum();
        Ok((per, total))
    }
}

/// Free-function form of [`PreparedPair::objective_value`].
pub fn objective_value(
    pair: &PreparedPair,
    c: &[f64],
    reg: &Regularization,
) -> Result<(Vec<f64>, f64)> {
    pair.objective_value(c, reg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationResult {
    pub c: Vec<f64>,
    /// `‖Γ_j‖²` at the solution.
    pub gamma_sq: Vec<f64>,
    /// `‖Θ_j‖²` at the solution (unweighted).
    pub theta_sq: Vec<f64>,
    /// Total objective at `c = 1`.
    pub objective_before: f64,
    /// Total objective at the solution.
    pub objective_after: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Closed-form per-channel minimizer, clamped at zero. Channels whose
/// objective does not depend on `c` keep `c_j = 1`.
pub fn closed_form(ch: &ChannelData, reg: &Regularization) -> f64 {
    let (wg, wt) = reg.weights();
    let dot: f64 = ch
        .quantized
        .iter()
        .zip(&ch.original)
        .map(|(q, w)| q * w)
        .sum();
    let norm: f64 = ch.quantized.iter().map(|q| q * q).sum();
    let denom = wg * norm + wt * ch.high_error_sq + reg.lambda2;
    if denom <= 0.0 {
        return 1.0;
    }
    (wg * dot / denom).max(0.0)
}

pub fn solve_prepared(pair: &PreparedPair, reg: &Regularization) -> CompensationResult {
    let c: Vec<f64> = pair
        .channels
        .iter()
        .map(|ch| closed_form(ch, reg))
        .collect();
    let ones = vec![1.0; c.len()];
    let before = pair
        .objective_value(&ones, reg)
        .map(|r| r.1)
        .unwrap_or(f64::NAN);
    let after = pair
        .objective_value(&c, reg)
        .map(|r| r.1)
        .unwrap_or(f64::NAN);
    CompensationResult {
        gamma_sq: pair
            .channels
            .iter()
            .zip(&c)
            .map(|(ch, &cj)| ch.gamma_sq(cj))
            .collect(),
        theta_sq: pair
            .channels
            .iter()
            .zip(&c)
            .map(|(ch, &cj)| ch.theta_sq(cj))
            .collect(),
        objective_before: before,
        objective_after: after,
        lambda1: reg.lambda1,
        lambda2: reg.lambda2,
        c,
    }
}

/// Quantizes the pair and solves for the compensation coefficients.
pub fn solve_coefficients(
    pair: &LayerPair<'_>,
    reg: &Regularization,
) -> Result<CompensationResult> {
    let prepared = pair.prepare()?;
    Ok(solve_prepared(&prepared, reg))
}

/// High-bit weight with per-input-channel compensation applied at
/// dequantization. Codes are those of the plain uniform quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedWeight {
    pub quant: UniformQuant,
    pub coeff: Vec<f32>,
    pub groups: usize,
}

impl CompensatedWeight {
    pub fn dequantize(&self) -> Result<Tensor> {
        let plain = self.quant.dequantize()?;
        scale_input_channels(&plain, self.groups, &self.coeff)
    }
}

/// Multiplies input-channel slice `j` of a weight by `c[j]`.
pub fn scale_input_channels(weight: &Tensor, groups: usize, c: &[f32]) -> Result<Tensor> {
    let shape = weight.oikk()?;
    let channels = shape.1 * groups;
    if c.len() != channels {
        return Err(CompensationError::Length {
            expected: channels,
            actual: c.len(),
        });
    }
    let mut data = weight.as_f32()?.to_vec();
    for (j, &cj) in c.iter().enumerate() {
        for_each_input_channel_index(shape, groups, j, |idx| data[idx] *= cj);
    }
    Ok(Tensor::from_f32(weight.shape().to_vec(), data)?)
}

/// Multiplies output-channel slice `j` of a weight by `c[j]`.
pub fn scale_output_channels(weight: &Tensor, c: &[f32]) -> Result<Tensor> {
    let (o, ..) = weight.oikk()?;
    if c.len() != o {
        return Err(CompensationError::Length {
            expected: o,
            actual: c.len(),
        });
    }
    let per = weight.len() / o.max(1);
    let mut data = weight.as_f32()?.to_vec();
    for (chunk, &cj) in data.chunks_mut(per.max(1)).zip(c) {
        chunk.iter_mut().for_each(|v| *v *= cj);
    }
    Ok(Tensor::from_f32(weight.shape().to_vec(), data)?)
}

pub fn apply_compensation(pair: &PreparedPair, c: &[f64]) -> Result<CompensatedWeight> {
    pair.check_len(c)?;
    if let Some(bad) = c.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(CompensationError::Argument(format!(
            "compensation coefficients must be non-negative, got {bad}"
        )));
    }
    Ok(CompensatedWeight {
        quant: pair.high.clone(),
        coeff: c.iter().map(|&v| v as f32).collect(),
        groups: pair.high_groups,
    })
}

fn run_between(between: &[Interlude<'_>], mut x: Tensor) -> Result<Tensor> {
    for step in between {
        x = match step {
            Interlude::Relu => relu(&x)?,
            Interlude::BatchNorm(bn) => crate::tensor::batch_norm(&x, bn)?,
        };
    }
    Ok(x)
}

/// Outcome of comparing the two placements of the compensation coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum Equivalence {
    /// Largest absolute deviation between the two paths, and the largest
    /// absolute output value for relative comparisons.
    Deviation { max_abs: f64, reference: f64 },
    /// A normalization layer sits between the pair, so scaling the low-bit
    /// output channel is not interchangeable with scaling the high-bit input.
    NotApplicable(String),
}

impl Equivalence {
    pub fn relative(&self) -> Option<f64> {
        match self {
            Equivalence::Deviation { max_abs, reference } => Some(if *reference > 0.0 {
                max_abs / reference
            } else {
                *max_abs
            }),
            Equivalence::NotApplicable(_) => None,
        }
    }
}

/// Runs the pair twice on `probe`: once with `c` folded into the low-bit
/// layer's output channels, once with `c` applied to the high-bit layer's
/// input channels.
pub fn placement_equivalence_check(
    pair: &LayerPair<'_>,
    c: &[f64],
    probe: &Tensor,
) -> Result<Equivalence> {
    if pair
        .between
        .iter()
        .any(|s| matches!(s, Interlude::BatchNorm(_)))
    {
        return Ok(Equivalence::NotApplicable(
            "equivalence holds only without intervening normalization".into(),
        ));
    }
    let prepared = pair.prepare()?;
    let compensated = apply_compensation(&prepared, c)?;
    let c32 = &compensated.coeff;
    let low_dq = prepared.low.dequantize()?;
    let high_plain = prepared.high.dequantize()?;

    let scaled_low = scale_output_channels(&low_dq, c32)?;
    let scaled_bias: Option<Vec<f32>> = pair
        .low
        .bias
        .map(|b| b.iter().zip(c32).map(|(b, c)| b * c).collect());
    let a = pair
        .low
        .op
        .apply(&scaled_low, scaled_bias.as_deref(), probe)?;
    let a = run_between(&pair.between, a)?;
    let a = pair.high.op.apply(&high_plain, pair.high.bias, &a)?;

    let b = pair.low.op.apply(&low_dq, pair.low.bias, probe)?;
    let b = run_between(&pair.between, b)?;
    let b = pair
        .high
        .op
        .apply(&compensated.dequantize()?, pair.high.bias, &b)?;

    let (mut max_abs, mut reference) = (0.0f64, 0.0f64);
    for (x, y) in a.as_f32()?.iter().zip(b.as_f32()?) {
        max_abs = max_abs.max(f64::from((x - y).abs()));
        reference = reference.max(f64::from(x.abs()).max(f64::from(y.abs())));
    }
    Ok(Equivalence::Deviation { max_abs, reference })
}

/// Mean over probes of the summed squared difference between the
/// full-precision and mixed-precision outputs of layer `l+1`.
pub fn empirical_reconstruction_loss(
    pair: &LayerPair<'_>,
    c: &[f64],
    probes: &[Tensor],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(CompensationError::Argument("no probes supplied".into()));
    }
    let prepared = pair.prepare()?;
    let low_dq = prepared.low.dequantize()?;
    let high_dq = apply_compensation(&prepared, c)?.dequantize()?;
    let mut total = 0.0f64;
    for probe in probes {
        let fp = pair.low.op.apply(pair.low.weight, pair.low.bias, probe)?;
        let fp = run_between(&pair.between, fp)?;
        let fp = pair.high.op.apply(pair.high.weight, pair.high.bias, &fp)?;

        let mp = pair.low.op.apply(&low_dq, pair.low.bias, probe)?;
        let mp = run_between(&pair.between, mp)?;
        let mp = pair.high.op.apply(&high_dq, pair.high.bias, &mp)?;

        total += fp
            .as_f32()?
            .iter()
            .zip(mp.as_f32()?)
            .map(|(a, b)| {
                let d = f64::from(a - b);
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / probes.len() as f64)
}
