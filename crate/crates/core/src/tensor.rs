//! Dense row-major tensors and the reference inference kernels.
//!
//! Weights are laid out `o × i × kh × kw`, feature maps `c × h × w` (no batch
//! axis; batches are evaluated probe by probe). Integer dtypes exist only to
//! carry quantization codes through the archive; every arithmetic kernel
//! takes `f32` tensors and rejects anything else.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("expected dtype {expected:?}, found {actual:?}")]
    DType { expected: DType, actual: DType },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// An immutable dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, TensorData::I8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: TensorData::F32(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::I8,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::I32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Elementwise map over an `f32` tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let data = self.as_f32()?.iter().map(|&x| f(x)).collect();
        Self::from_f32(self.shape.clone(), data)
    }

    pub fn scale(&self, s: f32) -> Result<Self> {
        self.map(|x| x * s)
    }

    /// Interprets the tensor as `c × h × w`; 1-D tensors are `c × 1 × 1`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((*c, 1, 1)),
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(TensorError::Dimension(format!(
                "expected a c×h×w feature map, got shape {s:?}"
            ))),
        }
    }

    /// Interprets the tensor as a weight `o × i × kh × kw`; 2-D linear
    /// weights are `o × i × 1 × 1`.
    pub fn oikk(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [o, i] => Ok((*o, *i, 1, 1)),
            [o, i, kh, kw] => Ok((*o, *i, *kh, *kw)),
            s => Err(TensorError::Dimension(format!(
                "expected an o×i×k×k or o×i weight, got shape {s:?}"
            ))),
        }
    }
}

/// Inference-mode batch-normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        epsilon: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Dimension(format!(
                "batch-norm vectors differ in length: gamma {c}, beta {}, mean {}, var {}",
                beta.len(),
                running_mean.len(),
                running_var.len()
            )));
        }
        if running_var.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(TensorError::Argument(
                "batch-norm running variance must be non-negative".into(),
            ));
        }
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(TensorError::Argument(
                "batch-norm epsilon must be non-negative".into(),
            ));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        })
    }

    /// Identity normalization over `c` channels.
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub fn conv_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(TensorError::Dimension(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Direct cross-correlation of a `c × h × w` input with an `o × (c/groups) × kh × kw`
/// weight.
pub fn conv2d(weight: &Tensor, input: &Tensor, params: ConvParams) -> Result<Tensor> {
    conv2d_bias(weight, None, input, params)
}

pub fn conv2d_bias(
    weight: &Tensor,
    bias: Option<&[f32]>,
    input: &Tensor,
    params: ConvParams,
) -> Result<Tensor> {
    let ConvParams {
        stride,
        padding,
        groups,
    } = params;
    if stride == 0 || groups == 0 {
        return Err(TensorError::Argument(
            "stride and groups must be positive".into(),
        ));
    }
    let (o, ipg, kh, kw) = weight.oikk()?;
    let (c, h, w) = input.chw()?;
    if c != ipg * groups {
        return Err(TensorError::Dimension(format!(
            "input channels (axis 0 of input) = {c} but weight input channels (axis 1) × groups = {ipg} × {groups}"
        )));
    }
    if o % groups != 0 {
        return Err(TensorError::Dimension(format!(
            "output channels (axis 0 of weight) = {o} not divisible by groups = {groups}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(TensorError::Dimension(format!(
                "bias length {} != output channels {o}",
                b.len()
            )));
        }
    }
    let oh = conv_output_extent(h, kh, stride, padding)?;
    let ow = conv_output_extent(w, kw, stride, padding)?;
    let wd = weight.as_f32()?;
    let xd = input.as_f32()?;
    let opg = o / groups;
    let mut out = vec![0.0f32; o * oh * ow];

    for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
        let g = oc / opg;
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for ic in 0..ipg {
            let in_plane = &xd[(g * ipg + ic) * h * w..(g * ipg + ic + 1) * h * w];
            let kernel = &wd[(oc * ipg + ic) * kh * kw..(oc * ipg + ic + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = kernel[ky * kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, acc) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *acc += k * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_f32(vec![o, oh, ow], out)
}

/// A weighted layer kind: convolution or fully connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightedOp {
    Conv(ConvParams),
    Linear,
}

impl WeightedOp {
    pub fn groups(self) -> usize {
        match self {
            WeightedOp::Conv(p) => p.groups,
            WeightedOp::Linear => 1,
        }
    }

    pub fn apply(self, weight: &Tensor, bias: Option<&[f32]>, input: &Tensor) -> Result<Tensor> {
        match self {
            WeightedOp::Conv(p) => conv2d_bias(weight, bias, input, p),
            WeightedOp::Linear => linear(weight, bias, input),
        }
    }
}

/// Fully connected layer: `o × i` weight against any input holding `i` elements.
pub fn linear(weight: &Tensor, bias: Option<&[f32]>, input: &Tensor) -> Result<Tensor> {
    let (o, i) = match weight.shape() {
        [o, i] => (*o, *i),
        [o, i, 1, 1] => (*o, *i),
        s => {
            return Err(TensorError::Dimension(format!(
                "linear weight must be o×i, got {s:?}"
            )))
        }
    };
    let x = input.as_f32()?;
    if x.len() != i {
        return Err(TensorError::Dimension(format!(
            "linear input holds {} elements but weight axis 1 is {i}",
            x.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(TensorError::Dimension(format!(
                "bias length {} != output features {o}",
                b.len()
            )));
        }
    }
    let wd = weight.as_f32()?;
    let out = wd
        .chunks(i)
        .enumerate()
        .map(|(r, row)| {
            let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect();
    Tensor::from_f32(vec![o], out)
}

pub fn batch_norm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c != p.channels() {
        return Err(TensorError::Dimension(format!(
            "feature map has {c} channels, batch-norm has {}",
            p.channels()
        )));
    }
    let xd = x.as_f32()?;
    let mut out = Vec::with_capacity(xd.len());
    for (j, plane) in xd.chunks(h * w).enumerate() {
        let inv = p.gamma[j] / (p.running_var[j] + p.epsilon).sqrt();
        let mean = p.running_mean[j];
        let beta = p.beta[j];
        out.extend(plane.iter().map(|&v| inv * (v - mean) + beta));
    }
    Tensor::from_f32(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "add operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .as_f32()?
        .iter()
        .zip(b.as_f32()?)
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_f32(a.shape().to_vec(), data)
}

/// Concatenation along the channel axis.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Argument("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for t in parts {
        let (c, th, tw) = t.chw()?;
        if (th, tw) != (h, w) {
            return Err(TensorError::Dimension(format!(
                "concat spatial extents differ: {h}×{w} vs {th}×{tw}"
            )));
        }
        channels += c;
        data.extend_from_slice(t.as_f32()?);
    }
    let shape = if first.shape().len() == 1 {
        vec![channels]
    } else {
        vec![channels, h, w]
    };
    Tensor::from_f32(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// 2-D pooling. Average pooling counts padded positions as zeros
/// (`count_include_pad`), max pooling ignores them.
pub fn pool2d(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(TensorError::Argument("pool stride must be positive".into()));
    }
    let (c, h, w) = x.chw()?;
    let oh = conv_output_extent(h, kernel, stride, padding)?;
    let ow = conv_output_extent(w, kernel, stride, padding)?;
    let xd = x.as_f32()?;
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in xd.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match kind {
                    PoolKind::Avg => 0.0f32,
                    PoolKind::Max => f32::NEG_INFINITY,
                };
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        acc = match kind {
                            PoolKind::Avg => acc + v,
                            PoolKind::Max => acc.max(v),
                        };
                    }
                }
                if kind == PoolKind::Avg {
                    acc /= (kernel * kernel) as f32;
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_f32(vec![c, oh, ow], out)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let n = (h * w) as f32;
    let data = x
        .as_f32()?
        .chunks(h * w)
        .map(|p| p.iter().sum::<f32>() / n)
        .collect();
    Tensor::from_f32(vec![c, 1, 1], data)
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    x.clone().reshape(vec![x.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn element_count_is_checked() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::ElementCount {
                expected: 4,
                actual: 3,
                ..
            })
        ));
    }

    #[test]
    fn identity_kernel() {
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let x = t(&[1, 2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let y = conv2d(&w, &x, ConvParams::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zeros() {
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let x = t(&[2, 4, 4], &[1.5; 32]);
        let y = conv2d(
            &w,
            &x,
            ConvParams {
                padding: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_sums_window() {
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let y = conv2d(&w, &x, ConvParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.as_f32().unwrap(), &[9.0]);
    }

    #[test]
    fn output_extent_formula() {
        // floor((5 + 2 - 3) / 2) + 1 = 3
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        let x = Tensor::zeros(vec![1, 5, 7]);
        let y = conv2d(
            &w,
            &x,
            ConvParams {
                stride: 2,
                padding: 1,
                groups: 1,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
    }

    #[test]
    fn padded_conv_matches_hand_sum() {
        // 3x3 ones over a 2x2 input with padding 1: every output sees all four inputs.
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(
            &w,
            &x,
            ConvParams {
                padding: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(y.as_f32().unwrap(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let w = Tensor::zeros(vec![1, 2, 1, 1]);
        let x = Tensor::zeros(vec![3, 2, 2]);
        let err = conv2d(&w, &x, ConvParams::default()).unwrap_err();
        assert!(err.to_string().contains("axis"), "{err}");
    }

    #[test]
    fn depthwise_conv_keeps_channels_separate() {
        let w = t(&[2, 1, 1, 1], &[2.0, -1.0]);
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(
            &w,
            &x,
            ConvParams {
                groups: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(y.as_f32().unwrap(), &[2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn rejects_integer_weights() {
        let w = Tensor::from_i8(vec![1, 1, 1, 1], vec![1]).unwrap();
        let x = t(&[1, 1, 1], &[1.0]);
        assert!(matches!(
            conv2d(&w, &x, ConvParams::default()),
            Err(TensorError::DType { .. })
        ));
    }

    #[test]
    fn batch_norm_cases() {
        let x = t(&[1, 1, 2], &[3.0, -7.0]);
        let id = BatchNormParams::identity(1);
        assert_eq!(batch_norm(&x, &id).unwrap(), x);

        let p = BatchNormParams::new(vec![2.0], vec![1.0], vec![1.0], vec![4.0], 0.0).unwrap();
        let y = batch_norm(&t(&[1, 1, 1], &[3.0]), &p).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[3.0]);

        let p = BatchNormParams::new(
            vec![0.3, 5.0],
            vec![0.25, -2.0],
            vec![1.0, 2.0],
            vec![0.5, 9.0],
            1e-5,
        )
        .unwrap();
        let x = t(&[2, 1, 2], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(
            batch_norm(&x, &p).unwrap().as_f32().unwrap(),
            &[0.25, 0.25, -2.0, -2.0]
        );
    }

    #[test]
    fn batch_norm_rejects_bad_params() {
        assert!(
            BatchNormParams::new(vec![1.0], vec![0.0, 0.0], vec![0.0], vec![1.0], 1e-5).is_err()
        );
        assert!(BatchNormParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 1e-5).is_err());
        let x = Tensor::zeros(vec![2, 1, 1]);
        assert!(batch_norm(&x, &BatchNormParams::identity(3)).is_err());
    }

    #[test]
    fn relu_cases() {
        let y = relu(&t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.0, 0.0, 2.0]);
        let y = relu(&t(&[2], &[-1.0, -0.5])).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_and_pools() {
        let w = t(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let x = t(&[3, 1, 1], &[1.0, 2.0, 3.0]);
        let y = linear(&w, Some(&[0.0, 1.0]), &x).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[-2.0, 4.0]);

        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(global_avg_pool(&x).unwrap().as_f32().unwrap(), &[3.0]);
        let m = pool2d(&x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(m.as_f32().unwrap(), &[6.0]);
        let a = pool2d(&x, PoolKind::Avg, 2, 1, 0).unwrap();
        assert_eq!(a.as_f32().unwrap(), &[3.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let a = t(&[1, 1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = concat(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[3, 1, 2]);
        assert_eq!(y.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
