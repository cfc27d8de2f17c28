//! Dense row-major `f64` tensors and the primitive kernels the spiking
//! blocks are built from.
//!
//! Axis order is fixed to `N, C, H, W` everywhere a spatial layout is
//! involved. There is no implicit broadcasting other than the per-channel
//! affine of batch normalization and conv bias.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an empty shape or a zero-length axis.
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                context,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, "zip_map")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape {
                context: "matmul (rank 2 required)",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dim {
                context: "matmul inner dimension",
                axis: 0,
                expected: k,
                got: k2,
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Self::new(&[m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape(self.shape.clone()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(&[n, m], out)
    }

    /// Element `index` along axis 0, as a tensor of the remaining axes.
    pub fn index0(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Self {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Concatenate equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::InvalidShape(Vec::new()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        Self::new(&shape, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn standard(in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: ConvKind::Standard,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            in_channels,
            out_channels,
        }
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: ConvKind::Depthwise,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: ConvKind::Pointwise,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride.0 == 0
            || self.stride.1 == 0
        {
            return Err(Error::Config(alloc::format!("degenerate conv spec {self:?}")));
        }
        match self.kind {
            ConvKind::Pointwise if self.kernel != (1, 1) => Err(Error::Config(
                "pointwise convolution requires a 1x1 kernel".into(),
            )),
            ConvKind::Depthwise if self.in_channels != self.out_channels => Err(Error::Config(
                "depthwise convolution requires out_channels == in_channels".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            ConvKind::Depthwise => self.in_channels,
            _ => 1,
        }
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups()
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape {
                context: "conv2d input smaller than kernel",
                lhs: vec![h, w],
                rhs: vec![kh, kw],
            });
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    /// MACs for one `[C, H, W]` item at full density.
    pub fn dense_macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1 * oh * ow) as u64)
    }

    pub(crate) fn check(&self, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
        self.validate()?;
        if input.rank() != 4 {
            return Err(Error::Shape {
                context: "conv2d input must be [N, C, H, W]",
                lhs: input.shape().to_vec(),
                rhs: vec![4],
            });
        }
        if input.dim(1) != self.in_channels {
            return Err(Error::Dim {
                context: "conv2d input channels",
                axis: 1,
                expected: self.in_channels,
                got: input.dim(1),
            });
        }
        let ws = self.weight_shape();
        if weights.shape() != ws {
            return Err(Error::Shape {
                context: "conv2d weight shape",
                lhs: weights.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(Error::Dim {
                    context: "conv2d bias",
                    axis: 0,
                    expected: self.out_channels,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }
}

/// Iterate every (output index, input index, weight index) triple of a
/// convolution for one batch item. The callback order is deterministic.
#[inline]
fn conv_visit(
    spec: &ConvSpec,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let (h, w) = in_hw;
    let (oh, ow) = out_hw;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cin_g = spec.in_per_group();
    let cout_g = spec.out_per_group();
    for oc in 0..spec.out_channels {
        let g = oc / cout_g;
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(
                                (oc * oh + oy) * ow + ox,
                                (ic * h + iy) * w + ix as usize,
                                widx,
                            );
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    spec.check(input, weights, bias)?;
    let (n, _, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (oh, ow) = spec.output_hw(h, w)?;
    let cout = spec.out_channels;
    let in_item = spec.in_channels * h * w;
    let out_item = cout * oh * ow;
    let mut out = vec![0.0; n * out_item];
    for b in 0..n {
        let x = &input.data()[b * in_item..(b + 1) * in_item];
        let y = &mut out[b * out_item..(b + 1) * out_item];
        if spec.kind == ConvKind::Pointwise {
            pointwise_forward(x, weights.data(), y, spec.in_channels, cout, h * w);
        } else {
            let wd = weights.data();
            conv_visit(spec, (h, w), (oh, ow), |o, i, k| y[o] += wd[k] * x[i]);
        }
        if let Some(bias) = bias {
            for oc in 0..cout {
                for v in &mut y[oc * oh * ow..(oc + 1) * oh * ow] {
                    *v += bias.data()[oc];
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

fn pointwise_forward(x: &[f64], w: &[f64], y: &mut [f64], cin: usize, cout: usize, hw: usize) {
    for oc in 0..cout {
        let yrow = &mut y[oc * hw..(oc + 1) * hw];
        for ic in 0..cin {
            let wv = w[oc * cin + ic];
            if wv == 0.0 {
                continue;
            }
            for (o, &xv) in yrow.iter_mut().zip(&x[ic * hw..(ic + 1) * hw]) {
                *o += wv * xv;
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    spec.check(input, weights, None)?;
    let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
    let (oh, ow) = spec.output_hw(h, w)?;
    let cout = spec.out_channels;
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::Shape {
            context: "conv2d_backward grad",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![n, cout, oh, ow],
        });
    }
    let in_item = spec.in_channels * h * w;
    let out_item = cout * oh * ow;
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; cout];
    let wd = weights.data();
    for b in 0..n {
        let x = &input.data()[b * in_item..(b + 1) * in_item];
        let gy = &grad_out.data()[b * out_item..(b + 1) * out_item];
        let gxi = &mut gx[b * in_item..(b + 1) * in_item];
        if spec.kind == ConvKind::Pointwise {
            let hw = h * w;
            let cin = spec.in_channels;
            for oc in 0..cout {
                let grow = &gy[oc * hw..(oc + 1) * hw];
                for ic in 0..cin {
                    let xrow = &x[ic * hw..(ic + 1) * hw];
                    let mut acc = 0.0;
                    for (g, xv) in grow.iter().zip(xrow) {
                        acc += g * xv;
                    }
                    gw[oc * cin + ic] += acc;
                    let wv = wd[oc * cin + ic];
                    for (gxv, g) in gxi[ic * hw..(ic + 1) * hw].iter_mut().zip(grow) {
                        *gxv += wv * g;
                    }
                }
            }
        } else {
            conv_visit(spec, (h, w), (oh, ow), |o, i, k| {
                gxi[i] += wd[k] * gy[o];
                gw[k] += x[i] * gy[o];
            });
        }
        for oc in 0..cout {
            gb[oc] += gy[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weights.shape(), gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Number of (output channel, output position) pairs that read input
/// element `(channel, y, x)`: the per-spike fan-out of an accumulate-only
/// convolution.
pub fn conv_fanout(spec: &ConvSpec, in_hw: (usize, usize), channel: usize, y: usize, x: usize) -> Result<u64> {
    let (oh, ow) = spec.output_hw(in_hw.0, in_hw.1)?;
    let count_axis = |pos: usize, k: usize, s: usize, p: usize, out: usize| {
        (0..k)
            .filter(|&kk| {
                let v = (pos + p) as isize - kk as isize;
                v >= 0 && (v as usize) % s == 0 && (v as usize) / s < out
            })
            .count()
    };
    let ny = count_axis(y, spec.kernel.0, spec.stride.0, spec.padding.0, oh);
    let nx = count_axis(x, spec.kernel.1, spec.stride.1, spec.padding.1, ow);
    let _ = channel;
    Ok((spec.out_per_group() * ny * nx) as u64)
}

/// Accumulate the contribution of one unit input at `(channel, y, x)` into a
/// `[C_out, OH, OW]` output: every reader adds its weight. Returns the
/// number of additions.
pub fn conv_scatter(
    spec: &ConvSpec,
    in_hw: (usize, usize),
    weights: &[f64],
    channel: usize,
    y: usize,
    x: usize,
    out: &mut [f64],
) -> Result<u64> {
    let (oh, ow) = spec.output_hw(in_hw.0, in_hw.1)?;
    let (kh, kw) = spec.kernel;
    let cin_g = spec.in_per_group();
    let cout_g = spec.out_per_group();
    let g = channel / cin_g;
    let icl = channel % cin_g;
    let mut adds = 0;
    for ky in 0..kh {
        let vy = (y + spec.padding.0) as isize - ky as isize;
        if vy < 0 || vy as usize % spec.stride.0 != 0 || vy as usize / spec.stride.0 >= oh {
            continue;
        }
        let oy = vy as usize / spec.stride.0;
        for kx in 0..kw {
            let vx = (x + spec.padding.1) as isize - kx as isize;
            if vx < 0 || vx as usize % spec.stride.1 != 0 || vx as usize / spec.stride.1 >= ow {
                continue;
            }
            let ox = vx as usize / spec.stride.1;
            for oc in g * cout_g..(g + 1) * cout_g {
                out[(oc * oh + oy) * ow + ox] += weights[((oc * cin_g + icl) * kh + ky) * kw + kx];
                adds += 1;
            }
        }
    }
    Ok(adds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(Error::Config(alloc::format!(
                    "batch-norm {name} has {} channels, gamma has {c}",
                    v.len()
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Epsilon(self.epsilon));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(alloc::format!(
                "batch-norm momentum must be in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative running variance".into()));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn inference_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / libm::sqrt(v + self.epsilon))
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

fn channel_layout(input: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::InvalidShape(input.shape().to_vec()));
    }
    if input.dim(1) != channels {
        return Err(Error::Dim {
            context: "batchnorm channels",
            axis: 1,
            expected: channels,
            got: input.dim(1),
        });
    }
    let inner: usize = input.shape()[2..].iter().product();
    Ok((input.dim(0), inner))
}

/// Batch normalization over axis 1 of an `[N, C, ...]` tensor.
///
/// Training mode normalizes with the biased batch statistics and folds the
/// unbiased variance into the running estimate; inference mode reads the
/// running statistics only.
pub fn batchnorm(input: &Tensor, params: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    params.validate()?;
    let c = params.channels();
    let (n, inner) = channel_layout(input, c)?;
    if !training {
        return batchnorm_infer(input, params);
    }
    let count = (n * inner) as f64;
    let mut out = input.clone();
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| (0..inner).map(move |i| (b * c + ch) * inner + i));
        let mean = vals().map(|i| input.data()[i]).sum::<f64>() / count;
        let var = vals()
            .map(|i| {
                let d = input.data()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / count;
        let inv = 1.0 / libm::sqrt(var + params.epsilon);
        for i in vals() {
            out.data_mut()[i] = (input.data()[i] - mean) * inv * params.gamma[ch] + params.beta[ch];
        }
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        let m = params.momentum;
        params.running_mean[ch] = (1.0 - m) * params.running_mean[ch] + m * mean;
        params.running_var[ch] = (1.0 - m) * params.running_var[ch] + m * unbiased;
    }
    Ok(out)
}

pub fn batchnorm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    params.validate()?;
    let c = params.channels();
    let (n, inner) = channel_layout(input, c)?;
    let (scale, shift) = params.inference_affine();
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Ok(out)
}

/// Fold inference-mode batch normalization into the preceding convolution.
pub fn fold_bn_into_conv(
    weights: &Tensor,
    bias: Option<&Tensor>,
    params: &BatchNormParams,
) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let cout = weights.dim(0);
    if cout != params.channels() {
        return Err(Error::Dim {
            context: "fold_bn_into_conv output channels",
            axis: 0,
            expected: params.channels(),
            got: cout,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Dim {
                context: "fold_bn_into_conv bias",
                axis: 0,
                expected: cout,
                got: b.len(),
            });
        }
    }
    let (scale, shift) = params.inference_affine();
    let per = weights.len() / cout;
    let mut w = weights.clone();
    for oc in 0..cout {
        for v in &mut w.data_mut()[oc * per..(oc + 1) * per] {
            *v *= scale[oc];
        }
    }
    let b = (0..cout)
        .map(|oc| bias.map_or(0.0, |b| b.data()[oc]) * scale[oc] + shift[oc])
        .collect();
    Ok((w, Tensor::new(&[cout], b)?))
}

/// Bilinear sampling of a `[C, H, W]` map at `[P, 2]` points given as
/// `(y, x)`, where integer coordinates land exactly on grid values.
/// Neighbours outside the map read as zero.
pub fn bilinear_sample(feature: &Tensor, points: &Tensor) -> Result<Tensor> {
    if feature.rank() != 3 {
        return Err(Error::InvalidShape(feature.shape().to_vec()));
    }
    if points.rank() != 2 || points.dim(1) != 2 {
        return Err(Error::Dim {
            context: "bilinear_sample points",
            axis: 1,
            expected: 2,
            got: points.shape().get(1).copied().unwrap_or(0),
        });
    }
    let (c, h, w) = (feature.dim(0), feature.dim(1), feature.dim(2));
    let p = points.dim(0);
    let mut out = vec![0.0; p * c];
    for i in 0..p {
        let (y, x) = (points.data()[2 * i], points.data()[2 * i + 1]);
        for (idx, wt) in bilinear_taps(y, x, h, w).into_iter().flatten() {
            for ch in 0..c {
                out[i * c + ch] += wt * feature.data()[ch * h * w + idx];
            }
        }
    }
    Tensor::new(&[p, c], out)
}

/// The up-to-four in-bounds neighbours of `(y, x)` with their weights.
#[inline]
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let y0 = libm::floor(y);
    let x0 = libm::floor(x);
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut taps = [None; 4];
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    for (slot, (yy, xx, wt)) in taps.iter_mut().zip(corners) {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            *slot = Some((yy as usize * w + xx as usize, wt));
        }
    }
    taps
}

/// Derivatives of the bilinear weights with respect to `y` and `x`, paired
/// with the in-bounds neighbour index.
#[inline]
pub(crate) fn bilinear_tap_grads(y: f64, x: f64, h: usize, w: usize) -> [Option<(usize, f64, f64)>; 4] {
    let y0 = libm::floor(y);
    let x0 = libm::floor(x);
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut taps = [None; 4];
    let corners = [
        (y0, x0, -(1.0 - fx), -(1.0 - fy)),
        (y0, x0 + 1, -fx, 1.0 - fy),
        (y0 + 1, x0, 1.0 - fx, -fy),
        (y0 + 1, x0 + 1, fx, fy),
    ];
    for (slot, (yy, xx, dy, dx)) in taps.iter_mut().zip(corners) {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            *slot = Some((yy as usize * w + xx as usize, dy, dx));
        }
    }
    taps
}

/// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` tensor.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::InvalidShape(input.shape().to_vec()));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let mut out = vec![0.0; n * c * 4 * h * w];
    for nc in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[(nc * 2 * h + y) * 2 * w + x] = input.data()[(nc * h + y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn upsample2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut g = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                g[(nc * h + y / 2) * w + x / 2] += grad_out.data()[(nc * 2 * h + y) * 2 * w + x];
            }
        }
    }
    Tensor::new(in_shape, g)
}
