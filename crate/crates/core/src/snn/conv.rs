//! Convolution (cross-correlation) and transposed convolution via
//! im2col + GEMM.

use rand::Rng as _;

use super::{FeatureMap, Real};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution whose output drives LIF neurons.
    SpikingConv,
    AnalogConv,
    /// Transposed convolution with real-valued output.
    AnalogDeconv,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::SpikingConv => 0,
            LayerKind::AnalogConv => 1,
            LayerKind::AnalogDeconv => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LayerKind::SpikingConv),
            1 => Some(LayerKind::AnalogConv),
            2 => Some(LayerKind::AnalogDeconv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::SpikingConv => "spiking-conv",
            LayerKind::AnalogConv => "analog-conv",
            LayerKind::AnalogDeconv => "analog-deconv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    pub output_padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn conv(kind: LayerKind, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
            bias: false,
        }
    }

    /// Transposed convolution that scales the spatial size by `stride`.
    pub fn deconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::AnalogDeconv,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: (stride + 2 * padding).saturating_sub(kernel),
            bias: true,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn is_transposed(&self) -> bool {
        self.kind == LayerKind::AnalogDeconv
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate layer {self:?}")));
        }
        if self.output_padding > 0 && (!self.is_transposed() || self.output_padding >= self.stride) {
            return Err(Error::Config("output padding only applies to transposed layers and must be smaller than the stride".into()));
        }
        Ok(())
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |n: usize| -> Option<usize> {
            if self.is_transposed() {
                ((n.checked_sub(1)?) * self.stride + self.kernel + self.output_padding).checked_sub(2 * self.padding)
            } else {
                (n + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1)
            }
        };
        match (dim(h), dim(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::dimension(
                format!("input compatible with {:?}", self),
                format!("{h}x{w}"),
            )),
        }
    }
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

/// One convolutional layer. Convolution weights are laid out
/// `[out][in][k][k]`; transposed convolution weights `[in][out][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> ConvLayer<F> {
    pub fn zeros(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            weight: vec![F::zero(); spec.weight_len()],
            bias: vec![F::zero(); if spec.bias { spec.out_channels } else { 0 }],
        }
    }

    /// Uniform init in `±gain * sqrt(6 / fan_in)`; biases start at zero.
    pub fn kaiming_uniform(name: impl Into<String>, spec: ConvSpec, gain: f64, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(name, spec);
        let kk = spec.kernel * spec.kernel;
        let fan_in = if spec.is_transposed() {
            (spec.in_channels * kk / (spec.stride * spec.stride)).max(1)
        } else {
            spec.in_channels * kk
        };
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        for w in &mut layer.weight {
            *w = F::lit(rng.gen_range(-bound..=bound));
        }
        layer
    }

    pub fn zero_grads(&self) -> LayerGrads<F> {
        LayerGrads {
            weight: vec![F::zero(); self.weight.len()],
            bias: vec![F::zero(); self.bias.len()],
        }
    }

    pub fn cast<G: Real>(&self) -> ConvLayer<G> {
        ConvLayer {
            name: self.name.clone(),
            spec: self.spec,
            weight: self.weight.iter().map(|v| G::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }

    fn check_input(&self, input: &FeatureMap<F>) -> Result<(usize, usize)> {
        if input.channels != self.spec.in_channels {
            return Err(Error::dimension(
                format!("{} input channels for `{}`", self.spec.in_channels, self.name),
                input.channels,
            ));
        }
        self.spec.output_hw(input.height, input.width)
    }

    pub fn forward(&self, input: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let (oh, ow) = self.check_input(input)?;
        let s = &self.spec;
        let (k, cin, cout) = (s.kernel, s.in_channels, s.out_channels);
        let kk = k * k;
        let mut out = if s.is_transposed() {
            let pin = input.plane();
            let mut cols = vec![F::zero(); cout * kk * pin];
            F::gemm(cout * kk, cin, pin, &self.weight, true, &input.data, false, F::zero(), &mut cols);
            let data = col2im(&cols, cout, oh, ow, k, s.stride, s.padding, input.height, input.width);
            FeatureMap::from_vec(cout, oh, ow, data)
        } else {
            let cols = im2col(&input.data, cin, input.height, input.width, k, s.stride, s.padding, oh, ow);
            let mut out = FeatureMap::zeros(cout, oh, ow);
            F::gemm(cout, cin * kk, oh * ow, &self.weight, false, &cols, false, F::zero(), &mut out.data);
            out
        };
        if !self.bias.is_empty() {
            let plane = oh * ow;
            for (c, &b) in self.bias.iter().enumerate() {
                for v in &mut out.data[c * plane..(c + 1) * plane] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `input` when `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &FeatureMap<F>,
        grad_out: &FeatureMap<F>,
        grads: &mut LayerGrads<F>,
        want_input_grad: bool,
    ) -> Result<Option<FeatureMap<F>>> {
        let (oh, ow) = self.check_input(input)?;
        let s = &self.spec;
        if grad_out.shape() != (s.out_channels, oh, ow) {
            return Err(Error::dimension(
                format!("{}x{}x{}", s.out_channels, oh, ow),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let (k, cin, cout) = (s.kernel, s.in_channels, s.out_channels);
        let kk = k * k;
        let plane = oh * ow;
        for (c, gb) in grads.bias.iter_mut().enumerate() {
            *gb += grad_out.data[c * plane..(c + 1) * plane].iter().copied().sum::<F>();
        }
        if s.is_transposed() {
            let pin = input.plane();
            let gcols = im2col(&grad_out.data, cout, oh, ow, k, s.stride, s.padding, input.height, input.width);
            F::gemm(cin, pin, cout * kk, &input.data, false, &gcols, true, F::one(), &mut grads.weight);
            if !want_input_grad {
                return Ok(None);
            }
            let mut gin = FeatureMap::zeros(cin, input.height, input.width);
            F::gemm(cin, cout * kk, pin, &self.weight, false, &gcols, false, F::zero(), &mut gin.data);
            Ok(Some(gin))
        } else {
            let cols = im2col(&input.data, cin, input.height, input.width, k, s.stride, s.padding, oh, ow);
            F::gemm(cout, plane, cin * kk, &grad_out.data, false, &cols, true, F::one(), &mut grads.weight);
            if !want_input_grad {
                return Ok(None);
            }
            let mut gcols = vec![F::zero(); cin * kk * plane];
            F::gemm(cin * kk, cout, plane, &self.weight, true, &grad_out.data, false, F::zero(), &mut gcols);
            let data = col2im(&gcols, cin, input.height, input.width, k, s.stride, s.padding, oh, ow);
            Ok(Some(FeatureMap::from_vec(cin, input.height, input.width, data)))
        }
    }
}

/// Unfolds `[c][h][w]` into `[c * k * k][oh * ow]` patches with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(data: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<F> {
    let plane = oh * ow;
    let mut cols = vec![F::zero(); c * k * k * plane];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back, summing overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<F> {
    let plane = oh * ow;
    let mut data = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let dst = &mut data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    data
}
