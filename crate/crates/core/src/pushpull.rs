//! Push-pull inhibition layer.
//!
//! The layer holds a single learned "push" kernel `k`. Its "pull" kernel is
//! derived on every forward pass by resizing `k` with bilinear interpolation
//! to a larger support and flipping its sign. The response is
//!
//! ```text
//! P(I) = relu(k * I + b) - alpha * relu(pull(k) * I)
//! ```
//!
//! Both paths use "same" zero padding for their own kernel size so the two
//! response maps align. Gradients from the pull path are carried back to the
//! push kernel through the adjoint of the (linear) pull transform, so the
//! trainable parameter count equals that of a plain convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward, relu, relu_backward};
use crate::optim::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushPullConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Side of the square push kernel. Must be odd.
    pub kernel_size: usize,
    /// Inhibition strength.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Spatial scale of the pull kernel relative to the push kernel.
    #[serde(default = "default_upsample")]
    pub upsample: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_upsample() -> f64 {
    2.0
}

fn default_stride() -> usize {
    1
}

fn default_bias() -> bool {
    true
}

impl PushPullConfig {
    /// Layer with the default inhibition strength 1 and upsampling factor 2.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        PushPullConfig {
            in_channels,
            out_channels,
            kernel_size,
            alpha: default_alpha(),
            upsample: default_upsample(),
            stride: default_stride(),
            bias: default_bias(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_upsample(mut self, upsample: f64) -> Self {
        self.upsample = upsample;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("push-pull channel counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "push-pull kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "inhibition strength must be a non-negative number, got {}",
                self.alpha
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("push-pull stride must be positive".into()));
        }
        pull_kernel_size(self.kernel_size, self.upsample)?;
        Ok(())
    }

    pub fn pull_size(&self) -> Result<usize> {
        pull_kernel_size(self.kernel_size, self.upsample)
    }

    /// Trainable scalars: the push kernel plus the optional bias.
    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
            + if self.bias { self.out_channels } else { 0 }
    }
}

/// Smallest odd integer not below `round(k * h)`.
pub fn pull_kernel_size(kernel_size: usize, upsample: f64) -> Result<usize> {
    if !(upsample >= 1.0 && upsample.is_finite()) {
        return Err(Error::domain(
            "derive_pull",
            format!("upsampling factor must be a finite value >= 1, got {upsample}"),
        ));
    }
    if kernel_size == 0 {
        return Err(Error::domain("derive_pull", "kernel size must be positive"));
    }
    let rounded = (kernel_size as f64 * upsample).round() as usize;
    Ok(if rounded.is_multiple_of(2) { rounded + 1 } else { rounded })
}

/// One-dimensional corner-aligned bilinear resampling from `from` to `to`
/// samples, stored as at most two `(source index, weight)` taps per output.
#[derive(Clone, Debug, PartialEq)]
struct ResampleAxis {
    from: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl ResampleAxis {
    fn new(from: usize, to: usize) -> Self {
        let taps = (0..to)
            .map(|j| {
                if from == 1 || to == 1 {
                    return vec![(0, 1.0)];
                }
                // output j sits at source coordinate j * (from - 1) / (to - 1)
                let pos = (j * (from - 1)) as f64 / (to - 1) as f64;
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                if frac == 0.0 || lo + 1 >= from {
                    vec![(lo.min(from - 1), 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (lo + 1, frac)]
                }
            })
            .collect();
        ResampleAxis { from, taps }
    }

    fn to(&self) -> usize {
        self.taps.len()
    }
}

/// The fixed linear map from a push kernel to its pull kernel for a given
/// `(k, h)`: resize every `k x k` slice to `k' x k'` and negate.
#[derive(Clone, Debug, PartialEq)]
pub struct PullTransform {
    axis: ResampleAxis,
}

impl PullTransform {
    pub fn new(kernel_size: usize, upsample: f64) -> Result<Self> {
        let to = pull_kernel_size(kernel_size, upsample)?;
        Ok(PullTransform {
            axis: ResampleAxis::new(kernel_size, to),
        })
    }

    pub fn push_size(&self) -> usize {
        self.axis.from
    }

    pub fn pull_size(&self) -> usize {
        self.axis.to()
    }

    fn slices<T: Scalar>(&self, t: &Tensor<T>, size: usize, op: &'static str) -> Result<(usize, usize)> {
        let (o, i, kh, kw) = t.dims4(op)?;
        if kh != size || kw != size {
            return Err(Error::shape(
                op,
                format!("expected {size}x{size} kernel slices, got {kh}x{kw}"),
            ));
        }
        Ok((o, i))
    }

    /// Push kernel `(O, I, k, k)` to pull kernel `(O, I, k', k')`.
    pub fn apply<T: Scalar>(&self, push: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.push_size();
        let kp = self.pull_size();
        let (o, i) = self.slices(push, k, "derive_pull")?;
        let mut out = Vec::with_capacity(o * i * kp * kp);
        let mut rows = vec![T::zero(); kp * k];
        for slice in push.data().chunks(k * k) {
            // resize along y: rows[y', x] = sum_y wy(y', y) slice[y, x]
            for (yp, taps) in self.axis.taps.iter().enumerate() {
                let dst = &mut rows[yp * k..(yp + 1) * k];
                dst.fill(T::zero());
                for &(y, wy) in taps {
                    let wy = T::from_f64_lossy(wy);
                    for (d, &s) in dst.iter_mut().zip(&slice[y * k..(y + 1) * k]) {
                        *d = *d + wy * s;
                    }
                }
            }
            // resize along x and negate
            for yp in 0..kp {
                let row = &rows[yp * k..(yp + 1) * k];
                for taps in &self.axis.taps {
                    let v = taps
                        .iter()
                        .fold(T::zero(), |acc, &(x, wx)| acc + T::from_f64_lossy(wx) * row[x]);
                    out.push(-v);
                }
            }
        }
        Tensor::new(vec![o, i, kp, kp], out)
    }

    /// Adjoint of [`PullTransform::apply`]: maps a gradient with respect to
    /// the pull kernel to the corresponding gradient on the push kernel.
    pub fn adjoint<T: Scalar>(&self, grad_pull: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.push_size();
        let kp = self.pull_size();
        let (o, i) = self.slices(grad_pull, kp, "derive_pull_adjoint")?;
        let mut out = vec![T::zero(); o * i * k * k];
        let mut rows = vec![T::zero(); kp * k];
        for (slice, dst) in grad_pull.data().chunks(kp * kp).zip(out.chunks_mut(k * k)) {
            // transpose of the x resize
            rows.fill(T::zero());
            for yp in 0..kp {
                let row = &mut rows[yp * k..(yp + 1) * k];
                for (xp, taps) in self.axis.taps.iter().enumerate() {
                    let g = slice[yp * kp + xp];
                    for &(x, wx) in taps {
                        row[x] = row[x] + T::from_f64_lossy(wx) * g;
                    }
                }
            }
            // transpose of the y resize, with the sign flip
            for (yp, taps) in self.axis.taps.iter().enumerate() {
                for &(y, wy) in taps {
                    let wy = T::from_f64_lossy(wy);
                    for x in 0..k {
                        dst[y * k + x] = dst[y * k + x] - wy * rows[yp * k + x];
                    }
                }
            }
        }
        Tensor::new(vec![o, i, k, k], out)
    }
}

/// Derives the pull kernel `-(push resized by h)` from a push kernel `(O, I, k, k)`.
pub fn derive_pull<T: Scalar>(push: &Tensor<T>, upsample: f64) -> Result<Tensor<T>> {
    let (_, _, kh, kw) = push.dims4("derive_pull")?;
    if kh != kw {
        return Err(Error::shape(
            "derive_pull",
            format!("push kernel must be square, got {kh}x{kw}"),
        ));
    }
    if kh % 2 == 0 {
        return Err(Error::domain(
            "derive_pull",
            format!("push kernel size must be odd, got {kh}"),
        ));
    }
    PullTransform::new(kh, upsample)?.apply(push)
}

/// Values saved by [`PushPullLayer::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct PushPullContext<T> {
    pub input: Tensor<T>,
    pub push_pre: Tensor<T>,
    /// Pull pre-activation and the pull kernel that produced it. Absent when alpha is 0.
    pub pull: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct PushPullGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct PushPullLayer<T = f32> {
    config: PushPullConfig,
    transform: PullTransform,
    pub kernel: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Scalar> PushPullLayer<T> {
    /// Kaiming-normal push kernel and zero bias.
    pub fn new<R: Rng + ?Sized>(config: PushPullConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fan_in = config.in_channels * config.kernel_size * config.kernel_size;
        let kernel = Tensor::randn(
            vec![
                config.out_channels,
                config.in_channels,
                config.kernel_size,
                config.kernel_size,
            ],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let bias = config
            .bias
            .then(|| Tensor::zeros(vec![config.out_channels]));
        Self::from_parts(config, kernel, bias)
    }

    pub fn from_parts(config: PushPullConfig, kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = [
            config.out_channels,
            config.in_channels,
            config.kernel_size,
            config.kernel_size,
        ];
        if kernel.shape() != expected {
            return Err(Error::shape(
                "PushPullLayer",
                format!("push kernel shape {:?} vs config {expected:?}", kernel.shape()),
            ));
        }
        match (&bias, config.bias) {
            (Some(b), true) if b.shape() == [config.out_channels] => {}
            (None, false) => {}
            _ => {
                return Err(Error::shape(
                    "PushPullLayer",
                    format!(
                        "bias {:?} inconsistent with config (bias={}, {} outputs)",
                        bias.as_ref().map(|b| b.shape().to_vec()),
                        config.bias,
                        config.out_channels
                    ),
                ))
            }
        }
        let transform = PullTransform::new(config.kernel_size, config.upsample)?;
        Ok(PushPullLayer {
            config,
            transform,
            kernel: Parameter::new(kernel),
            bias: bias.map(Parameter::new),
        })
    }

    pub fn config(&self) -> &PushPullConfig {
        &self.config
    }

    /// The pull kernel for the current push weights.
    pub fn pull_kernel(&self) -> Result<Tensor<T>> {
        self.transform.apply(self.kernel.value())
    }

    pub fn trainable_count(&self) -> usize {
        self.kernel.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    fn padding(size: usize) -> (usize, usize) {
        ((size - 1) / 2, (size - 1) / 2)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, PushPullContext<T>)> {
        let (_, cin, _, _) = input.dims4("pushpull_forward")?;
        if cin != self.config.in_channels {
            return Err(Error::shape(
                "pushpull_forward",
                format!(
                    "input has {cin} channels but the layer expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let stride = (self.config.stride, self.config.stride);
        let push_pre = conv2d(
            input,
            self.kernel.value(),
            self.bias.as_ref().map(|b| b.value()),
            Self::padding(self.config.kernel_size),
            stride,
        )?;
        let push = relu(&push_pre);
        if self.config.alpha == 0.0 {
            return Ok((
                push,
                PushPullContext {
                    input: input.clone(),
                    push_pre,
                    pull: None,
                },
            ));
        }
        let pull_kernel = self.pull_kernel()?;
        let pull_pre = conv2d(
            input,
            &pull_kernel,
            None,
            Self::padding(self.transform.pull_size()),
            stride,
        )?;
        let alpha = T::from_f64_lossy(self.config.alpha);
        let out = push.zip_map(&pull_pre, "pushpull_forward", |p, q| {
            p - alpha * if q > T::zero() { q } else { T::zero() }
        })?;
        Ok((
            out,
            PushPullContext {
                input: input.clone(),
                push_pre,
                pull: Some((pull_pre, pull_kernel)),
            },
        ))
    }

    pub fn backward(&self, grad_out: &Tensor<T>, ctx: &PushPullContext<T>) -> Result<PushPullGrads<T>> {
        let stride = (self.config.stride, self.config.stride);
        let grad_push = relu_backward(grad_out, &ctx.push_pre)?;
        let push = conv2d_backward(
            &grad_push,
            &ctx.input,
            self.kernel.value(),
            Self::padding(self.config.kernel_size),
            stride,
        )?;
        let mut grad_input = push.input;
        let mut grad_kernel = push.kernel;
        if let Some((pull_pre, pull_kernel)) = &ctx.pull {
            let neg_alpha = -T::from_f64_lossy(self.config.alpha);
            let grad_pull = grad_out.zip_map(pull_pre, "pushpull_backward", |g, q| {
                if q > T::zero() {
                    neg_alpha * g
                } else {
                    T::zero()
                }
            })?;
            let pull = conv2d_backward(
                &grad_pull,
                &ctx.input,
                pull_kernel,
                Self::padding(self.transform.pull_size()),
                stride,
            )?;
            grad_input.add_assign(&pull.input)?;
            grad_kernel.add_assign(&self.transform.adjoint(&pull.kernel)?)?;
        }
        Ok(PushPullGrads {
            input: grad_input,
            kernel: grad_kernel,
            bias: self.bias.as_ref().map(|_| push.bias),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::ops::conv2d_backward;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Bilinear resize evaluated pixel by pixel from the interpolation formula.
    fn dense_resize_oracle(slice: &[f64], k: usize, kp: usize) -> Vec<f64> {
        let coord = |j: usize| j as f64 * (k - 1) as f64 / (kp - 1) as f64;
        let mut out = vec![0.0; kp * kp];
        for yp in 0..kp {
            for xp in 0..kp {
                let (sy, sx) = (coord(yp), coord(xp));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(k - 1), (x0 + 1).min(k - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let at = |y: usize, x: usize| slice[y * k + x];
                out[yp * kp + xp] = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                    + (1.0 - fy) * fx * at(y0, x1)
                    + fy * (1.0 - fx) * at(y1, x0)
                    + fy * fx * at(y1, x1);
            }
        }
        out
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn pull_size_rule() {
        assert_eq!(pull_kernel_size(5, 1.0).unwrap(), 5);
        assert_eq!(pull_kernel_size(5, 2.0).unwrap(), 11);
        assert_eq!(pull_kernel_size(5, 1.5).unwrap(), 9);
        assert_eq!(pull_kernel_size(3, 2.0).unwrap(), 7);
        assert_eq!(pull_kernel_size(3, 1.5).unwrap(), 5);
        assert!(pull_kernel_size(5, 0.9).is_err());
        assert!(pull_kernel_size(5, f64::NAN).is_err());
    }

    #[test]
    fn unit_upsampling_negates_exactly() {
        let k = Tensor::<f32>::randn(vec![3, 2, 5, 5], 1.0, &mut rng());
        assert_eq!(derive_pull(&k, 1.0).unwrap(), k.scale(-1.0));
    }

    #[test]
    fn constant_kernel_stays_constant() {
        let k = Tensor::<f64>::full(vec![1, 1, 5, 5], 0.37);
        let pull = derive_pull(&k, 2.0).unwrap();
        assert_eq!(pull.shape(), &[1, 1, 11, 11]);
        assert!(pull.data().iter().all(|&v| (v + 0.37).abs() < 1e-12));
    }

    #[test]
    fn fractional_upsampling_matches_dense_oracle() {
        let k = Tensor::<f64>::randn(vec![2, 3, 5, 5], 1.0, &mut rng());
        let pull = derive_pull(&k, 1.5).unwrap();
        assert_eq!(pull.shape(), &[2, 3, 9, 9]);
        for (slice, got) in k.data().chunks(25).zip(pull.data().chunks(81)) {
            let expected = dense_resize_oracle(slice, 5, 9);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g + e).abs() < 1e-12, "{g} vs -{e}");
            }
        }
    }

    #[test]
    fn corners_map_to_corners() {
        let k = Tensor::<f64>::randn(vec![1, 1, 3, 3], 1.0, &mut rng());
        let pull = derive_pull(&k, 2.0).unwrap();
        let (d, p) = (k.data(), pull.data());
        assert_eq!(p[0], -d[0]);
        assert_eq!(p[6], -d[2]);
        assert_eq!(p[42], -d[6]);
        assert_eq!(p[48], -d[8]);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let k = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        assert!(derive_pull(&k, 2.0).is_err());
        let k = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(derive_pull(&k, 0.5), Err(Error::Domain { .. })));
        assert!(PushPullConfig::new(1, 1, 4).validate().is_err());
        assert!(PushPullConfig::new(1, 1, 3).with_alpha(-0.1).validate().is_err());
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut r = rng();
        for &h in &[1.0, 1.5, 2.0, 2.7] {
            let t = PullTransform::new(5, h).unwrap();
            let kp = t.pull_size();
            let x = Tensor::<f64>::randn(vec![2, 2, 5, 5], 1.0, &mut r);
            let y = Tensor::<f64>::randn(vec![2, 2, kp, kp], 1.0, &mut r);
            let lhs: f64 = t.apply(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(t.adjoint(&y).unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    fn layer(cfg: PushPullConfig, r: &mut ChaCha8Rng) -> PushPullLayer<f64> {
        let mut l = PushPullLayer::new(cfg, r).unwrap();
        if let Some(b) = &mut l.bias {
            b.set_value(Tensor::randn(b.value().shape().to_vec(), 0.5, r)).unwrap();
        }
        l
    }

    #[test]
    fn parameter_count_equals_conv() {
        let mut r = rng();
        for &h in &[1.0, 1.5, 2.0] {
            for &a in &[0.5, 1.0, 1.5] {
                for &bias in &[true, false] {
                    let cfg = PushPullConfig::new(3, 16, 3).with_upsample(h).with_alpha(a).with_bias(bias);
                    let l = PushPullLayer::<f32>::new(cfg, &mut r).unwrap();
                    assert_eq!(l.trainable_count(), 16 * 3 * 9 + if bias { 16 } else { 0 });
                }
            }
        }
    }

    #[test]
    fn zero_alpha_reduces_to_rectified_conv() {
        let mut r = rng();
        let l = layer(PushPullConfig::new(2, 3, 5).with_alpha(0.0), &mut r);
        let x = Tensor::randn(vec![2, 2, 9, 9], 1.0, &mut r);
        let (y, ctx) = l.forward(&x).unwrap();
        let pre = conv2d(&x, l.kernel.value(), l.bias.as_ref().map(|b| b.value()), (2, 2), (1, 1)).unwrap();
        assert_eq!(y, relu(&pre));

        let g = Tensor::randn(y.shape().to_vec(), 1.0, &mut r);
        let grads = l.backward(&g, &ctx).unwrap();
        let plain = conv2d_backward(&relu_backward(&g, &pre).unwrap(), &x, l.kernel.value(), (2, 2), (1, 1)).unwrap();
        assert_eq!(grads.kernel, plain.kernel);
        assert_eq!(grads.input, plain.input);
        assert_eq!(grads.bias.unwrap(), plain.bias);
    }

    #[test]
    fn unit_upsampling_unit_alpha_is_plain_conv() {
        let mut r = rng();
        let l = layer(PushPullConfig::new(1, 2, 3).with_upsample(1.0).with_bias(false), &mut r);
        let x = Tensor::randn(vec![2, 1, 6, 6], 1.0, &mut r);
        let (y, ctx) = l.forward(&x).unwrap();
        assert_eq!(y, conv2d(&x, l.kernel.value(), None, (1, 1), (1, 1)).unwrap());

        let g = Tensor::randn(y.shape().to_vec(), 1.0, &mut r);
        let grads = l.backward(&g, &ctx).unwrap();
        let plain = conv2d_backward(&g, &x, l.kernel.value(), (1, 1), (1, 1)).unwrap();
        assert!(relative_error(&grads.kernel, &plain.kernel) < 1e-14);
        assert!(relative_error(&grads.input, &plain.input) < 1e-14);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut r = rng();
        for &h in &[1.0, 1.5, 2.0] {
            for &a in &[0.0, 0.5, 1.5] {
                let cfg = PushPullConfig::new(1, 4, 5).with_upsample(h).with_alpha(a);
                let l = PushPullLayer::<f32>::new(cfg, &mut r).unwrap();
                let (y, _) = l.forward(&Tensor::zeros(vec![1, 1, 8, 8])).unwrap();
                assert!(y.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn strided_paths_align() {
        let mut r = rng();
        for &h in &[1.0, 1.5, 2.0, 3.0] {
            let cfg = PushPullConfig::new(3, 4, 3).with_upsample(h).with_stride(2);
            let l = PushPullLayer::<f32>::new(cfg, &mut r).unwrap();
            let (y, ctx) = l.forward(&Tensor::randn(vec![1, 3, 9, 8], 1.0, &mut r)).unwrap();
            assert_eq!(y.shape(), &[1, 4, 5, 4]);
            assert_eq!(ctx.pull.unwrap().0.shape(), ctx.push_pre.shape());
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let l = PushPullLayer::<f32>::new(PushPullConfig::new(3, 2, 3), &mut rng()).unwrap();
        assert!(matches!(l.forward(&Tensor::zeros(vec![1, 1, 5, 5])), Err(Error::Shape { .. })));
    }

    #[test]
    fn push_kernel_gradient_matches_finite_differences() {
        let mut r = rng();
        let cfg = PushPullConfig::new(1, 2, 3).with_upsample(2.0).with_alpha(1.0);
        let l = layer(cfg.clone(), &mut r);
        let x = Tensor::randn(vec![2, 1, 7, 7], 1.0, &mut r);
        let (y, ctx) = l.forward(&x).unwrap();
        let probe = Tensor::randn(y.shape().to_vec(), 1.0, &mut r);
        let grads = l.backward(&probe, &ctx).unwrap();
        let bias = l.bias.as_ref().map(|b| b.value().clone());
        let numeric = central_difference(l.kernel.value(), 1e-5, |k| {
            let probe_layer = PushPullLayer::from_parts(cfg.clone(), k.clone(), bias.clone()).unwrap();
            let (y, _) = probe_layer.forward(&x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        });
        assert_eq!(numeric.len(), 18);
        assert!(relative_error(&grads.kernel, &numeric) < 1e-4);
    }

    proptest! {
        #[test]
        fn pull_transform_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, h in 1.0f64..3.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let k1 = Tensor::<f64>::randn(vec![2, 1, 5, 5], 1.0, &mut r);
            let k2 = Tensor::<f64>::randn(vec![2, 1, 5, 5], 1.0, &mut r);
            let combo = k1.scale(a).add(&k2.scale(b)).unwrap();
            let lhs = derive_pull(&combo, h).unwrap();
            let rhs = derive_pull(&k1, h).unwrap().scale(a).add(&derive_pull(&k2, h).unwrap().scale(b)).unwrap();
            let dev = lhs.sub(&rhs).unwrap().max_abs();
            prop_assert!(dev <= 1e-12 * (1.0 + lhs.max_abs()), "deviation {dev}");
        }
    }
}
