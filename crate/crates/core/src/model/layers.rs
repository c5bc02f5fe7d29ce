//! Stateful network layers. Each layer caches what its backward pass needs
//! during a forward call and accumulates parameter gradients on backward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormContext};
use crate::optim::Parameter;
use crate::pushpull::{PushPullConfig, PushPullContext, PushPullLayer};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type NamedParams<'a, T> = Vec<(String, &'a Parameter<T>)>;
pub type NamedParamsMut<'a, T> = Vec<(String, &'a mut Parameter<T>)>;

pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient with respect to the last forward input. Parameter gradients
    /// are added to the layer's parameters.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> NamedParams<'_, T> {
        Vec::new()
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        Vec::new()
    }

    fn kind(&self) -> &'static str;

    /// The push-pull layer inside this layer, if any.
    fn as_pushpull(&self) -> Option<&PushPullLayer<T>> {
        None
    }
}

fn prefixed<'a, P>(prefix: &str, items: Vec<(String, P)>) -> Vec<(String, P)>
where
    P: 'a,
{
    items
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}

fn take<T>(slot: &mut Option<T>, layer: &'static str) -> Result<T> {
    slot.take().ok_or(Error::MissingContext(layer))
}

pub struct Conv2d<T> {
    pub kernel: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    padding: (usize, usize),
    stride: (usize, usize),
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Square kernel with Kaiming-normal weights and an optional zero bias.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Conv2d {
            kernel: Parameter::new(Tensor::randn(
                vec![cout, cin, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                rng,
            )),
            bias: bias.then(|| Parameter::new(Tensor::zeros(vec![cout]))),
            padding: (padding, padding),
            stride: (stride, stride),
            saved: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(
            x,
            self.kernel.value(),
            self.bias.as_ref().map(|b| b.value()),
            self.padding,
            self.stride,
        )?;
        if mode == Mode::Train {
            self.saved = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.saved, "conv2d")?;
        let g = ops::conv2d_backward(grad, &x, self.kernel.value(), self.padding, self.stride)?;
        self.kernel.accumulate(&g.kernel)?;
        if let Some(b) = &mut self.bias {
            b.accumulate(&g.bias)?;
        }
        Ok(g.input)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut v = vec![("kernel".to_string(), &self.kernel)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut v = vec![("kernel".to_string(), &mut self.kernel)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }
}

pub struct PushPull<T> {
    pub layer: PushPullLayer<T>,
    ctx: Option<PushPullContext<T>>,
}

impl<T: Scalar> PushPull<T> {
    pub fn new<R: Rng + ?Sized>(config: PushPullConfig, rng: &mut R) -> Result<Self> {
        Ok(PushPull {
            layer: PushPullLayer::new(config, rng)?,
            ctx: None,
        })
    }
}

impl<T: Scalar> Layer<T> for PushPull<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, ctx) = self.layer.forward(x)?;
        if mode == Mode::Train {
            self.ctx = Some(ctx);
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let ctx = take(&mut self.ctx, "pushpull")?;
        let g = self.layer.backward(grad, &ctx)?;
        self.layer.kernel.accumulate(&g.kernel)?;
        if let (Some(b), Some(gb)) = (&mut self.layer.bias, &g.bias) {
            b.accumulate(gb)?;
        }
        Ok(g.input)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut v = vec![("push_kernel".to_string(), &self.layer.kernel)];
        if let Some(b) = &self.layer.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut v = vec![("push_kernel".to_string(), &mut self.layer.kernel)];
        if let Some(b) = &mut self.layer.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn kind(&self) -> &'static str {
        "pushpull"
    }

    fn as_pushpull(&self) -> Option<&PushPullLayer<T>> {
        Some(&self.layer)
    }
}

#[derive(Default)]
pub struct Relu<T> {
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.saved = Some(x.clone());
        }
        Ok(ops::relu(x))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.saved, "relu")?;
        ops::relu_backward(grad, &x)
    }

    fn kind(&self) -> &'static str {
        "relu"
    }
}

pub struct MaxPool {
    window: (usize, usize),
    stride: (usize, usize),
    saved: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(size: usize) -> Self {
        MaxPool {
            window: (size, size),
            stride: (size, size),
            saved: None,
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = ops::maxpool2d(x, self.window, self.stride)?;
        if mode == Mode::Train {
            self.saved = Some((out.argmax, x.shape().to_vec()));
        }
        Ok(out.output)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (argmax, shape) = take(&mut self.saved, "maxpool2d")?;
        ops::maxpool2d_backward(grad, &argmax, &shape)
    }

    fn kind(&self) -> &'static str {
        "maxpool2d"
    }
}

#[derive(Default)]
pub struct Flatten {
    saved: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for Flatten {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let batch = x.shape()[0];
        let features = x.len() / batch;
        if mode == Mode::Train {
            self.saved = Some(x.shape().to_vec());
        }
        x.clone().reshape(vec![batch, features])
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take(&mut self.saved, "flatten")?;
        grad.clone().reshape(shape)
    }

    fn kind(&self) -> &'static str {
        "flatten"
    }
}

pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Parameter::new(Tensor::uniform(vec![outputs, inputs], bound, rng)),
            bias: Parameter::new(Tensor::zeros(vec![outputs])),
            saved: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::linear(x, self.weight.value(), self.bias.value())?;
        if mode == Mode::Train {
            self.saved = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.saved, "linear")?;
        let g = ops::linear_backward(grad, &x, self.weight.value())?;
        self.weight.accumulate(&g.weight)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }

    fn params(&self) -> NamedParams<'_, T> {
        vec![
            ("weight".to_string(), &self.weight),
            ("bias".to_string(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }

    fn kind(&self) -> &'static str {
        "linear"
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization with running statistics kept as frozen parameters.
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    ctx: Option<BatchNormContext<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::full(vec![channels], T::one())),
            beta: Parameter::new(Tensor::zeros(vec![channels])),
            running_mean: Parameter::frozen(Tensor::zeros(vec![channels])),
            running_var: Parameter::frozen(Tensor::full(vec![channels], T::one())),
            ctx: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => ops::batch_norm_eval(
                x,
                self.gamma.value(),
                self.beta.value(),
                self.running_mean.value(),
                self.running_var.value(),
                BN_EPS,
            ),
            Mode::Train => {
                let (y, ctx) = ops::batch_norm_train(x, self.gamma.value(), self.beta.value(), BN_EPS)?;
                let count = x.len() / ctx.mean.len();
                let keep = T::from_f64_lossy(BN_MOMENTUM);
                let blend = T::one() - keep;
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for (r, &m) in self.running_mean.value_mut().iter_mut().zip(&ctx.mean) {
                    *r = keep * *r + blend * m;
                }
                for (r, &v) in self.running_var.value_mut().iter_mut().zip(&ctx.var) {
                    *r = keep * *r + blend * v * unbias;
                }
                self.ctx = Some(ctx);
                Ok(y)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let ctx = take(&mut self.ctx, "batch_norm")?;
        let g = ops::batch_norm_backward(grad, self.gamma.value(), &ctx)?;
        self.gamma.accumulate(&g.gamma)?;
        self.beta.accumulate(&g.beta)?;
        Ok(g.input)
    }

    fn params(&self) -> NamedParams<'_, T> {
        vec![
            ("gamma".to_string(), &self.gamma),
            ("beta".to_string(), &self.beta),
            ("running_mean".to_string(), &self.running_mean),
            ("running_var".to_string(), &self.running_var),
        ]
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
            ("running_mean".to_string(), &mut self.running_mean),
            ("running_var".to_string(), &mut self.running_var),
        ]
    }

    fn kind(&self) -> &'static str {
        "batch_norm"
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    saved: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.saved = Some(x.shape().to_vec());
        }
        ops::global_avg_pool(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take(&mut self.saved, "global_avg_pool")?;
        ops::global_avg_pool_backward(grad, &shape)
    }

    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }
}

/// Pre-activation residual block: `BN-ReLU-conv3x3-BN-ReLU-conv3x3` plus a
/// shortcut. When the width or stride changes, the shortcut is a 1x1
/// convolution applied to the pre-activated input.
pub struct BasicBlock<T> {
    bn1: BatchNorm<T>,
    relu1: Relu<T>,
    conv1: Conv2d<T>,
    bn2: BatchNorm<T>,
    relu2: Relu<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        BasicBlock {
            bn1: BatchNorm::new(cin),
            relu1: Relu::default(),
            conv1: Conv2d::new(cin, cout, 3, 1, stride, false, rng),
            bn2: BatchNorm::new(cout),
            relu2: Relu::default(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            shortcut: (cin != cout || stride != 1)
                .then(|| Conv2d::new(cin, cout, 1, 0, stride, false, rng)),
        }
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pre = self.relu1.forward(&self.bn1.forward(x, mode)?, mode)?;
        let y = self.conv1.forward(&pre, mode)?;
        let y = self.relu2.forward(&self.bn2.forward(&y, mode)?, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        match &mut self.shortcut {
            Some(sc) => y.add(&sc.forward(&pre, mode)?),
            None => y.add(x),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.conv2.backward(grad)?;
        let g = self.bn2.backward(&self.relu2.backward(&g)?)?;
        let mut g_pre = self.conv1.backward(&g)?;
        if let Some(sc) = &mut self.shortcut {
            g_pre.add_assign(&sc.backward(grad)?)?;
        }
        let mut gx = self.bn1.backward(&self.relu1.backward(&g_pre)?)?;
        if self.shortcut.is_none() {
            gx.add_assign(grad)?;
        }
        Ok(gx)
    }

    fn params(&self) -> NamedParams<'_, T> {
        let mut v = prefixed("bn1", self.bn1.params());
        v.extend(prefixed("conv1", self.conv1.params()));
        v.extend(prefixed("bn2", self.bn2.params()));
        v.extend(prefixed("conv2", self.conv2.params()));
        if let Some(sc) = &self.shortcut {
            v.extend(prefixed("shortcut", sc.params()));
        }
        v
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut v = prefixed("bn1", self.bn1.params_mut());
        v.extend(prefixed("conv1", self.conv1.params_mut()));
        v.extend(prefixed("bn2", self.bn2.params_mut()));
        v.extend(prefixed("conv2", self.conv2.params_mut()));
        if let Some(sc) = &mut self.shortcut {
            v.extend(prefixed("shortcut", sc.params_mut()));
        }
        v
    }

    fn kind(&self) -> &'static str {
        "basic_block"
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut layers = self.layers.iter_mut();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward(x, mode)?;
        for layer in layers {
            y = layer.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> NamedParams<'_, T> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.params_mut()))
            .collect()
    }

    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn as_pushpull(&self) -> Option<&PushPullLayer<T>> {
        self.layers.iter().find_map(|l| l.as_pushpull())
    }
}
