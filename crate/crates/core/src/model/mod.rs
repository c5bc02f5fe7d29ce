//! Network descriptions and builders: the LeNet-5 variants and wide residual
//! networks, each with either a convolution or a push-pull first layer.

pub mod layers;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{sgd_step, Parameter, SgdConfig};
use crate::pushpull::{PushPullConfig, PushPullLayer};
use crate::tensor::{Scalar, Tensor};
use layers::{
    BasicBlock, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool, Mode, NamedParams,
    NamedParamsMut, PushPull, Relu, Sequential,
};

pub use layers::Mode as ForwardMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lenet5,
    Wideresnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstLayer {
    Conv,
    Pushpull,
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub first_layer: FirstLayer,
    pub conv1_channels: usize,
    /// LeNet only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv2_channels: Option<usize>,
    /// LeNet only; the last entry is the class count.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fc_widths: Vec<usize>,
    /// Wide ResNet only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Wide ResNet only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen: Option<usize>,
    /// Required when `first_layer` is `pushpull`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pushpull: Option<PushPullConfig>,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
}

pub const LENET_KERNEL: usize = 5;
pub const WRN_KERNEL: usize = 3;
pub const WRN_BASE_WIDTH: usize = 16;

/// The eight LeNet-5 configurations: name, conv1 channels, conv2 channels,
/// fully-connected widths, push-pull first layer.
pub const LENET_TABLE: [(&str, usize, usize, [usize; 3], bool); 8] = [
    ("A", 6, 16, [128, 64, 10], false),
    ("B", 6, 8, [64, 32, 10], false),
    ("C", 4, 16, [128, 64, 10], false),
    ("D", 4, 8, [64, 32, 10], false),
    ("PA", 6, 16, [128, 64, 10], true),
    ("PB", 6, 8, [64, 32, 10], true),
    ("PC", 4, 16, [128, 64, 10], true),
    ("PD", 4, 8, [64, 32, 10], true),
];

impl ModelSpec {
    /// One of the named LeNet-5 variants (`A`..`D`, `PA`..`PD`) for 28x28 grayscale input.
    pub fn lenet(name: &str) -> Result<Self> {
        let &(_, c1, c2, fc, pp) = LENET_TABLE
            .iter()
            .find(|row| row.0.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown LeNet variant {name:?}")))?;
        Ok(ModelSpec {
            family: Family::Lenet5,
            first_layer: if pp { FirstLayer::Pushpull } else { FirstLayer::Conv },
            conv1_channels: c1,
            conv2_channels: Some(c2),
            fc_widths: fc.to_vec(),
            depth: None,
            widen: None,
            pushpull: pp.then(|| PushPullConfig::new(1, c1, LENET_KERNEL)),
            num_classes: 10,
            input_shape: [1, 28, 28],
        })
    }

    /// WRN-`depth`-`widen` for 32x32 RGB input.
    pub fn wideresnet(depth: usize, widen: usize, pushpull: bool, num_classes: usize) -> Self {
        ModelSpec {
            family: Family::Wideresnet,
            first_layer: if pushpull { FirstLayer::Pushpull } else { FirstLayer::Conv },
            conv1_channels: WRN_BASE_WIDTH,
            conv2_channels: None,
            fc_widths: Vec::new(),
            depth: Some(depth),
            widen: Some(widen),
            pushpull: pushpull.then(|| PushPullConfig::new(3, WRN_BASE_WIDTH, WRN_KERNEL).with_bias(false)),
            num_classes,
            input_shape: [3, 32, 32],
        }
    }

    /// Same network with the first layer swapped to `first`, keeping every
    /// other setting. A push-pull layer gets default settings unless one is
    /// already present.
    pub fn with_first_layer(&self, first: FirstLayer) -> Self {
        let mut spec = self.clone();
        spec.first_layer = first;
        match first {
            FirstLayer::Conv => spec.pushpull = None,
            FirstLayer::Pushpull => {
                if spec.pushpull.is_none() {
                    let (k, bias) = match spec.family {
                        Family::Lenet5 => (LENET_KERNEL, true),
                        Family::Wideresnet => (WRN_KERNEL, false),
                    };
                    spec.pushpull = Some(
                        PushPullConfig::new(spec.input_shape[0], spec.conv1_channels, k).with_bias(bias),
                    );
                }
            }
        }
        spec
    }

    /// Push-pull first layer with the given upsampling factor and inhibition strength.
    pub fn with_pushpull(&self, upsample: f64, alpha: f64) -> Self {
        let mut spec = self.with_first_layer(FirstLayer::Pushpull);
        if let Some(pp) = spec.pushpull.take() {
            spec.pushpull = Some(pp.with_upsample(upsample).with_alpha(alpha));
        }
        spec
    }

    /// Short human-readable identifier such as `lenet5-6pp-8-64.32.10` or `WRN-28-1-PP`.
    pub fn id(&self) -> String {
        let pp = self.first_layer == FirstLayer::Pushpull;
        match self.family {
            Family::Lenet5 => {
                let fc: Vec<String> = self.fc_widths.iter().map(|w| w.to_string()).collect();
                format!(
                    "lenet5-{}{}-{}-{}",
                    self.conv1_channels,
                    if pp { "pp" } else { "c" },
                    self.conv2_channels.unwrap_or(0),
                    fc.join(".")
                )
            }
            Family::Wideresnet => format!(
                "WRN-{}-{}{}",
                self.depth.unwrap_or(0),
                self.widen.unwrap_or(0),
                if pp { "-PP" } else { "" }
            ),
        }
    }

    /// Trainable scalar count of the network this spec builds.
    pub fn parameter_count(&self) -> Result<usize> {
        let model: Model<f32> = build(self, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(parameter_count(&model))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.id())));
        if self.num_classes == 0 || self.conv1_channels == 0 {
            return fail("class and channel counts must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        match (self.first_layer, &self.pushpull) {
            (FirstLayer::Conv, Some(_)) => {
                return fail("push-pull settings given for a convolutional first layer".into())
            }
            (FirstLayer::Pushpull, None) => {
                return fail("push-pull first layer requires push-pull settings".into())
            }
            (FirstLayer::Pushpull, Some(pp)) => {
                pp.validate()?;
                if pp.in_channels != self.input_shape[0] || pp.out_channels != self.conv1_channels {
                    return fail(format!(
                        "push-pull channels {}->{} disagree with input channels {} and conv1 channels {}",
                        pp.in_channels, pp.out_channels, self.input_shape[0], self.conv1_channels
                    ));
                }
                let k = match self.family {
                    Family::Lenet5 => LENET_KERNEL,
                    Family::Wideresnet => WRN_KERNEL,
                };
                if pp.kernel_size != k || pp.stride != 1 {
                    return fail(format!(
                        "push-pull first layer must use a {k}x{k} kernel with stride 1"
                    ));
                }
            }
            (FirstLayer::Conv, None) => {}
        }
        match self.family {
            Family::Lenet5 => {
                if self.depth.is_some() || self.widen.is_some() {
                    return fail("depth/widen apply to wide residual networks only".into());
                }
                if !matches!(self.conv2_channels, Some(c) if c > 0) {
                    return fail("LeNet requires a positive conv2 channel count".into());
                }
                if self.fc_widths.last() != Some(&self.num_classes) {
                    return fail(format!(
                        "fc widths {:?} must end in the class count {}",
                        self.fc_widths, self.num_classes
                    ));
                }
                if self.fc_widths.contains(&0) {
                    return fail("fc widths must be positive".into());
                }
                lenet_feature_side(self.input_shape[1])?;
                lenet_feature_side(self.input_shape[2])?;
            }
            Family::Wideresnet => {
                if self.conv2_channels.is_some() || !self.fc_widths.is_empty() {
                    return fail("conv2/fc widths apply to LeNet only".into());
                }
                let depth = self.depth.unwrap_or(0);
                if depth < 10 || !(depth - 4).is_multiple_of(6) {
                    return fail(format!(
                        "depth {depth} violates (depth - 4) divisible by 6 with at least one block per group"
                    ));
                }
                if self.widen.unwrap_or(0) == 0 {
                    return fail("widen factor must be positive".into());
                }
                if self.conv1_channels != WRN_BASE_WIDTH {
                    return fail(format!("first layer must have {WRN_BASE_WIDTH} channels"));
                }
            }
        }
        Ok(())
    }
}

/// Spatial side after same-padded conv, pool 2, valid 5x5 conv, pool 2.
fn lenet_feature_side(side: usize) -> Result<usize> {
    let after_pool = side / 2;
    if after_pool < LENET_KERNEL + 1 {
        return Err(Error::Config(format!(
            "input side {side} too small for the LeNet feature extractor"
        )));
    }
    Ok((after_pool - LENET_KERNEL).div_ceil(2))
}

/// A built network ready for training or inference.
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    net: Sequential<T>,
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("id", &self.spec.id())
            .field("layers", &self.net.layers().iter().map(|l| l.kind()).collect::<Vec<_>>())
            .finish()
    }
}

fn first_layer<T: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    kernel: usize,
    bias: bool,
    rng: &mut R,
    net: &mut Sequential<T>,
) -> Result<()> {
    match (&spec.first_layer, &spec.pushpull) {
        (FirstLayer::Pushpull, Some(cfg)) => net.push(PushPull::new(cfg.clone(), rng)?),
        _ => net.push(Conv2d::new(
            spec.input_shape[0],
            spec.conv1_channels,
            kernel,
            (kernel - 1) / 2,
            1,
            bias,
            rng,
        )),
    }
    Ok(())
}

/// first layer (5x5, same padding) -> [relu] -> maxpool 2 -> conv 5x5 -> relu
/// -> maxpool 2 -> flatten -> fc chain with relu between layers.
///
/// A push-pull first layer is already rectified, so no relu follows it.
pub fn build_lenet<T: Scalar, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    if spec.family != Family::Lenet5 {
        return Err(Error::Config(format!("{} is not a LeNet spec", spec.id())));
    }
    spec.validate()?;
    let conv2 = spec.conv2_channels.unwrap_or_default();
    let mut net = Sequential::default();
    first_layer(spec, LENET_KERNEL, true, rng, &mut net)?;
    if spec.first_layer == FirstLayer::Conv {
        net.push(Relu::default());
    }
    net.push(MaxPool::new(2));
    net.push(Conv2d::new(spec.conv1_channels, conv2, LENET_KERNEL, 0, 1, true, rng));
    net.push(Relu::default());
    net.push(MaxPool::new(2));
    net.push(Flatten::default());
    let mut width = conv2 * lenet_feature_side(spec.input_shape[1])? * lenet_feature_side(spec.input_shape[2])?;
    for (i, &out) in spec.fc_widths.iter().enumerate() {
        if i > 0 {
            net.push(Relu::default());
        }
        net.push(Linear::new(width, out, rng));
        width = out;
    }
    Ok(Model {
        spec: spec.clone(),
        net,
    })
}

/// First layer (3x3, 16 channels) -> three groups of (depth-4)/6 pre-activation
/// basic blocks at widths 16W, 32W, 64W (stride 2 entering groups 2 and 3)
/// -> BN -> relu -> global average pool -> fc.
pub fn build_wideresnet<T: Scalar, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    if spec.family != Family::Wideresnet {
        return Err(Error::Config(format!("{} is not a wide residual network spec", spec.id())));
    }
    spec.validate()?;
    let blocks = (spec.depth.unwrap_or_default() - 4) / 6;
    let widen = spec.widen.unwrap_or_default();
    let mut net = Sequential::default();
    first_layer(spec, WRN_KERNEL, false, rng, &mut net)?;
    let mut width = WRN_BASE_WIDTH;
    for (group, mult) in [1usize, 2, 4].into_iter().enumerate() {
        let out = WRN_BASE_WIDTH * mult * widen;
        for b in 0..blocks {
            let stride = if group > 0 && b == 0 { 2 } else { 1 };
            net.push(BasicBlock::new(width, out, stride, rng));
            width = out;
        }
    }
    net.push(BatchNorm::new(width));
    net.push(Relu::default());
    net.push(GlobalAvgPool::default());
    net.push(Linear::new(width, spec.num_classes, rng));
    Ok(Model {
        spec: spec.clone(),
        net,
    })
}

pub fn build<T: Scalar, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    match spec.family {
        Family::Lenet5 => build_lenet(spec, rng),
        Family::Wideresnet => build_wideresnet(spec, rng),
    }
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4("model forward")?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::shape(
                "model forward",
                format!(
                    "input item shape {:?} does not match model input {:?}",
                    [c, h, w],
                    self.spec.input_shape
                ),
            ));
        }
        self.net.forward(x, mode)
    }

    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(grad_logits)
    }

    /// All parameters (trainable and frozen buffers) with stable names.
    pub fn params(&self) -> NamedParams<'_, T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> NamedParamsMut<'_, T> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|(_, p)| p.zero_grad());
    }

    pub fn sgd_step(&mut self, config: &SgdConfig, epoch: usize) {
        let mut params: Vec<&mut Parameter<T>> = self.params_mut().into_iter().map(|(_, p)| p).collect();
        sgd_step(&mut params, config, epoch);
    }

    /// The push-pull first layer, when present.
    pub fn pushpull(&self) -> Option<&PushPullLayer<T>> {
        self.net.as_pushpull()
    }

    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.net.layers().iter().map(|l| l.kind()).collect()
    }
}

/// Sum of trainable scalar counts.
pub fn parameter_count<T: Scalar>(model: &Model<T>) -> usize {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn table_rows_match_configurations() {
        let a = ModelSpec::lenet("A").unwrap();
        assert_eq!((a.conv1_channels, a.conv2_channels), (6, Some(16)));
        assert_eq!(a.fc_widths, vec![128, 64, 10]);
        assert_eq!(a.first_layer, FirstLayer::Conv);

        let pb = ModelSpec::lenet("PB").unwrap();
        assert_eq!((pb.conv1_channels, pb.conv2_channels), (6, Some(8)));
        assert_eq!(pb.fc_widths, vec![64, 32, 10]);
        assert_eq!(pb.first_layer, FirstLayer::Pushpull);
        let pp = pb.pushpull.as_ref().unwrap();
        assert_eq!((pp.alpha, pp.upsample), (1.0, 2.0));
        assert!(ModelSpec::lenet("E").is_err());
    }

    #[test]
    fn lenet_pairs_have_equal_counts_and_shapes() {
        for pair in [("A", "PA"), ("B", "PB"), ("C", "PC"), ("D", "PD")] {
            let mut conv: Model<f32> = build_lenet(&ModelSpec::lenet(pair.0).unwrap(), &mut rng()).unwrap();
            let mut pp: Model<f32> = build_lenet(&ModelSpec::lenet(pair.1).unwrap(), &mut rng()).unwrap();
            assert_eq!(parameter_count(&conv), parameter_count(&pp), "{pair:?}");
            let x = Tensor::zeros(vec![1, 1, 28, 28]);
            let yc = conv.forward(&x, Mode::Eval).unwrap();
            let yp = pp.forward(&x, Mode::Eval).unwrap();
            assert_eq!(yc.shape(), &[1, 10]);
            assert_eq!(yp.shape(), &[1, 10]);
            assert!(yc.all_finite() && yp.all_finite());
        }
    }

    #[test]
    fn lenet_a_parameter_count() {
        // conv1 6*1*25+6, conv2 16*6*25+16, fc 400*128+128, 128*64+64, 64*10+10
        let expected = 156 + 2416 + 51328 + 8256 + 650;
        let m: Model<f32> = build_lenet(&ModelSpec::lenet("A").unwrap(), &mut rng()).unwrap();
        assert_eq!(parameter_count(&m), expected);
    }

    #[test]
    fn pushpull_lenet_has_no_relu_after_first_layer() {
        let m: Model<f32> = build_lenet(&ModelSpec::lenet("PA").unwrap(), &mut rng()).unwrap();
        assert_eq!(&m.layer_kinds()[..3], &["pushpull", "maxpool2d", "conv2d"]);
        let m: Model<f32> = build_lenet(&ModelSpec::lenet("A").unwrap(), &mut rng()).unwrap();
        assert_eq!(&m.layer_kinds()[..3], &["conv2d", "relu", "maxpool2d"]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = ModelSpec::lenet("A").unwrap();
        s.fc_widths = vec![128, 64, 9];
        assert!(build_lenet::<f32, _>(&s, &mut rng()).unwrap_err().to_string().contains("class count"));

        let err = build_wideresnet::<f32, _>(&ModelSpec::wideresnet(17, 1, false, 10), &mut rng()).unwrap_err();
        assert!(err.to_string().contains("divisible by 6"), "{err}");

        assert!(build_wideresnet::<f32, _>(&ModelSpec::lenet("A").unwrap(), &mut rng()).is_err());

        let mut s = ModelSpec::lenet("PA").unwrap();
        s.pushpull.as_mut().unwrap().out_channels = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrn_16_2_pair_parity_and_forward() {
        let mut conv: Model<f32> = build_wideresnet(&ModelSpec::wideresnet(16, 2, false, 10), &mut rng()).unwrap();
        let mut pp: Model<f32> = build_wideresnet(&ModelSpec::wideresnet(16, 2, true, 10), &mut rng()).unwrap();
        assert_eq!(parameter_count(&conv), parameter_count(&pp));
        let x = Tensor::zeros(vec![2, 3, 32, 32]);
        assert_eq!(conv.forward(&x, Mode::Eval).unwrap().shape(), &[2, 10]);
        assert_eq!(pp.forward(&x, Mode::Eval).unwrap().shape(), &[2, 10]);
    }

    #[test]
    fn wrn_28_10_count_is_near_reported_value() {
        let m: Model<f32> = build_wideresnet(&ModelSpec::wideresnet(28, 10, false, 10), &mut rng()).unwrap();
        let n = parameter_count(&m) as f64;
        assert!((n / 36.4e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ModelSpec::lenet("PC").unwrap().with_pushpull(1.5, 0.5);
        let text = toml::to_string(&spec).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let mut m: Model<f32> = build_lenet(&ModelSpec::lenet("A").unwrap(), &mut rng()).unwrap();
        assert!(m.forward(&Tensor::zeros(vec![1, 3, 32, 32]), Mode::Eval).is_err());
    }
}
