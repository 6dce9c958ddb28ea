//! Model configuration, parameter initialization, and the training-capable
//! network built from it.
//!
//! A model is a straight chain of layers ending in a single fully connected
//! classifier. Initialization draws every parameter tensor from its own
//! seeded stream keyed by (model seed, layer index, role), so two
//! architectures that share a layer position draw identical values for it
//! regardless of what other parameters exist. A learnable-grouping model and
//! its dense counterpart therefore start from the same weights.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flgc::{AssignMode, FlgcCache, FlgcLayer, GroupingMode, WeightGradMode};
use crate::ops;
use crate::ops::BnCache;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_name() -> String {
    "model".into()
}

fn default_seed() -> u64 {
    1
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerConfig {
    Conv {
        #[serde(rename = "in")]
        in_channels: usize,
        #[serde(rename = "out")]
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    DwConv {
        channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        pad: usize,
    },
    Flgc {
        #[serde(rename = "in")]
        in_channels: usize,
        #[serde(rename = "out")]
        out_channels: usize,
        groups: usize,
        #[serde(default)]
        grouping: GroupingMode,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Non-overlapping average pooling; `window: null` (or omitted) pools
    /// globally, collapsing the spatial dims entirely.
    AvgPool {
        #[serde(default)]
        window: Option<usize>,
    },
    Fc {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
    },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Input shape per sample: [channels, height, width].
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub layers: Vec<LayerConfig>,
}

/// Shape of one activation as it flows through the chain: spatial while
/// rank 4, flat after global pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat { features: usize },
}

impl FeatureShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            FeatureShape::Spatial { channels, height, width } => channels * height * width,
            FeatureShape::Flat { features } => features,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Walks the chain and returns the shape after every layer, verifying
    /// channel chaining, pooling divisibility, group bounds, and that the
    /// single fully connected layer sits at the end and emits `classes`
    /// logits.
    pub fn feature_shapes(&self) -> Result<Vec<FeatureShape>> {
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero dim", self.input)));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut cur = FeatureShape::Spatial { channels: c0, height: h0, width: w0 };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |msg: String| Error::Config(format!("layer {i}: {msg}"));
            if matches!(shapes.last(), Some(FeatureShape::Flat { .. }) if !matches!(layer, LayerConfig::Fc { .. }))
            {
                return Err(at("only a fully connected layer may follow global pooling".into()));
            }
            cur = match *layer {
                LayerConfig::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    let FeatureShape::Spatial { channels, height, width } = cur else {
                        return Err(at("conv needs spatial input".into()));
                    };
                    if channels != in_channels {
                        return Err(at(format!("conv wants {in_channels} channels, gets {channels}")));
                    }
                    FeatureShape::Spatial {
                        channels: out_channels,
                        height: ops::conv_out_dim(height, kernel, stride, pad)
                            .map_err(|e| at(e.to_string()))?,
                        width: ops::conv_out_dim(width, kernel, stride, pad)
                            .map_err(|e| at(e.to_string()))?,
                    }
                }
                LayerConfig::DwConv { channels: want, kernel, stride, pad } => {
                    let FeatureShape::Spatial { channels, height, width } = cur else {
                        return Err(at("dwconv needs spatial input".into()));
                    };
                    if channels != want {
                        return Err(at(format!("dwconv wants {want} channels, gets {channels}")));
                    }
                    FeatureShape::Spatial {
                        channels,
                        height: ops::conv_out_dim(height, kernel, stride, pad)
                            .map_err(|e| at(e.to_string()))?,
                        width: ops::conv_out_dim(width, kernel, stride, pad)
                            .map_err(|e| at(e.to_string()))?,
                    }
                }
                LayerConfig::Flgc { in_channels, out_channels, groups, grouping } => {
                    let FeatureShape::Spatial { channels, height, width } = cur else {
                        return Err(at("flgc needs spatial input".into()));
                    };
                    if channels != in_channels {
                        return Err(at(format!("flgc wants {in_channels} channels, gets {channels}")));
                    }
                    if groups == 0 || groups > in_channels.min(out_channels) {
                        return Err(at(format!(
                            "groups must satisfy 1 <= {groups} <= min({in_channels}, {out_channels})"
                        )));
                    }
                    if grouping == GroupingMode::Fixed
                        && (in_channels % groups != 0 || out_channels % groups != 0)
                    {
                        return Err(at(format!(
                            "fixed grouping needs {groups} to divide {in_channels} and {out_channels}"
                        )));
                    }
                    FeatureShape::Spatial { channels: out_channels, height, width }
                }
                LayerConfig::BatchNorm { channels: want } => {
                    let FeatureShape::Spatial { channels, .. } = cur else {
                        return Err(at("batchnorm needs spatial input".into()));
                    };
                    if channels != want {
                        return Err(at(format!("batchnorm wants {want} channels, gets {channels}")));
                    }
                    cur
                }
                LayerConfig::Relu => cur,
                LayerConfig::AvgPool { window } => {
                    let FeatureShape::Spatial { channels, height, width } = cur else {
                        return Err(at("avgpool needs spatial input".into()));
                    };
                    match window {
                        Some(w) => {
                            if w == 0 || height % w != 0 || width % w != 0 {
                                return Err(at(format!(
                                    "window {w} does not tile {height}x{width}"
                                )));
                            }
                            FeatureShape::Spatial {
                                channels,
                                height: height / w,
                                width: width / w,
                            }
                        }
                        None => FeatureShape::Flat { features: channels },
                    }
                }
                LayerConfig::Fc { in_features, out_features } => {
                    if i + 1 != self.layers.len() {
                        return Err(at("the fully connected layer must be terminal".into()));
                    }
                    let got = cur.flat_len();
                    if got != in_features {
                        return Err(at(format!("fc wants {in_features} features, gets {got}")));
                    }
                    if out_features != self.classes {
                        return Err(at(format!(
                            "fc emits {out_features} logits for {} classes",
                            self.classes
                        )));
                    }
                    FeatureShape::Flat { features: out_features }
                }
            };
            shapes.push(cur);
        }
        if !matches!(self.layers.last(), Some(LayerConfig::Fc { .. })) {
            return Err(Error::Config("model must end in a fully connected layer".into()));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_shapes().map(|_| ())
    }

    /// The dense counterpart: every learnable-grouping layer becomes an
    /// ordinary 1x1 convolution at the same position, so it initializes with
    /// identical weights.
    pub fn densified(&self) -> ModelConfig {
        let mut cfg = self.clone();
        cfg.name = format!("{}-dense", self.name);
        for layer in &mut cfg.layers {
            if let LayerConfig::Flgc { in_channels, out_channels, .. } = *layer {
                *layer = LayerConfig::Conv {
                    in_channels,
                    out_channels,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                };
            }
        }
        cfg
    }

    /// Same architecture with every grouped layer switched to the fixed
    /// balanced partition (the standard group convolution baseline).
    pub fn with_fixed_grouping(&self) -> ModelConfig {
        let mut cfg = self.clone();
        cfg.name = format!("{}-sgc", self.name);
        for layer in &mut cfg.layers {
            if let LayerConfig::Flgc { grouping, .. } = layer {
                *grouping = GroupingMode::Fixed;
            }
        }
        cfg
    }
}

/// Small reference architecture on 28x28 single-channel images:
/// conv3x3(1->16) and two grouped 1x1 stages (16->32, 32->64) with
/// batchnorm/relu, pooling between stages, global pooling, and a 10-way
/// classifier.
pub fn mini_cnn(groups: usize, grouping: GroupingMode, seed: u64) -> ModelConfig {
    ModelConfig {
        name: format!("mini-cnn-g{groups}"),
        input: [1, 28, 28],
        classes: 10,
        seed,
        layers: vec![
            LayerConfig::Conv { in_channels: 1, out_channels: 16, kernel: 3, stride: 1, pad: 1 },
            LayerConfig::BatchNorm { channels: 16 },
            LayerConfig::Relu,
            LayerConfig::Flgc { in_channels: 16, out_channels: 32, groups, grouping },
            LayerConfig::BatchNorm { channels: 32 },
            LayerConfig::Relu,
            LayerConfig::AvgPool { window: Some(2) },
            LayerConfig::Flgc { in_channels: 32, out_channels: 64, groups, grouping },
            LayerConfig::BatchNorm { channels: 64 },
            LayerConfig::Relu,
            LayerConfig::AvgPool { window: None },
            LayerConfig::Fc { in_features: 64, out_features: 10 },
        ],
    }
}

/// [`mini_cnn`] with a depthwise 3x3 in front of each grouped 1x1 stage,
/// the depthwise-separable arrangement grouped convolutions are usually
/// deployed in.
pub fn mini_dsc(groups: usize, grouping: GroupingMode, seed: u64) -> ModelConfig {
    ModelConfig {
        name: format!("mini-dsc-g{groups}"),
        input: [1, 28, 28],
        classes: 10,
        seed,
        layers: vec![
            LayerConfig::Conv { in_channels: 1, out_channels: 16, kernel: 3, stride: 1, pad: 1 },
            LayerConfig::BatchNorm { channels: 16 },
            LayerConfig::Relu,
            LayerConfig::DwConv { channels: 16, kernel: 3, stride: 1, pad: 1 },
            LayerConfig::Flgc { in_channels: 16, out_channels: 32, groups, grouping },
            LayerConfig::BatchNorm { channels: 32 },
            LayerConfig::Relu,
            LayerConfig::AvgPool { window: Some(2) },
            LayerConfig::DwConv { channels: 32, kernel: 3, stride: 1, pad: 1 },
            LayerConfig::Flgc { in_channels: 32, out_channels: 64, groups, grouping },
            LayerConfig::BatchNorm { channels: 64 },
            LayerConfig::Relu,
            LayerConfig::AvgPool { window: None },
            LayerConfig::Fc { in_features: 64, out_features: 10 },
        ],
    }
}

/// Randomized but always-valid architecture: one to three stages mixing
/// convolution kinds, batchnorm only directly after a weighted layer,
/// optional activation and pooling, global pooling, and a classifier.
/// Grouped layers draw any group count up to min(in, out), so empty groups
/// occur. Drives fuzz-style equivalence and cost checks.
pub fn random_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX - 1, 0));
    let side = *[6usize, 8, 12].choose(&mut rng).expect("nonempty");
    let c0 = rng.random_range(1..=6usize);
    let classes = rng.random_range(2..=9usize);

    let mut layers = Vec::new();
    let mut c = c0;
    let mut h = side;
    for _ in 0..rng.random_range(1..=3usize) {
        match rng.random_range(0..3u32) {
            0 => {
                let kernel = *[1usize, 3].choose(&mut rng).expect("nonempty");
                let out_channels = rng.random_range(2..=16usize);
                layers.push(LayerConfig::Conv {
                    in_channels: c,
                    out_channels,
                    kernel,
                    stride: 1,
                    pad: kernel / 2,
                });
                c = out_channels;
            }
            1 => layers.push(LayerConfig::DwConv { channels: c, kernel: 3, stride: 1, pad: 1 }),
            _ => {
                let out_channels = rng.random_range(2..=16usize);
                let groups = rng.random_range(1..=c.min(out_channels));
                layers.push(LayerConfig::Flgc {
                    in_channels: c,
                    out_channels,
                    groups,
                    grouping: GroupingMode::Learned,
                });
                c = out_channels;
            }
        }
        if rng.random_bool(0.5) {
            layers.push(LayerConfig::BatchNorm { channels: c });
        }
        if rng.random_bool(0.5) {
            layers.push(LayerConfig::Relu);
        }
        if h % 2 == 0 && h >= 4 && rng.random_bool(0.5) {
            layers.push(LayerConfig::AvgPool { window: Some(2) });
            h /= 2;
        }
    }
    layers.push(LayerConfig::AvgPool { window: None });
    layers.push(LayerConfig::Fc { in_features: c, out_features: classes });

    let cfg = ModelConfig {
        name: format!("random-{seed}"),
        input: [c0, side, side],
        classes,
        seed,
        layers,
    };
    cfg.validate().expect("generated chain is valid by construction");
    cfg
}

/// Roles of the per-layer parameter streams. Streams are keyed by
/// (seed, layer index, role); adding parameters never shifts another
/// tensor's draws.
#[derive(Debug, Clone, Copy)]
pub enum InitRole {
    Weight = 0,
    SMeta = 1,
    TMeta = 2,
}

/// Deterministic stream seed for one parameter tensor (splitmix64-style
/// finalizer over the combined words).
pub fn stream_seed(seed: u64, layer: u64, role: u64) -> u64 {
    let mut z = seed
        .wrapping_add(layer.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(role.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn param_rng(seed: u64, layer: usize, role: InitRole) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, layer as u64, role as u64))
}

/// Draws in f64 and casts, so f32 and f64 builds of the same config hold the
/// same values up to the cast.
fn draw_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0f64, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

fn msra_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub struct ConvLayer<T> {
    pub w: Tensor<T>,
    pub b: Vec<T>,
    pub stride: usize,
    pub pad: usize,
    pub gw: Tensor<T>,
    pub gb: Vec<T>,
}

pub struct DwConvLayer<T> {
    pub w: Tensor<T>,
    pub b: Vec<T>,
    pub stride: usize,
    pub pad: usize,
    pub gw: Tensor<T>,
    pub gb: Vec<T>,
}

pub struct FlgcHost<T> {
    pub layer: FlgcLayer<T>,
    pub gw: Tensor<T>,
    pub gb: Vec<T>,
    pub gs: Tensor<T>,
    pub gt: Tensor<T>,
}

pub struct BnLayer<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub ggamma: Vec<T>,
    pub gbeta: Vec<T>,
}

pub struct FcLayer<T> {
    /// [out_features, in_features]
    pub w: Tensor<T>,
    pub b: Vec<T>,
    pub gw: Tensor<T>,
    pub gb: Vec<T>,
}

pub enum Layer<T> {
    Conv(ConvLayer<T>),
    DwConv(DwConvLayer<T>),
    Flgc(FlgcHost<T>),
    BatchNorm(BnLayer<T>),
    Relu,
    AvgPool { window: Option<usize> },
    Fc(FcLayer<T>),
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::DwConv(_) => "dwconv",
            Layer::Flgc(_) => "flgc",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Fc(_) => "fc",
        }
    }
}

/// Per-layer state captured by a training forward pass.
pub enum LayerState<T> {
    None,
    Bn(BnCache<T>),
    Flgc(FlgcCache<T>),
}

/// Everything backward needs: the input each layer saw, plus per-layer
/// internal state.
pub struct Tape<T> {
    pub inputs: Vec<Tensor<T>>,
    pub states: Vec<LayerState<T>>,
}

/// A parameter tensor paired with its gradient, as visited by the optimizer.
/// `decay: false` marks tensors exempt from weight decay (assignment scores,
/// batchnorm scale/shift); `meta: true` marks the assignment scores, which
/// may follow their own learning rate.
pub struct ParamMut<'a, T> {
    pub value: &'a mut [T],
    pub grad: &'a [T],
    pub decay: bool,
    pub meta: bool,
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
    /// Optimizer steps applied so far; checkpoints carry it.
    pub step: u64,
    /// Weight gradient convention for grouped layers.
    pub weight_grad_mode: WeightGradMode,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Weights are msra-initialized
    /// (zero-mean normal, std sqrt(2 / fan_in)); assignment scores are
    /// standard normal; biases start at zero, batchnorm at scale 1, shift 0,
    /// running mean 0, running variance 1.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, lc) in config.layers.iter().enumerate() {
            let layer = match *lc {
                LayerConfig::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    let mut rng = param_rng(seed, i, InitRole::Weight);
                    let shape = [out_channels, in_channels, kernel, kernel];
                    let w = draw_normal(&shape, msra_std(in_channels * kernel * kernel), &mut rng);
                    Layer::Conv(ConvLayer {
                        gw: Tensor::zeros(&shape),
                        w,
                        b: vec![T::zero(); out_channels],
                        gb: vec![T::zero(); out_channels],
                        stride,
                        pad,
                    })
                }
                LayerConfig::DwConv { channels, kernel, stride, pad } => {
                    let mut rng = param_rng(seed, i, InitRole::Weight);
                    let shape = [channels, 1, kernel, kernel];
                    let w = draw_normal(&shape, msra_std(kernel * kernel), &mut rng);
                    Layer::DwConv(DwConvLayer {
                        gw: Tensor::zeros(&shape),
                        w,
                        b: vec![T::zero(); channels],
                        gb: vec![T::zero(); channels],
                        stride,
                        pad,
                    })
                }
                LayerConfig::Flgc { in_channels, out_channels, groups, grouping } => {
                    let mut wrng = param_rng(seed, i, InitRole::Weight);
                    // Masking leaves each filter in_channels / groups inputs,
                    // so that is the fan-in that sets the init scale. With
                    // one group this is the dense fan-in and the draw matches
                    // the dense counterpart bitwise.
                    let w = draw_normal(
                        &[out_channels, in_channels],
                        msra_std(in_channels / groups),
                        &mut wrng,
                    );
                    let mut srng = param_rng(seed, i, InitRole::SMeta);
                    let s_meta = draw_normal(&[in_channels, groups], 1.0, &mut srng);
                    let mut trng = param_rng(seed, i, InitRole::TMeta);
                    let t_meta = draw_normal(&[out_channels, groups], 1.0, &mut trng);
                    let layer = FlgcLayer::new(
                        in_channels,
                        out_channels,
                        groups,
                        grouping,
                        w,
                        vec![T::zero(); out_channels],
                        s_meta,
                        t_meta,
                    )?;
                    Layer::Flgc(FlgcHost {
                        gw: Tensor::zeros(&[out_channels, in_channels]),
                        gb: vec![T::zero(); out_channels],
                        gs: Tensor::zeros(&[in_channels, groups]),
                        gt: Tensor::zeros(&[out_channels, groups]),
                        layer,
                    })
                }
                LayerConfig::BatchNorm { channels } => Layer::BatchNorm(BnLayer {
                    gamma: vec![T::one(); channels],
                    beta: vec![T::zero(); channels],
                    running_mean: vec![T::zero(); channels],
                    running_var: vec![T::one(); channels],
                    ggamma: vec![T::zero(); channels],
                    gbeta: vec![T::zero(); channels],
                }),
                LayerConfig::Relu => Layer::Relu,
                LayerConfig::AvgPool { window } => Layer::AvgPool { window },
                LayerConfig::Fc { in_features, out_features } => {
                    let mut rng = param_rng(seed, i, InitRole::Weight);
                    let w = draw_normal(&[out_features, in_features], msra_std(in_features), &mut rng);
                    Layer::Fc(FcLayer {
                        gw: Tensor::zeros(&[out_features, in_features]),
                        w,
                        b: vec![T::zero(); out_features],
                        gb: vec![T::zero(); out_features],
                    })
                }
            };
            layers.push(layer);
        }
        Ok(Model { config: config.clone(), layers, step: 0, weight_grad_mode: WeightGradMode::default() })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let [ec, eh, ew] = self.config.input;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} for model expecting [{ec}, {eh}, {ew}] per sample",
                x.shape()
            )));
        }
        Ok(())
    }

    fn fc_forward(fc: &FcLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x2 = if x.shape().len() == 2 {
            x.clone()
        } else {
            let (b, c, h, w) = x.dims4()?;
            x.clone().reshaped(&[b, c * h * w])?
        };
        let mut out = ops::matmul(&x2, &fc.w.transposed2()?)?;
        let (b, o) = out.dims2()?;
        let od = out.data_mut();
        for bi in 0..b {
            for oi in 0..o {
                od[bi * o + oi] += fc.b[oi];
            }
        }
        Ok(out)
    }

    /// Training forward: batch statistics for batchnorm (running stats are
    /// updated in place), hard assignments recomputed from the current meta
    /// scores, and a tape recording what backward needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut states = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            inputs.push(cur.clone());
            let (next, state) = match layer {
                Layer::Conv(l) => {
                    (ops::conv2d(&cur, &l.w, Some(&l.b), l.stride, l.pad)?, LayerState::None)
                }
                Layer::DwConv(l) => (
                    ops::depthwise_conv2d(&cur, &l.w, Some(&l.b), l.stride, l.pad)?,
                    LayerState::None,
                ),
                Layer::Flgc(h) => {
                    let (y, cache) = h.layer.forward(&cur, AssignMode::Hard)?;
                    (y, LayerState::Flgc(cache))
                }
                Layer::BatchNorm(l) => {
                    let (y, cache) = ops::batchnorm_train(
                        &cur,
                        &l.gamma,
                        &l.beta,
                        &mut l.running_mean,
                        &mut l.running_var,
                    )?;
                    (y, LayerState::Bn(cache))
                }
                Layer::Relu => (ops::relu(&cur), LayerState::None),
                Layer::AvgPool { window } => match window {
                    Some(w) => (ops::avg_pool(&cur, *w)?, LayerState::None),
                    None => (ops::global_avg_pool(&cur)?, LayerState::None),
                },
                Layer::Fc(l) => (Self::fc_forward(l, &cur)?, LayerState::None),
            };
            states.push(state);
            cur = next;
        }
        Ok((cur, Tape { inputs, states }))
    }

    /// Eval forward: frozen statistics, hard assignments, no mutation. Safe
    /// to call concurrently.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(l) => ops::conv2d(&cur, &l.w, Some(&l.b), l.stride, l.pad)?,
                Layer::DwConv(l) => {
                    ops::depthwise_conv2d(&cur, &l.w, Some(&l.b), l.stride, l.pad)?
                }
                Layer::Flgc(h) => h.layer.forward_eval(&cur)?,
                Layer::BatchNorm(l) => {
                    ops::batchnorm_eval(&cur, &l.gamma, &l.beta, &l.running_mean, &l.running_var)?
                }
                Layer::Relu => ops::relu(&cur),
                Layer::AvgPool { window } => match window {
                    Some(w) => ops::avg_pool(&cur, *w)?,
                    None => ops::global_avg_pool(&cur)?,
                },
                Layer::Fc(l) => Self::fc_forward(l, &cur)?,
            };
        }
        Ok(cur)
    }

    /// Backward from the logit gradient; fills each layer's gradient buffers
    /// (assignment, not accumulation). The input gradient is not propagated
    /// past the first layer.
    pub fn backward(&mut self, tape: &Tape<T>, dlogits: &Tensor<T>) -> Result<()> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Config("tape does not match model depth".into()));
        }
        let mut grad = dlogits.clone();
        let wmode = self.weight_grad_mode;
        for i in (0..self.layers.len()).rev() {
            let x = &tape.inputs[i];
            let need_dx = i > 0;
            grad = match &mut self.layers[i] {
                Layer::Conv(l) => {
                    let grads = ops::conv2d_backward(x, &l.w, l.stride, l.pad, &grad, need_dx)?;
                    l.gw = grads.dw;
                    l.gb = grads.db;
                    grads.dx.unwrap_or_else(|| Tensor::zeros(x.shape()))
                }
                Layer::DwConv(l) => {
                    let grads =
                        ops::depthwise_conv2d_backward(x, &l.w, l.stride, l.pad, &grad, need_dx)?;
                    l.gw = grads.dw;
                    l.gb = grads.db;
                    grads.dx.unwrap_or_else(|| Tensor::zeros(x.shape()))
                }
                Layer::Flgc(h) => {
                    let LayerState::Flgc(cache) = &tape.states[i] else {
                        return Err(Error::Config("tape state mismatch at flgc layer".into()));
                    };
                    let grads = h.layer.backward(x, cache, &grad, wmode, need_dx)?;
                    h.gw = grads.weight;
                    h.gb = grads.bias;
                    h.gs = grads.s_meta;
                    h.gt = grads.t_meta;
                    grads.dx.unwrap_or_else(|| Tensor::zeros(x.shape()))
                }
                Layer::BatchNorm(l) => {
                    let LayerState::Bn(cache) = &tape.states[i] else {
                        return Err(Error::Config("tape state mismatch at batchnorm layer".into()));
                    };
                    let grads = ops::batchnorm_backward(x, &l.gamma, cache, &grad)?;
                    l.ggamma = grads.dgamma;
                    l.gbeta = grads.dbeta;
                    grads.dx
                }
                Layer::Relu => ops::relu_backward(x, &grad)?,
                Layer::AvgPool { window } => match window {
                    Some(w) => ops::avg_pool_backward(x.shape(), *w, &grad)?,
                    None => ops::global_avg_pool_backward(x.shape(), &grad)?,
                },
                Layer::Fc(l) => {
                    let x2 = if x.shape().len() == 2 {
                        x.clone()
                    } else {
                        let (b, c, h, w) = x.dims4()?;
                        x.clone().reshaped(&[b, c * h * w])?
                    };
                    // logits = x2 . w^T + b
                    l.gw = ops::matmul(&grad.transposed2()?, &x2)?;
                    let (bsz, o) = grad.dims2()?;
                    let gd = grad.data();
                    let mut db = vec![T::zero(); o];
                    for bi in 0..bsz {
                        for (oi, dbv) in db.iter_mut().enumerate() {
                            *dbv += gd[bi * o + oi];
                        }
                    }
                    l.gb = db;
                    if need_dx {
                        ops::matmul(&grad, &l.w)?.reshaped(x.shape())?
                    } else {
                        Tensor::zeros(x.shape())
                    }
                }
            };
        }
        Ok(())
    }

    /// Visits every trainable parameter with its gradient, in a fixed order
    /// (layer order; within a layer: weight, bias, then assignment scores or
    /// scale/shift). Running statistics are not parameters.
    pub fn visit_params(&mut self, mut f: impl FnMut(ParamMut<'_, T>)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(l) => {
                    f(ParamMut { value: l.w.data_mut(), grad: l.gw.data(), decay: true, meta: false });
                    f(ParamMut { value: &mut l.b, grad: &l.gb, decay: true, meta: false });
                }
                Layer::DwConv(l) => {
                    f(ParamMut { value: l.w.data_mut(), grad: l.gw.data(), decay: true, meta: false });
                    f(ParamMut { value: &mut l.b, grad: &l.gb, decay: true, meta: false });
                }
                Layer::Flgc(h) => {
                    f(ParamMut { value: h.layer.weight.data_mut(), grad: h.gw.data(), decay: true, meta: false });
                    f(ParamMut { value: &mut h.layer.bias, grad: &h.gb, decay: true, meta: false });
                    f(ParamMut { value: h.layer.s_meta.data_mut(), grad: h.gs.data(), decay: false, meta: true });
                    f(ParamMut { value: h.layer.t_meta.data_mut(), grad: h.gt.data(), decay: false, meta: true });
                }
                Layer::BatchNorm(l) => {
                    f(ParamMut { value: &mut l.gamma, grad: &l.ggamma, decay: false, meta: false });
                    f(ParamMut { value: &mut l.beta, grad: &l.gbeta, decay: false, meta: false });
                }
                Layer::Relu | Layer::AvgPool { .. } => {}
                Layer::Fc(l) => {
                    f(ParamMut { value: l.w.data_mut(), grad: l.gw.data(), decay: true, meta: false });
                    f(ParamMut { value: &mut l.b, grad: &l.gb, decay: true, meta: false });
                }
            }
        }
    }

    /// Hard group assignments of every grouped layer, in layer order.
    pub fn hard_assignments(&self) -> Result<Vec<crate::flgc::HardAssignment>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Flgc(h) => Some(h.layer.hard_assignment()),
                _ => None,
            })
            .collect()
    }

    /// Freezes the current hard assignments into plain 1x1 convolutions with
    /// masked weights. The result contains no grouping structure; it is the
    /// reference semantics a compiled plan must reproduce.
    pub fn to_masked_dense(&self) -> Result<Model<T>> {
        let mut config = self.config.densified();
        config.name = format!("{}-masked", self.config.name);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                Layer::Conv(l) => Layer::Conv(ConvLayer {
                    w: l.w.clone(),
                    b: l.b.clone(),
                    stride: l.stride,
                    pad: l.pad,
                    gw: Tensor::zeros(l.w.shape()),
                    gb: vec![T::zero(); l.b.len()],
                }),
                Layer::DwConv(l) => Layer::DwConv(DwConvLayer {
                    w: l.w.clone(),
                    b: l.b.clone(),
                    stride: l.stride,
                    pad: l.pad,
                    gw: Tensor::zeros(l.w.shape()),
                    gb: vec![T::zero(); l.b.len()],
                }),
                Layer::Flgc(h) => {
                    let hard = h.layer.hard_assignment()?;
                    let mask = hard.mask::<T>();
                    let eff = h.layer.weight.zip_map(&mask, |w, m| w * m)?;
                    let n = h.layer.out_channels;
                    let c = h.layer.in_channels;
                    Layer::Conv(ConvLayer {
                        w: eff.reshaped(&[n, c, 1, 1])?,
                        b: h.layer.bias.clone(),
                        stride: 1,
                        pad: 0,
                        gw: Tensor::zeros(&[n, c, 1, 1]),
                        gb: vec![T::zero(); n],
                    })
                }
                Layer::BatchNorm(l) => Layer::BatchNorm(BnLayer {
                    gamma: l.gamma.clone(),
                    beta: l.beta.clone(),
                    running_mean: l.running_mean.clone(),
                    running_var: l.running_var.clone(),
                    ggamma: vec![T::zero(); l.gamma.len()],
                    gbeta: vec![T::zero(); l.beta.len()],
                }),
                Layer::Relu => Layer::Relu,
                Layer::AvgPool { window } => Layer::AvgPool { window: *window },
                Layer::Fc(l) => Layer::Fc(FcLayer {
                    w: l.w.clone(),
                    b: l.b.clone(),
                    gw: Tensor::zeros(l.w.shape()),
                    gb: vec![T::zero(); l.b.len()],
                }),
            });
        }
        Ok(Model { config, layers, step: self.step, weight_grad_mode: self.weight_grad_mode })
    }
}

/// Multiply-add cost of one forward pass per sample, and the parameter count,
/// for a single layer. Grouped layers count only their active connections;
/// assignment scores and running statistics are excluded from parameters;
/// normalization, activation, and pooling cost no multiply-adds.
pub fn layer_costs<T: Scalar>(model: &Model<T>) -> Result<Vec<(String, u64, u64)>> {
    let shapes = model.config.feature_shapes()?;
    let mut out = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let cur = shapes[i];
        let (madds, params): (u64, u64) = match layer {
            Layer::Conv(l) => {
                let (n, c, kh, kw) = l.w.dims4()?;
                let FeatureShape::Spatial { height, width, .. } = cur else { unreachable!() };
                (
                    (n * c * kh * kw * height * width) as u64,
                    (n * c * kh * kw + n) as u64,
                )
            }
            Layer::DwConv(l) => {
                let (c, _, kh, kw) = l.w.dims4()?;
                let FeatureShape::Spatial { height, width, .. } = cur else { unreachable!() };
                ((c * kh * kw * height * width) as u64, (c * kh * kw + c) as u64)
            }
            Layer::Flgc(h) => {
                let FeatureShape::Spatial { height, width, .. } = cur else { unreachable!() };
                let active = h.layer.hard_assignment()?.active_connections();
                (
                    active * (height * width) as u64,
                    active + h.layer.out_channels as u64,
                )
            }
            Layer::BatchNorm(l) => (0, 2 * l.gamma.len() as u64),
            Layer::Relu | Layer::AvgPool { .. } => (0, 0),
            Layer::Fc(l) => {
                let (o, f) = l.w.dims2()?;
                ((o * f) as u64, (o * f + o) as u64)
            }
        };
        out.push((layer.kind().to_string(), madds, params));
    }
    Ok(out)
}
