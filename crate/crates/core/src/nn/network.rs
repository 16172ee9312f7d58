//! Layer graph, parameters, and whole-network forward/backward.
//!
//! A network is a straight chain of layers plus any number of
//! `crop_concat` nodes, each of which pulls the output of an earlier layer
//! back in as a skip connection. There is no fully-connected layer type, so
//! every constructible network is fully convolutional.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, ShapeError};
use crate::raster::GrayImage;

use super::layers::*;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Search bound for [`NetworkSpec::min_input_dim`].
const MAX_PROBE_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool,
    /// 2x nearest-neighbour upsampling.
    Upsample,
    /// Concatenates the center-cropped output of layer `source` after the
    /// current activation.
    CropConcat {
        source: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "max_pool",
            LayerSpec::Upsample => "upsample",
            LayerSpec::CropConcat { .. } => "crop_concat",
        }
    }

    fn conv(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            kernel,
            in_channels,
            out_channels,
            stride: 1,
            pad: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::default_fcn()
    }
}

impl NetworkSpec {
    /// Two valid 3x3 convs, a pool, one deeper conv, upsampling, a skip from
    /// the pre-pool features, a fusing 3x3 conv and a 1x1 two-class head.
    pub fn default_fcn() -> Self {
        use LayerSpec::*;
        Self {
            input_channels: 1,
            layers: vec![
                LayerSpec::conv(3, 1, 16),
                BatchNorm { channels: 16 },
                Relu,
                LayerSpec::conv(3, 16, 16),
                BatchNorm { channels: 16 },
                Relu,
                MaxPool,
                LayerSpec::conv(3, 16, 32),
                BatchNorm { channels: 32 },
                Relu,
                Upsample,
                CropConcat { source: 5 },
                LayerSpec::conv(3, 48, 16),
                BatchNorm { channels: 16 },
                Relu,
                LayerSpec::conv(1, 16, 2),
            ],
        }
    }

    /// Output channel count of every layer; checks channel agreement and
    /// skip-source ordering.
    pub fn channel_plan(&self) -> Result<Vec<usize>, NnError> {
        let bad = |i: usize, msg: String| NnError::InvalidNetwork(format!("layer {i}: {msg}"));
        if self.input_channels == 0 {
            return Err(NnError::InvalidNetwork("input_channels must be >= 1".into()));
        }
        let mut plan: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut ch = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            ch = match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    ..
                } => {
                    if in_channels != ch {
                        return Err(bad(i, format!("conv expects {in_channels} channels, receives {ch}")));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(bad(i, "conv kernel, stride and out_channels must be >= 1".into()));
                    }
                    out_channels
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != ch {
                        return Err(bad(i, format!("batch norm over {channels} channels, receives {ch}")));
                    }
                    ch
                }
                LayerSpec::Relu | LayerSpec::MaxPool | LayerSpec::Upsample => ch,
                LayerSpec::CropConcat { source } => {
                    if source >= i {
                        return Err(bad(i, format!("skip source {source} is not an earlier layer")));
                    }
                    ch + plan[source]
                }
            };
            plan.push(ch);
        }
        match self.layers.last() {
            Some(LayerSpec::Conv { out_channels: 2, .. }) => Ok(plan),
            _ => Err(NnError::InvalidNetwork(
                "the last layer must be a conv with 2 output channels (vessel/background)".into(),
            )),
        }
    }

    /// Spatial extent after every layer along one axis, or an error naming
    /// the first layer that does not fit.
    pub fn dim_plan(&self, input: usize) -> Result<Vec<usize>, ShapeError> {
        let mut dims: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut d = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv { kernel, stride, pad, .. } => conv_out_dim(d, kernel, stride, pad),
                LayerSpec::BatchNorm { .. } | LayerSpec::Relu => Some(d),
                LayerSpec::MaxPool => Some(d / 2).filter(|&v| v > 0),
                LayerSpec::Upsample => Some(2 * d),
                LayerSpec::CropConcat { source } => dims.get(source).filter(|&&s| s >= d).map(|_| d),
            };
            d = next.ok_or_else(|| {
                ShapeError::new(format!("input extent {input} collapses at layer {i} ({})", layer.name()))
            })?;
            dims.push(d);
        }
        Ok(dims)
    }

    /// Output extent for an input extent (the axes are independent).
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        self.dim_plan(input).ok().and_then(|p| p.last().copied())
    }

    /// Smallest input extent that produces a non-empty output.
    pub fn min_input_dim(&self) -> Option<usize> {
        (1..=MAX_PROBE_DIM).find(|&s| self.output_dim(s).is_some())
    }

    /// `(height, width)` of the probability map for an input image.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize), ShapeError> {
        let shape_err = |e: ShapeError| {
            ShapeError::new(format!(
                "input {height}x{width} is too small for this network (minimum {}): {}",
                self.min_input_dim().unwrap_or(0),
                e.0
            ))
        };
        let h = self.dim_plan(height).map_err(shape_err)?;
        let w = self.dim_plan(width).map_err(shape_err)?;
        Ok((*h.last().unwrap_or(&height), *w.last().unwrap_or(&width)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode update.
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Conv { weight: Tensor<T>, bias: Vec<T> },
    BatchNorm(BatchNormParams<T>),
    Stateless,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    BatchNorm(BatchNormCache<T>),
    Pool(Vec<usize>),
}

/// Activations kept by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }

    /// `layer_index:name=l2norm` for every layer output.
    pub fn activation_norms(&self, spec: &NetworkSpec) -> String {
        self.outputs
            .iter()
            .zip(&spec.layers)
            .enumerate()
            .map(|(i, (t, l))| format!("{i}:{}={:.4e}", l.name(), t.l2_norm()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parameter gradients, aligned with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<T> {
    Conv { weight: Vec<T>, bias: Vec<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Same order as [`Network::parameters`].
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Conv { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Network<T> {
    /// Fresh network: He-scaled normal conv weights (std `sqrt(2 / fan_in)`),
    /// zero biases, unit gamma and zero beta.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.channel_plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let weight = Tensor::from_fn([out_channels, in_channels, kernel, kernel], |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::of(std * z)
                    });
                    LayerParams::Conv {
                        weight,
                        bias: vec![T::zero(); out_channels],
                    }
                }
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm(BatchNormParams {
                    gamma: vec![T::one(); channels],
                    beta: vec![T::zero(); channels],
                    running_mean: vec![T::zero(); channels],
                    running_var: vec![T::one(); channels],
                    initialized: false,
                }),
                _ => LayerParams::Stateless,
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Assembles a network from explicit parameters (used by checkpoint
    /// loading); shapes are checked against the spec.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<LayerParams<T>>) -> Result<Self, NnError> {
        spec.channel_plan()?;
        if layers.len() != spec.layers.len() {
            return Err(NnError::InvalidNetwork("parameter list length differs from layer list".into()));
        }
        for (i, (s, p)) in spec.layers.iter().zip(&layers).enumerate() {
            let ok = match (s, p) {
                (
                    LayerSpec::Conv {
                        kernel,
                        in_channels,
                        out_channels,
                        ..
                    },
                    LayerParams::Conv { weight, bias },
                ) => weight.shape() == [*out_channels, *in_channels, *kernel, *kernel] && bias.len() == *out_channels,
                (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm(b)) => {
                    [&b.gamma, &b.beta, &b.running_mean, &b.running_var]
                        .iter()
                        .all(|v| v.len() == *channels)
                }
                (_, LayerParams::Stateless) => !matches!(s, LayerSpec::Conv { .. } | LayerSpec::BatchNorm { .. }),
                _ => false,
            };
            if !ok {
                return Err(NnError::InvalidNetwork(format!("parameters of layer {i} do not match its spec")));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    /// Trainable parameters in a fixed order: for each layer, conv weight
    /// then bias, or batch-norm gamma then beta.
    pub fn parameters(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for p in &self.layers {
            match p {
                LayerParams::Conv { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias);
                }
                LayerParams::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for p in &mut self.layers {
            match p {
                LayerParams::Conv { weight, bias } => {
                    out.push(weight.as_mut_slice());
                    out.push(bias);
                }
                LayerParams::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NnError> {
        if input.channels() != self.spec.input_channels {
            return Err(ShapeError::new(format!(
                "network expects {} input channels, got {:?}",
                self.spec.input_channels,
                input.shape()
            ))
            .into());
        }
        self.spec.output_size(input.height(), input.width())?;
        Ok(())
    }

    /// Train-mode forward: batch statistics, running-statistic update, and
    /// everything the backward pass needs.
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<ForwardPass<T>, NnError> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.spec.layers.iter().enumerate() {
            let x = outputs.last().unwrap_or(input);
            let (y, cache) = match (*spec, &mut self.layers[i]) {
                (LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv { weight, bias }) => {
                    (conv2d_forward(x, weight, bias, stride, pad)?, Cache::None)
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => {
                    let (y, c) = batchnorm_forward_train(x, &bn.gamma, &bn.beta)?;
                    update_running(bn, &c);
                    (y, Cache::BatchNorm(c))
                }
                (LayerSpec::Relu, _) => (relu_forward(x), Cache::None),
                (LayerSpec::MaxPool, _) => {
                    let (y, arg) = maxpool2_forward(x)?;
                    (y, Cache::Pool(arg))
                }
                (LayerSpec::Upsample, _) => (upsample2_forward(x), Cache::None),
                (LayerSpec::CropConcat { source }, _) => (crop_concat_forward(x, &outputs[source])?, Cache::None),
                _ => unreachable!("parameters are checked against the spec"),
            };
            outputs.push(y);
            caches.push(cache);
        }
        Ok(ForwardPass {
            input: input.clone(),
            outputs,
            caches,
        })
    }

    /// Inference-mode forward returning logits. Requires every batch-norm
    /// layer to have running statistics.
    pub fn forward_infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.spec.layers.iter().enumerate() {
            let x = outputs.last().unwrap_or(input);
            let y = match (*spec, &self.layers[i]) {
                (LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv { weight, bias }) => {
                    conv2d_forward(x, weight, bias, stride, pad)?
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => {
                    if !bn.initialized {
                        return Err(NnError::UninitializedStatistics { layer: i });
                    }
                    batchnorm_forward_infer(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var)?
                }
                (LayerSpec::Relu, _) => relu_forward(x),
                (LayerSpec::MaxPool, _) => maxpool2_forward(x)?.0,
                (LayerSpec::Upsample, _) => upsample2_forward(x),
                (LayerSpec::CropConcat { source }, _) => crop_concat_forward(x, &outputs[source])?,
                _ => unreachable!("parameters are checked against the spec"),
            };
            outputs.push(y);
        }
        Ok(outputs.pop().unwrap_or_else(|| input.clone()))
    }

    /// Back-propagates `d_logits` through a pass produced by
    /// [`Network::forward_train`] on this network.
    pub fn backward(&self, pass: &ForwardPass<T>, d_logits: &Tensor<T>) -> Result<Gradients<T>, NnError> {
        let n = self.layers.len();
        if pass.outputs.len() != n {
            return Err(NnError::InvalidNetwork("forward pass does not belong to this network".into()));
        }
        let mut grads: Vec<LayerGrad<T>> = vec![LayerGrad::None; n];
        // Extra gradient flowing into layer outputs from skip connections.
        let mut skip_grad: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut d = d_logits.clone();
        for i in (0..n).rev() {
            if let Some(extra) = skip_grad[i].take() {
                for (a, b) in d.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *a += *b;
                }
            }
            let x = if i == 0 { &pass.input } else { &pass.outputs[i - 1] };
            d = match (self.spec.layers[i], &self.layers[i], &pass.caches[i]) {
                (LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv { weight, .. }, _) => {
                    let (dx, dw, db) = conv2d_backward(x, weight, stride, pad, &d)?;
                    grads[i] = LayerGrad::Conv {
                        weight: dw.into_vec(),
                        bias: db,
                    };
                    dx
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn), Cache::BatchNorm(c)) => {
                    let (dx, dg, dbeta) = batchnorm_backward(&d, c, &bn.gamma)?;
                    grads[i] = LayerGrad::BatchNorm { gamma: dg, beta: dbeta };
                    dx
                }
                (LayerSpec::Relu, _, _) => relu_backward(&pass.outputs[i], &d),
                (LayerSpec::MaxPool, _, Cache::Pool(arg)) => maxpool2_backward(x.shape(), arg, &d),
                (LayerSpec::Upsample, _, _) => upsample2_backward(&d),
                (LayerSpec::CropConcat { source }, _, _) => {
                    let (dd, ds) = crop_concat_backward(&d, x.channels(), pass.outputs[source].shape())?;
                    match &mut skip_grad[source] {
                        Some(acc) => {
                            for (a, b) in acc.as_mut_slice().iter_mut().zip(ds.as_slice()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(ds),
                    }
                    dd
                }
                _ => unreachable!("caches are produced by forward_train"),
            };
        }
        Ok(Gradients { layers: grads, input: d })
    }

    /// Per-pixel vessel probability for one grayscale image.
    pub fn predict(&self, image: &GrayImage) -> Result<GrayImage, NnError> {
        let input = Tensor::from_vec(
            [1, 1, image.height(), image.width()],
            image.as_slice().iter().map(|&v| T::of(f64::from(v))).collect(),
        )?;
        let logits = self.forward_infer(&input)?;
        let prob = softmax2_probability(&logits)?;
        Ok(GrayImage::from_vec(
            prob.width(),
            prob.height(),
            prob.as_slice().iter().map(|v| v.f64() as f32).collect(),
        )?)
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Network {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|p| match p {
                    LayerParams::Conv { weight, bias } => LayerParams::Conv {
                        weight: weight.cast(),
                        bias: cv(bias),
                    },
                    LayerParams::BatchNorm(b) => LayerParams::BatchNorm(BatchNormParams {
                        gamma: cv(&b.gamma),
                        beta: cv(&b.beta),
                        running_mean: cv(&b.running_mean),
                        running_var: cv(&b.running_var),
                        initialized: b.initialized,
                    }),
                    LayerParams::Stateless => LayerParams::Stateless,
                })
                .collect(),
        }
    }
}

/// The first update copies the batch statistics; later ones blend with
/// [`BN_MOMENTUM`].
fn update_running<T: Scalar>(bn: &mut BatchNormParams<T>, c: &BatchNormCache<T>) {
    for ch in 0..bn.running_mean.len() {
        let (m, v) = (c.batch_mean[ch], c.batch_var[ch]);
        if bn.initialized {
            bn.running_mean[ch] = T::of(BN_MOMENTUM * bn.running_mean[ch].f64() + (1.0 - BN_MOMENTUM) * m);
            bn.running_var[ch] = T::of(BN_MOMENTUM * bn.running_var[ch].f64() + (1.0 - BN_MOMENTUM) * v);
        } else {
            bn.running_mean[ch] = T::of(m);
            bn.running_var[ch] = T::of(v);
        }
    }
    bn.initialized = true;
}
