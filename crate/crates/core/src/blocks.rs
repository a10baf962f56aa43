//! Composite building blocks: conv+bn units, depthwise-separable convolution,
//! the inverted residual, the attention fusion block and the transposed-conv
//! upsampling unit.
//!
//! Blocks are static descriptors. Their tensors live in a [`ParamStore`] under
//! the block's name prefix; forward passes read them through a [`ForwardCtx`].

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{LayerKind, LayerNode};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{BatchStats, BnMode, ConvSpec, Element, Shape, Tensor, BN_EPS};

/// Everything a block needs during one forward pass.
pub struct ForwardCtx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: BnMode,
    /// Batch statistics gathered in train mode, keyed by batchnorm prefix.
    pub bn_updates: Vec<(String, BatchStats<T>)>,
    /// Graph variables used in place of stored tensors of the same name.
    bound: HashMap<String, Var<T>>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, mode: BnMode) -> Self {
        Self {
            graph,
            params,
            mode,
            bn_updates: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// Route parameter lookups for `name` to an existing variable, so
    /// gradients flow to it (used when differentiating blocks w.r.t. their
    /// parameters).
    pub fn bind(&mut self, name: impl Into<String>, var: Var<T>) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let t = self.params.tensor(name)?.clone();
        Ok(self.graph.param(name, t))
    }

    pub fn batchnorm(&mut self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self
                    .graph
                    .batchnorm_train(x, &gamma, &beta, BN_EPS)
                    .map_err(|e| e.in_layer(prefix))?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            BnMode::Eval => {
                let mean = self.params.tensor(&format!("{prefix}.running_mean"))?.clone();
                let var = self.params.tensor(&format!("{prefix}.running_var"))?.clone();
                self.graph
                    .batchnorm_eval(x, &gamma, &beta, &mean, &var, BN_EPS)
                    .map_err(|e| e.in_layer(prefix))
            }
        }
    }
}

/// Fan-out scaled Gaussian: `std = sqrt(2 / (out_channels·k·k))`.
pub fn kaiming_normal<T: Element>(shape: Shape, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_out.max(1) as f64).sqrt(), rng)
}

fn init_bn<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    let shape = [c, 1, 1, 1];
    store.insert_param(format!("{prefix}.gamma"), Tensor::ones(shape));
    store.insert_param(format!("{prefix}.beta"), Tensor::zeros(shape));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(shape));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(shape));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu6,
    Linear,
}

/// Bias-free convolution → batchnorm → optional ReLU6.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub name: String,
    pub spec: ConvSpec,
    pub act: Activation,
}

impl ConvBn {
    pub fn new(name: impl Into<String>, spec: ConvSpec, act: Activation) -> Self {
        Self {
            name: name.into(),
            spec,
            act,
        }
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_out = self.spec.out_channels * self.spec.kernel * self.spec.kernel;
        store.insert_param(
            format!("{}.weight", self.name),
            kaiming_normal(self.spec.weight_shape(), fan_out, rng),
        );
        init_bn(store, &format!("{}.bn", self.name), self.spec.out_channels);
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let y = cx
            .graph
            .conv2d(x, &w, None, &self.spec)
            .map_err(|e| e.in_layer(&self.name))?;
        let y = cx.batchnorm(&format!("{}.bn", self.name), &y)?;
        Ok(match self.act {
            Activation::Relu6 => cx.graph.relu6(&y),
            Activation::Linear => y,
        })
    }

    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        let out = self.spec.output_shape(input)?;
        let mut v = vec![
            LayerNode::new(
                format!("{}.conv", self.name),
                LayerKind::Conv { spec: self.spec },
                input,
                out,
            ),
            LayerNode::new(
                format!("{}.bn", self.name),
                LayerKind::BatchNorm {
                    channels: self.spec.out_channels,
                },
                out,
                out,
            ),
        ];
        if self.act == Activation::Relu6 {
            v.push(LayerNode::new(
                format!("{}.relu6", self.name),
                LayerKind::Activation {
                    function: "relu6".into(),
                },
                out,
                out,
            ));
        }
        Ok(v)
    }
}

/// Depthwise `k×k` (stride `s`) → bn → relu6 → pointwise → bn → relu6.
#[derive(Clone, Debug, PartialEq)]
pub struct DsConv {
    pub name: String,
    pub depthwise: ConvBn,
    pub pointwise: ConvBn,
}

impl DsConv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let name = name.into();
        Self {
            depthwise: ConvBn::new(
                format!("{name}.dw"),
                ConvSpec::depthwise(in_ch, kernel, stride),
                Activation::Relu6,
            ),
            pointwise: ConvBn::new(
                format!("{name}.pw"),
                ConvSpec::pointwise(in_ch, out_ch),
                Activation::Relu6,
            ),
            name,
        }
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.depthwise.init(store, rng);
        self.pointwise.init(store, rng);
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.depthwise.forward(cx, x)?;
        self.pointwise.forward(cx, &y)
    }

    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        let mut v = self.depthwise.layers(input)?;
        let mid = v[0].output;
        v.extend(self.pointwise.layers(mid)?);
        Ok(v)
    }
}

/// MobileNetV2 inverted residual: expand (1×1, relu6) → depthwise (3×3,
/// stride s, relu6) → project (1×1, linear), with an identity skip when the
/// stride is 1 and channels are preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub expand_ratio: usize,
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize, expand_ratio: usize) -> Self {
        let name = name.into();
        let hidden = in_ch * expand_ratio;
        Self {
            expand: (expand_ratio != 1).then(|| {
                ConvBn::new(
                    format!("{name}.expand"),
                    ConvSpec::pointwise(in_ch, hidden),
                    Activation::Relu6,
                )
            }),
            depthwise: ConvBn::new(
                format!("{name}.dw"),
                ConvSpec::depthwise(hidden, 3, stride),
                Activation::Relu6,
            ),
            project: ConvBn::new(
                format!("{name}.project"),
                ConvSpec::pointwise(hidden, out_ch),
                Activation::Linear,
            ),
            residual: stride == 1 && in_ch == out_ch,
            name,
            in_ch,
            out_ch,
            stride,
            expand_ratio,
        }
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        if let Some(e) = &self.expand {
            e.init(store, rng);
        }
        self.depthwise.init(store, rng);
        self.project.init(store, rng);
    }

    /// The residual branch alone, without the skip connection.
    pub fn branch<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = match &self.expand {
            Some(e) => e.forward(cx, x)?,
            None => x.clone(),
        };
        let h = self.depthwise.forward(cx, &h)?;
        self.project.forward(cx, &h)
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.branch(cx, x)?;
        if !self.residual {
            return Ok(y);
        }
        if y.shape() != x.shape() {
            return Err(Error::shape(format!("{} residual", self.name), x.shape(), y.shape()));
        }
        cx.graph.add(&y, x)
    }

    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        let mut v = Vec::new();
        let mut shape = input;
        for unit in self.expand.iter().chain([&self.depthwise, &self.project]) {
            let l = unit.layers(shape)?;
            shape = l[0].output;
            v.extend(l);
        }
        if self.residual {
            v.push(LayerNode::new(
                format!("{}.add", self.name),
                LayerKind::Add,
                shape,
                shape,
            ));
        }
        Ok(v)
    }
}

/// Attention fusion block. Each input passes through its own channel gate
///
/// `A = sigmoid(Wβ · relu(Wα · gap(x) + bα) + bβ)`, `x̂ = A ⊗ x`,
///
/// and the two gated features are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct Afb {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
}

pub const AFB_BRANCHES: [&str; 2] = ["low", "high"];

impl Afb {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "attention reduction {reduction} must divide channel count {channels}"
            )));
        }
        Ok(Self {
            name: name.into(),
            channels,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    fn squeeze_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.hidden()).with_bias(true)
    }

    fn excite_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.hidden(), self.channels).with_bias(true)
    }

    /// Trainable elements of one branch: `2·c·c/r + c/r + c`.
    pub fn branch_param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        2 * c * h + h + c
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let (c, h) = (self.channels, self.hidden());
        for branch in AFB_BRANCHES {
            let p = format!("{}.{branch}", self.name);
            store.insert_param(format!("{p}.fc1.weight"), kaiming_normal([h, c, 1, 1], h, rng));
            store.insert_param(format!("{p}.fc1.bias"), Tensor::zeros([h, 1, 1, 1]));
            store.insert_param(format!("{p}.fc2.weight"), kaiming_normal([c, h, 1, 1], c, rng));
            store.insert_param(format!("{p}.fc2.bias"), Tensor::zeros([c, 1, 1, 1]));
        }
    }

    /// Channel attention coefficients `[n, c, 1, 1]` of one branch.
    pub fn attention<T: Element>(&self, cx: &mut ForwardCtx<T>, branch: &str, x: &Var<T>) -> Result<Var<T>> {
        let p = format!("{}.{branch}", self.name);
        let w1 = cx.param(&format!("{p}.fc1.weight"))?;
        let b1 = cx.param(&format!("{p}.fc1.bias"))?;
        let w2 = cx.param(&format!("{p}.fc2.weight"))?;
        let b2 = cx.param(&format!("{p}.fc2.bias"))?;
        let pooled = cx.graph.global_avg_pool(x)?;
        let z = cx
            .graph
            .conv2d(&pooled, &w1, Some(&b1), &self.squeeze_spec())
            .map_err(|e| e.in_layer(&p))?;
        let z = cx.graph.relu(&z);
        let a = cx
            .graph
            .conv2d(&z, &w2, Some(&b2), &self.excite_spec())
            .map_err(|e| e.in_layer(&p))?;
        Ok(cx.graph.sigmoid(&a))
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, low: &Var<T>, high: &Var<T>) -> Result<Var<T>> {
        if low.shape() != high.shape() {
            return Err(Error::shape(
                format!("{} (low vs high)", self.name),
                low.shape(),
                high.shape(),
            ));
        }
        if low.shape()[1] != self.channels {
            return Err(Error::shape(
                &self.name,
                format!("[*, {}, *, *]", self.channels),
                low.shape(),
            ));
        }
        let a_low = self.attention(cx, "low", low)?;
        let low_hat = cx.graph.broadcast_mul_channels(low, &a_low)?;
        let a_high = self.attention(cx, "high", high)?;
        let high_hat = cx.graph.broadcast_mul_channels(high, &a_high)?;
        cx.graph.add(&low_hat, &high_hat)
    }

    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        let [n, c, _, _] = input;
        let pooled = [n, c, 1, 1];
        let hidden = [n, self.hidden(), 1, 1];
        let mut v = Vec::new();
        for branch in AFB_BRANCHES {
            let p = format!("{}.{branch}", self.name);
            v.push(LayerNode::new(
                format!("{p}.gap"),
                LayerKind::GlobalAvgPool,
                input,
                pooled,
            ));
            v.push(
                LayerNode::new(
                    format!("{p}.fc1"),
                    LayerKind::Conv {
                        spec: self.squeeze_spec(),
                    },
                    pooled,
                    hidden,
                )
                .pooled(),
            );
            v.push(
                LayerNode::new(
                    format!("{p}.fc2"),
                    LayerKind::Conv {
                        spec: self.excite_spec(),
                    },
                    hidden,
                    pooled,
                )
                .pooled(),
            );
            v.push(LayerNode::new(
                format!("{p}.scale"),
                LayerKind::BroadcastMul,
                input,
                input,
            ));
        }
        v.push(LayerNode::new(
            format!("{}.add", self.name),
            LayerKind::Add,
            input,
            input,
        ));
        Ok(v)
    }
}

/// Transposed convolution (exact 2× spatial doubling) → bn → relu6.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleBlock {
    pub name: String,
    pub spec: ConvSpec,
}

impl UpsampleBlock {
    /// `kernel` must be even; padding `(kernel − 2)/2` makes the output exactly twice the input.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel < 2 || !kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "upsample kernel must be even and >= 2, got {kernel}"
            )));
        }
        Ok(Self {
            name: name.into(),
            spec: ConvSpec::new(in_ch, out_ch, kernel, 2, (kernel - 2) / 2),
        })
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_out = self.spec.out_channels * self.spec.kernel * self.spec.kernel;
        store.insert_param(
            format!("{}.weight", self.name),
            kaiming_normal(self.spec.transposed_weight_shape(), fan_out, rng),
        );
        init_bn(store, &format!("{}.bn", self.name), self.spec.out_channels);
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let y = cx
            .graph
            .transposed_conv2d(x, &w, &self.spec)
            .map_err(|e| e.in_layer(&self.name))?;
        let y = cx.batchnorm(&format!("{}.bn", self.name), &y)?;
        Ok(cx.graph.relu6(&y))
    }

    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        let out = self.spec.transposed_output_shape(input)?;
        let c = self.spec.out_channels;
        Ok(vec![
            LayerNode::new(
                format!("{}.tconv", self.name),
                LayerKind::TransposedConv { spec: self.spec },
                input,
                out,
            ),
            LayerNode::new(
                format!("{}.bn", self.name),
                LayerKind::BatchNorm { channels: c },
                out,
                out,
            ),
            LayerNode::new(
                format!("{}.relu6", self.name),
                LayerKind::Activation {
                    function: "relu6".into(),
                },
                out,
                out,
            ),
        ])
    }
}
