//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] records every operation applied to tracked [`Var`]s. Values are
//! reference counted, so a non-recording graph frees intermediates as soon as
//! the caller drops them.

mod gradcheck;
mod suite;

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::loss::{focal_loss_backward, focal_loss_forward, FocalConfig, LabelMap};
use crate::tensor::{self, BatchStats, ConvSpec, Element, Shape, Tensor};

pub use gradcheck::{grad_check, grad_check_op, grad_check_sampled, GradCheck, KINK_MARGIN};
pub use suite::{gradient_suite, SuiteEntry, SUITE_STEP, SUITE_TOLERANCE};

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var<T: Element = f32> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

enum Op<T: Element> {
    Leaf {
        name: Option<String>,
    },
    Conv2d {
        x: Var<T>,
        w: Var<T>,
        b: Option<Var<T>>,
        spec: ConvSpec,
    },
    TransposedConv2d {
        x: Var<T>,
        w: Var<T>,
        spec: ConvSpec,
    },
    GlobalAvgPool {
        x: Var<T>,
    },
    Relu {
        x: Var<T>,
    },
    Relu6 {
        x: Var<T>,
    },
    Sigmoid {
        x: Var<T>,
        y: Arc<Tensor<T>>,
    },
    Softmax {
        x: Var<T>,
        y: Arc<Tensor<T>>,
    },
    BatchNormTrain {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var<T>,
        b: Var<T>,
    },
    BroadcastMul {
        x: Var<T>,
        a: Var<T>,
    },
    Bilinear {
        x: Var<T>,
        factor: usize,
    },
    Sum {
        x: Var<T>,
    },
    WeightedSum {
        x: Var<T>,
        weights: Arc<Tensor<T>>,
    },
    FocalLoss {
        logits: Var<T>,
        target: Arc<LabelMap>,
        cfg: FocalConfig,
    },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b.as_ref());
                v
            }
            Op::TransposedConv2d { x, w, .. } => vec![x, w],
            Op::GlobalAvgPool { x }
            | Op::Relu { x }
            | Op::Relu6 { x }
            | Op::Sigmoid { x, .. }
            | Op::Softmax { x, .. }
            | Op::Bilinear { x, .. }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![x],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Add { a, b } => vec![a, b],
            Op::BroadcastMul { x, a } => vec![x, a],
            Op::FocalLoss { logits, .. } => vec![logits],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Relu { .. } => "relu",
            Op::Relu6 { .. } => "relu6",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::BatchNormTrain { .. } => "batchnorm(train)",
            Op::BatchNormEval { .. } => "batchnorm(eval)",
            Op::Add { .. } => "add",
            Op::BroadcastMul { .. } => "broadcast_mul_channels",
            Op::Bilinear { .. } => "bilinear_upsample",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::FocalLoss { .. } => "focal_loss",
        }
    }
}

/// One recorded operation: what it was, what it consumed (with any saved
/// activations), and the shape it produced.
struct TapeNode<T: Element> {
    op: Op<T>,
    shape: Shape,
}

/// Recording context for one forward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<TapeNode<T>>,
    recording: bool,
    track_kinks: bool,
    kink_margin: f64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            track_kinks: false,
            kink_margin: f64::INFINITY,
        }
    }

    /// A graph that records nothing; every result is an untracked constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record the smallest distance of any ReLU/ReLU6 input to a kink.
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
        self.kink_margin = f64::INFINITY;
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn leaf_node(&mut self, name: Option<String>, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value };
        }
        self.nodes.push(TapeNode {
            op: Op::Leaf { name },
            shape: value.shape(),
        });
        Var {
            id: Some(self.nodes.len() - 1),
            value,
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf_node(None, Arc::new(value))
    }

    /// A named trainable parameter; its gradient appears in [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: Arc<Tensor<T>>) -> Var<T> {
        self.leaf_node(Some(name.to_string()), value)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let value = Arc::new(value);
        if !self.recording || !op.inputs().iter().any(|v| v.is_tracked()) {
            return Var { id: None, value };
        }
        self.nodes.push(TapeNode {
            op,
            shape: value.shape(),
        });
        Var {
            id: Some(self.nodes.len() - 1),
            value,
        }
    }

    fn note_kinks(&mut self, x: &Tensor<T>, kinks: &[f64]) {
        if !self.track_kinks {
            return;
        }
        for &v in x.data() {
            let v = v.as_f64();
            for &k in kinks {
                self.kink_margin = self.kink_margin.min((v - k).abs());
            }
        }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: &ConvSpec) -> Result<Var<T>> {
        let y = tensor::conv2d(x.value(), w.value(), b.map(|b| b.value()), spec)?;
        Ok(self.push(
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
                spec: *spec,
            },
            y,
        ))
    }

    pub fn transposed_conv2d(&mut self, x: &Var<T>, w: &Var<T>, spec: &ConvSpec) -> Result<Var<T>> {
        let y = tensor::transposed_conv2d(x.value(), w.value(), spec)?;
        Ok(self.push(
            Op::TransposedConv2d {
                x: x.clone(),
                w: w.clone(),
                spec: *spec,
            },
            y,
        ))
    }

    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = tensor::global_avg_pool(x.value())?;
        Ok(self.push(Op::GlobalAvgPool { x: x.clone() }, y))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.note_kinks(x.value(), &[0.0]);
        let y = tensor::relu(x.value());
        self.push(Op::Relu { x: x.clone() }, y)
    }

    pub fn relu6(&mut self, x: &Var<T>) -> Var<T> {
        self.note_kinks(x.value(), &[0.0, 6.0]);
        let y = tensor::relu6(x.value());
        self.push(Op::Relu6 { x: x.clone() }, y)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        let y = Arc::new(tensor::sigmoid(x.value()));
        self.push(
            Op::Sigmoid {
                x: x.clone(),
                y: y.clone(),
            },
            (*y).clone(),
        )
    }

    pub fn softmax_channels(&mut self, x: &Var<T>) -> Var<T> {
        let y = Arc::new(tensor::softmax_channels(x.value()));
        self.push(
            Op::Softmax {
                x: x.clone(),
                y: y.clone(),
            },
            (*y).clone(),
        )
    }

    /// Train-mode batchnorm. Returns the output and the batch statistics so
    /// the caller can fold them into running averages.
    pub fn batchnorm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, BatchStats<T>)> {
        let (y, stats) = tensor::batchnorm_train(x.value(), gamma.value(), beta.value(), eps)?;
        let summary = BatchStats {
            x_hat: Tensor::zeros([0, 0, 0, 0]),
            ..stats.clone()
        };
        let out = self.push(
            Op::BatchNormTrain {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                stats,
            },
            y,
        );
        Ok((out, summary))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let y = tensor::batchnorm_eval(x.value(), gamma.value(), beta.value(), running_mean, running_var, eps)?;
        let eps_t = T::from_f64(eps);
        let inv_std = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        Ok(self.push(
            Op::BatchNormEval {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: running_mean.data().to_vec(),
                inv_std,
            },
            y,
        ))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = tensor::add(a.value(), b.value())?;
        Ok(self.push(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            y,
        ))
    }

    pub fn broadcast_mul_channels(&mut self, x: &Var<T>, a: &Var<T>) -> Result<Var<T>> {
        let y = tensor::broadcast_mul_channels(x.value(), a.value())?;
        Ok(self.push(
            Op::BroadcastMul {
                x: x.clone(),
                a: a.clone(),
            },
            y,
        ))
    }

    pub fn bilinear_upsample(&mut self, x: &Var<T>, factor: usize) -> Result<Var<T>> {
        let y = tensor::bilinear_upsample(x.value(), factor)?;
        Ok(self.push(Op::Bilinear { x: x.clone(), factor }, y))
    }

    /// Sum of all elements, as a `[1,1,1,1]` scalar.
    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let y = Tensor::scalar(x.value().sum());
        self.push(Op::Sum { x: x.clone() }, y)
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: &Var<T>, weights: Tensor<T>) -> Result<Var<T>> {
        let y = Tensor::scalar(x.value().dot(&weights)?);
        Ok(self.push(
            Op::WeightedSum {
                x: x.clone(),
                weights: Arc::new(weights),
            },
            y,
        ))
    }

    /// Mean focal loss over valid pixels.
    pub fn focal_loss(&mut self, logits: &Var<T>, target: Arc<LabelMap>, cfg: &FocalConfig) -> Result<Var<T>> {
        let loss = focal_loss_forward(logits.value(), &target, cfg)?;
        Ok(self.push(
            Op::FocalLoss {
                logits: logits.clone(),
                target,
                cfg: cfg.clone(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients::collect(&self.nodes, grads));
        };
        grads[root] = Some(Tensor::ones(loss.shape()));
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, gi) in node.op.inputs().into_iter().zip(backward_op(&node.op, &g)?) {
                if let (Some(id), Some(gi)) = (input.id, gi) {
                    debug_assert_eq!(self.nodes[id].shape, gi.shape(), "{} gradient shape", node.op.name());
                    match &mut grads[id] {
                        Some(acc) => acc.add_assign(&gi)?,
                        slot => *slot = Some(gi),
                    }
                }
            }
        }
        Ok(Gradients::collect(&self.nodes, grads))
    }
}

fn per_channel_sum<T: Element>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let [_, c, h, w] = g.shape();
    let mut out = vec![T::zero(); channels];
    for (idx, plane) in g.data().chunks(h * w).enumerate() {
        out[idx % c] = out[idx % c] + plane.iter().copied().sum::<T>();
    }
    Tensor::from_vec([channels, 1, 1, 1], out).expect("channel vector")
}

fn reshape_like<T: Element>(t: Tensor<T>, like: &Var<T>) -> Tensor<T> {
    t.reshape(like.shape()).expect("same element count")
}

/// Input gradients of one op given its output gradient, in `Op::inputs` order.
/// `None` where the input is untracked.
fn backward_op<T: Element>(op: &Op<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let need = |v: &Var<T>| v.is_tracked();
    Ok(match op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d { x, w, b, spec } => {
            let dx = need(x)
                .then(|| tensor::conv2d_backward_input(g, w.value(), spec, (x.value().h(), x.value().w())))
                .transpose()?;
            let dw = need(w)
                .then(|| tensor::conv2d_backward_weight(x.value(), g, spec))
                .transpose()?;
            let mut out = vec![dx, dw];
            if let Some(b) = b {
                out.push(need(b).then(|| reshape_like(per_channel_sum(g, spec.out_channels), b)));
            }
            out
        }
        Op::TransposedConv2d { x, w, spec } => {
            let dx = need(x)
                .then(|| tensor::transposed_conv2d_backward_input(g, w.value(), spec))
                .transpose()?;
            let dw = need(w)
                .then(|| tensor::transposed_conv2d_backward_weight(x.value(), g, spec))
                .transpose()?;
            vec![dx, dw]
        }
        Op::GlobalAvgPool { x } => {
            let [_, _, h, w] = x.shape();
            let inv = T::from_f64(1.0 / (h * w) as f64);
            let mut dx = Tensor::zeros(x.shape());
            for (plane, &gv) in dx.data_mut().chunks_mut(h * w).zip(g.data()) {
                plane.fill(gv * inv);
            }
            vec![Some(dx)]
        }
        Op::Relu { x } => vec![Some(x.value().zip_map(g, |v, gv| {
            if v > T::zero() {
                gv
            } else {
                T::zero()
            }
        })?)],
        Op::Relu6 { x } => {
            let six = T::from_f64(6.0);
            vec![Some(x.value().zip_map(g, |v, gv| {
                if v > T::zero() && v < six {
                    gv
                } else {
                    T::zero()
                }
            })?)]
        }
        Op::Sigmoid { y, .. } => vec![Some(y.zip_map(g, |s, gv| gv * s * (T::one() - s))?)],
        Op::Softmax { y, .. } => {
            let [n, c, h, w] = y.shape();
            let hw = h * w;
            let mut dx = Tensor::zeros(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let out = dx.data_mut();
            for i in 0..n {
                let base = i * c * hw;
                for p in 0..hw {
                    let dot: T = (0..c).map(|j| yd[base + j * hw + p] * gd[base + j * hw + p]).sum();
                    for j in 0..c {
                        let k = base + j * hw + p;
                        out[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::BatchNormTrain { x, gamma, beta, stats } => {
            let [_, c, h, w] = x.shape();
            let m = T::from_f64(stats.count as f64);
            let gam = gamma.value().data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (idx, (gp, xp)) in g.data().chunks(h * w).zip(stats.x_hat.data().chunks(h * w)).enumerate() {
                let j = idx % c;
                for (&gv, &xv) in gp.iter().zip(xp) {
                    sum_g[j] = sum_g[j] + gv;
                    sum_gx[j] = sum_gx[j] + gv * xv;
                }
            }
            let dx = need(x).then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for (idx, ((dp, gp), xp)) in dx
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(g.data().chunks(h * w))
                    .zip(stats.x_hat.data().chunks(h * w))
                    .enumerate()
                {
                    let j = idx % c;
                    let k = gam[j] * stats.inv_std[j] / m;
                    for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                        *d = k * (m * gv - sum_g[j] - xv * sum_gx[j]);
                    }
                }
                dx
            });
            let dgamma = need(gamma).then(|| Tensor::from_vec(gamma.shape(), sum_gx.clone()).expect("gamma shape"));
            let dbeta = need(beta).then(|| Tensor::from_vec(beta.shape(), sum_g.clone()).expect("beta shape"));
            vec![dx, dgamma, dbeta]
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let [_, c, h, w] = x.shape();
            let gam = gamma.value().data();
            let mut dx = Tensor::zeros(x.shape());
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (idx, ((dp, gp), xp)) in dx
                .data_mut()
                .chunks_mut(h * w)
                .zip(g.data().chunks(h * w))
                .zip(x.value().data().chunks(h * w))
                .enumerate()
            {
                let j = idx % c;
                for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                    *d = gv * gam[j] * inv_std[j];
                    dgamma[j] = dgamma[j] + gv * (xv - mean[j]) * inv_std[j];
                    dbeta[j] = dbeta[j] + gv;
                }
            }
            vec![
                need(x).then_some(dx),
                need(gamma).then(|| Tensor::from_vec(gamma.shape(), dgamma).expect("gamma shape")),
                need(beta).then(|| Tensor::from_vec(beta.shape(), dbeta).expect("beta shape")),
            ]
        }
        Op::Add { a, b } => vec![need(a).then(|| g.clone()), need(b).then(|| g.clone())],
        Op::BroadcastMul { x, a } => {
            let [n, c, h, w] = x.shape();
            let dx = need(x)
                .then(|| tensor::broadcast_mul_channels(g, a.value()))
                .transpose()?;
            let da = need(a).then(|| {
                let data = g
                    .data()
                    .chunks(h * w)
                    .zip(x.value().data().chunks(h * w))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&gv, &xv)| gv * xv).sum::<T>())
                    .collect();
                Tensor::from_vec([n, c, 1, 1], data).expect("attention shape")
            });
            vec![dx, da]
        }
        Op::Bilinear { x, factor } => {
            vec![Some(tensor::bilinear_upsample_adjoint(
                g,
                *factor,
                (x.value().h(), x.value().w()),
            )?)]
        }
        Op::Sum { x } => vec![Some(Tensor::full(x.shape(), g.data()[0]))],
        Op::WeightedSum { weights, .. } => vec![Some(weights.scale(g.data()[0]))],
        Op::FocalLoss { logits, target, cfg } => {
            let dl = focal_loss_backward(logits.value(), target, cfg)?;
            vec![Some(dl.scale(g.data()[0]))]
        }
    })
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    params: GradStore<T>,
}

impl<T: Element> Gradients<T> {
    fn collect(nodes: &[TapeNode<T>], mut grads: Vec<Option<Tensor<T>>>) -> Self {
        let mut params = GradStore::default();
        for (idx, node) in nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = grads[idx].clone().unwrap_or_else(|| Tensor::zeros(node.shape));
                params.accumulate(name, g);
            }
        }
        for (idx, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = None;
            }
        }
        Self { grads, params }
    }

    /// Gradient with respect to a leaf. Zeros if the loss does not depend on it.
    pub fn wrt(&self, var: &Var<T>) -> Option<Tensor<T>> {
        let id = var.id?;
        Some(
            self.grads
                .get(id)?
                .clone()
                .unwrap_or_else(|| Tensor::zeros(var.shape())),
        )
    }

    pub fn params(&self) -> &GradStore<T> {
        &self.params
    }

    pub fn into_params(self) -> GradStore<T> {
        self.params
    }
}

/// Parameter name → gradient.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T: Element = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Element> GradStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, name: &str, g: Tensor<T>) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(&g).expect("gradient shapes of one parameter agree"),
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    /// Sum of two stores into a fresh one.
    pub fn merged(&self, other: &GradStore<T>) -> GradStore<T> {
        let mut out = self.clone();
        for (k, g) in other.iter() {
            out.accumulate(k, g.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::randn([2, 3, 4, 4], 1.0, &mut rng));
        let loss = g.sum(&x);
        let grads = g.backward(&loss).unwrap();
        assert!(grads.wrt(&x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 3, 3]));
        let s = g.sigmoid(&x);
        let loss = g.sum(&s);
        let grads = g.backward(&loss).unwrap();
        assert!(grads.wrt(&x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 1, 1]));
        assert!(g.backward(&x).is_err());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 4], vec![0.0, 6.0, -1.0, 3.0]).unwrap());
        let r = g.relu(&x);
        let r6 = g.relu6(&x);
        let s = g.add(&r, &r6).unwrap();
        let loss = g.sum(&s);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        let x = g.leaf(Tensor::randn([1, 2, 5, 5], 1.0, &mut rng));
        let w = g.param("w", Arc::new(Tensor::randn(spec.weight_shape(), 1.0, &mut rng)));
        let y = g.conv2d(&x, &w, None, &spec).unwrap();
        let y = g.sigmoid(&y);
        let loss = g.sum(&y);
        let a = g.backward(&loss).unwrap();
        let b = g.backward(&loss).unwrap();
        assert_eq!(a.wrt(&x), b.wrt(&x));
        assert_eq!(a.params().get("w"), b.params().get("w"));
    }

    #[test]
    fn shared_param_accumulates_and_untouched_params_get_zeros() {
        let mut g = Graph::<f64>::new();
        let p = Arc::new(Tensor::full([1, 1, 1, 1], 2.0));
        let a = g.param("p", p.clone());
        let b = g.param("p", p);
        let unused = g.param("q", Arc::new(Tensor::ones([1, 1, 1, 3])));
        let s = g.add(&a, &b).unwrap();
        let loss = g.sum(&s);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.params().get("p").unwrap().data(), &[2.0]);
        assert_eq!(grads.params().get("q").unwrap().data(), &[0.0; 3]);
        assert!(grads.wrt(&unused).is_some());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.leaf(Tensor::ones([1, 1, 2, 2]));
        let y = g.relu(&x);
        assert!(!y.is_tracked());
        assert!(g.is_empty());
    }
}
