//! Static cost model: multiply-accumulates and parameter counts per layer.
//!
//! One MAC is reported as one FLOP. Batchnorm, activations, pooling and
//! elementwise ops cost zero MACs.

mod bench;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{ConvSpec, Element, Shape};

pub use bench::{benchmark_latency, LatencyStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { spec: ConvSpec },
    TransposedConv { spec: ConvSpec },
    BatchNorm { channels: usize },
    Activation { function: String },
    GlobalAvgPool,
    Add,
    BroadcastMul,
}

/// One layer of the network graph with its static shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
    /// False for layers whose cost does not grow with the input area
    /// (the channel-attention bottleneck after global pooling).
    pub area_scaled: bool,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind, input: Shape, output: Shape) -> Self {
        Self {
            name: name.into(),
            kind,
            input,
            output,
            area_scaled: true,
        }
    }

    pub fn pooled(mut self) -> Self {
        self.area_scaled = false;
        self
    }
}

/// Something whose cost can be counted: a single layer, or a whole
/// depthwise-separable unit.
#[derive(Clone, Debug, PartialEq)]
pub enum CostItem {
    Layer(LayerKind),
    /// Depthwise `k×k` on `d1` channels followed by pointwise `d1 → d2`.
    DepthwiseSeparable {
        d1: usize,
        d2: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    /// Trainable parameters.
    pub params: u64,
    /// Batchnorm running statistics.
    pub buffers: u64,
}

impl Cost {
    /// Parameters counting batchnorm as 4 values per channel.
    pub fn params_with_buffers(&self) -> u64 {
        self.params + self.buffers
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            params: self.params + o.params,
            buffers: self.buffers + o.buffers,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn conv_cost(spec: &ConvSpec, out: Shape) -> Cost {
    let [n, d2, oh, ow] = out;
    let k = spec.kernel as u64;
    let per_out = k * k * (spec.in_channels / spec.groups) as u64;
    let weights = per_out * spec.out_channels as u64;
    Cost {
        macs: per_out * (n * d2 * oh * ow) as u64,
        params: weights + if spec.bias { spec.out_channels as u64 } else { 0 },
        buffers: 0,
    }
}

/// MACs and parameters of one item applied to `input`.
///
/// Standard conv: `k·k·(d1/g)·d2·m·n` over the `m×n` output. Transposed conv:
/// `k·k·d1·d2` per input pixel. Depthwise separable: `k·k·d1·m·n + d1·d2·m·n`.
pub fn count_layer(item: &CostItem, input: Shape) -> Result<Cost> {
    Ok(match item {
        CostItem::Layer(LayerKind::Conv { spec }) => conv_cost(spec, spec.output_shape(input)?),
        CostItem::Layer(LayerKind::TransposedConv { spec }) => {
            let [n, _, h, w] = input;
            let k = spec.kernel as u64;
            let weights = k * k * (spec.in_channels * spec.out_channels) as u64;
            Cost {
                macs: weights * (n * h * w) as u64,
                params: weights + if spec.bias { spec.out_channels as u64 } else { 0 },
                buffers: 0,
            }
        }
        CostItem::Layer(LayerKind::BatchNorm { channels }) => Cost {
            macs: 0,
            params: 2 * *channels as u64,
            buffers: 2 * *channels as u64,
        },
        CostItem::Layer(_) => Cost::default(),
        CostItem::DepthwiseSeparable { d1, d2, kernel, stride } => {
            let dw = ConvSpec::depthwise(*d1, *kernel, *stride);
            let mid = dw.output_shape(input)?;
            conv_cost(&dw, mid) + conv_cost(&ConvSpec::pointwise(*d1, *d2), [mid[0], *d2, mid[2], mid[3]])
        }
    })
}

/// Cost ratio of a depthwise-separable convolution to the standard one:
/// `1/d2 + 1/k²`.
pub fn separable_cost_ratio(kernel: usize, d1: usize, d2: usize) -> Result<f64> {
    if kernel == 0 || d1 == 0 || d2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "cost ratio needs positive k, d1, d2; got k={kernel} d1={d1} d2={d2}"
        )));
    }
    Ok(1.0 / d2 as f64 + 1.0 / (kernel * kernel) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
    Head,
}

impl Stage {
    fn of(name: &str) -> Stage {
        match name.split('.').next() {
            Some("encoder") => Stage::Encoder,
            Some("head") => Stage::Head,
            _ => Stage::Decoder,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
            Stage::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub stage: Stage,
    pub output: Shape,
    pub macs: u64,
    pub params: u64,
    pub buffers: u64,
    pub area_scaled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: Stage,
    pub macs: u64,
    pub params: u64,
    pub buffers: u64,
    /// Share of total MACs, in percent.
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `"1 MAC = 1 FLOP"`.
    pub convention: String,
    pub input: Shape,
    pub rows: Vec<CostRow>,
    pub stages: Vec<StageCost>,
    pub total_macs: u64,
    pub total_params: u64,
    pub total_buffers: u64,
    /// MACs of layers whose cost grows with the input area.
    pub area_scaled_macs: u64,
}

pub const CONVENTION: &str = "1 MAC = 1 FLOP";

fn kind_label(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv { spec } if spec.is_depthwise() => {
            format!("dwconv{}x{}/{}", spec.kernel, spec.kernel, spec.stride)
        }
        LayerKind::Conv { spec } => format!("conv{}x{}/{}", spec.kernel, spec.kernel, spec.stride),
        LayerKind::TransposedConv { spec } => format!("tconv{}x{}/{}", spec.kernel, spec.kernel, spec.stride),
        LayerKind::BatchNorm { .. } => "bn".into(),
        LayerKind::Activation { function } => function.clone(),
        LayerKind::GlobalAvgPool => "gap".into(),
        LayerKind::Add => "add".into(),
        LayerKind::BroadcastMul => "scale".into(),
    }
}

/// Walk a list of layers and aggregate costs by stage.
pub fn count_layers(layers: &[LayerNode], input: Shape) -> Result<CostReport> {
    let mut rows = Vec::with_capacity(layers.len());
    for node in layers {
        let cost = count_layer(&CostItem::Layer(node.kind.clone()), node.input)?;
        rows.push(CostRow {
            name: node.name.clone(),
            kind: kind_label(&node.kind),
            stage: Stage::of(&node.name),
            output: node.output,
            macs: cost.macs,
            params: cost.params,
            buffers: cost.buffers,
            area_scaled: node.area_scaled,
        });
    }
    let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
    let stages = [Stage::Encoder, Stage::Decoder, Stage::Head]
        .into_iter()
        .map(|stage| {
            let sel = rows.iter().filter(|r| r.stage == stage);
            let macs: u64 = sel.clone().map(|r| r.macs).sum();
            StageCost {
                stage,
                macs,
                params: sel.clone().map(|r| r.params).sum(),
                buffers: sel.map(|r| r.buffers).sum(),
                percent: if total_macs == 0 {
                    0.0
                } else {
                    100.0 * macs as f64 / total_macs as f64
                },
            }
        })
        .collect();
    Ok(CostReport {
        convention: CONVENTION.into(),
        input,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_buffers: rows.iter().map(|r| r.buffers).sum(),
        area_scaled_macs: rows.iter().filter(|r| r.area_scaled).map(|r| r.macs).sum(),
        total_macs,
        rows,
        stages,
    })
}

/// Cost report of a built model for a single `[h, w]` input.
pub fn count_model<T: Element>(model: &Model<T>, input_hw: [usize; 2]) -> Result<CostReport> {
    let input = [1, 3, input_hw[0], input_hw[1]];
    count_layers(&model.layers(input)?, input)
}

impl CostReport {
    pub fn stage(&self, stage: Stage) -> &StageCost {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .expect("every stage is reported")
    }

    /// Aligned text table. `flops_per_mac` is 1 for the native convention or 2
    /// to express counts as separate multiplies and adds.
    pub fn to_table(&self, per_layer: bool, flops_per_mac: u64) -> String {
        let g = |m: u64| (m * flops_per_mac) as f64 / 1e9;
        let mut s = String::new();
        let [_, _, h, w] = self.input;
        let _ = writeln!(
            s,
            "input {w}x{h}, convention: {}",
            if flops_per_mac == 1 {
                CONVENTION
            } else {
                "1 MAC = 2 FLOPs"
            }
        );
        if per_layer {
            let _ = writeln!(
                s,
                "{:<44} {:<14} {:<22} {:>14} {:>10}",
                "layer", "kind", "output", "MACs", "params"
            );
            for r in self.rows.iter().filter(|r| r.macs > 0 || r.params > 0) {
                let _ = writeln!(
                    s,
                    "{:<44} {:<14} {:<22} {:>14} {:>10}",
                    r.name,
                    r.kind,
                    format!("{:?}", r.output),
                    r.macs * flops_per_mac,
                    r.params
                );
            }
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>9} {:>12}", "stage", "GFLOPs", "percent", "params");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<10} {:>12.4} {:>8.2}% {:>12}",
                st.stage.label(),
                g(st.macs),
                st.percent,
                st.params
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>12.4} {:>8.2}% {:>12}",
            "total",
            g(self.total_macs),
            100.0,
            self.total_params
        );
        let _ = writeln!(
            s,
            "params incl. bn running stats: {}",
            self.total_params + self.total_buffers
        );
        s
    }
}
