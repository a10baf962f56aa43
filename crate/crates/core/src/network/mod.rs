//! The full segmentation model: a truncated MobileNetV2 encoder and the
//! lightweight attention decoder producing logits at 1/4 input resolution.

mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{LayerKind, LayerNode};
use crate::autodiff::{Graph, Var};
use crate::blocks::{kaiming_normal, Activation, Afb, ConvBn, DsConv, ForwardCtx, InvertedResidual, UpsampleBlock};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{BatchStats, BnMode, ConvSpec, Element, Shape, Tensor, BN_MOMENTUM};

pub use weights::{
    decode_container, encode_container, load_weights, read_container, write_container, Container, ContainerTensor,
    LoadReport, MAGIC, VERSION,
};

/// Per-channel input standardisation applied to `[0, 1]` images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// `[height, width]`, both multiples of 32.
    pub input_size: [usize; 2],
    pub width_mult: f64,
    /// Channel-attention bottleneck ratio.
    pub se_reduction: usize,
    /// Decoder widths at strides 16, 8 and 4.
    pub decoder_widths: [usize; 3],
    pub afb_enabled: bool,
    /// Keep the 1×1 conv to 1280 channels at the end of the encoder.
    pub keep_final_encoder_conv: bool,
    /// Transposed-conv kernel in the upsampling units (stride 2).
    pub upsample_kernel: usize,
    pub normalization: Normalization,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 11,
            input_size: [544, 960],
            width_mult: 1.0,
            se_reduction: 4,
            decoder_widths: [96, 32, 24],
            afb_enabled: true,
            keep_final_encoder_conv: true,
            upsample_kernel: 2,
            normalization: Normalization::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.num_classes > 256 {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=256, got {}",
                self.num_classes
            )));
        }
        let [h, w] = self.input_size;
        check_input_hw(h, w)
            .map_err(|_| Error::Config(format!("input size {w}x{h} must be positive multiples of 32")))?;
        if self.width_mult.is_nan() || self.width_mult <= 0.0 {
            return Err(Error::Config(format!(
                "width_mult must be positive, got {}",
                self.width_mult
            )));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

fn check_input_hw(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!(
            "input spatial size {w}x{h} must be positive multiples of 32"
        )));
    }
    Ok(())
}

/// Round `v` to a multiple of 8 without dropping more than 10%.
pub fn make_divisible(v: f64) -> usize {
    let d = 8usize;
    let mut new_v = (((v + d as f64 / 2.0) as usize) / d * d).max(d);
    if (new_v as f64) < 0.9 * v {
        new_v += d;
    }
    new_v
}

/// MobileNetV2 stages: expansion, output channels, repeats, first stride.
pub const MOBILENET_V2_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stem: ConvBn,
    pub blocks: Vec<InvertedResidual>,
    pub final_conv: Option<ConvBn>,
    /// Block indices whose outputs are the stride-4, 8 and 16 taps.
    pub taps: [usize; 3],
}

/// Encoder outputs at strides 4, 8, 16 and 32.
pub struct EncoderFeatures<T: Element> {
    pub s4: Var<T>,
    pub s8: Var<T>,
    pub s16: Var<T>,
    pub s32: Var<T>,
}

impl Encoder {
    pub fn new(width_mult: f64, keep_final_conv: bool) -> Self {
        let stem_ch = make_divisible(32.0 * width_mult);
        let stem = ConvBn::new("encoder.stem", ConvSpec::new(3, stem_ch, 3, 2, 1), Activation::Relu6);
        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        let mut stride = 2;
        let mut taps = [0; 3];
        for &(t, c, n, s) in &MOBILENET_V2_STAGES {
            let out_ch = make_divisible(c as f64 * width_mult);
            for i in 0..n {
                let s_i = if i == 0 { s } else { 1 };
                blocks.push(InvertedResidual::new(
                    format!("encoder.block{}", blocks.len()),
                    in_ch,
                    out_ch,
                    s_i,
                    t,
                ));
                in_ch = out_ch;
            }
            stride *= s;
            // The last block before the stride doubles again is the tap.
            match stride {
                4 => taps[0] = blocks.len() - 1,
                8 => taps[1] = blocks.len() - 1,
                16 => taps[2] = blocks.len() - 1,
                _ => {}
            }
        }
        let final_conv = keep_final_conv.then(|| {
            let last = make_divisible(1280.0 * width_mult.max(1.0));
            ConvBn::new("encoder.final", ConvSpec::pointwise(in_ch, last), Activation::Relu6)
        });
        Self {
            stem,
            blocks,
            final_conv,
            taps,
        }
    }

    /// Channels at strides 4, 8, 16 and 32.
    pub fn channels(&self) -> [usize; 4] {
        let c32 = match &self.final_conv {
            Some(f) => f.spec.out_channels,
            None => self.blocks.last().expect("encoder has blocks").out_ch,
        };
        [
            self.blocks[self.taps[0]].out_ch,
            self.blocks[self.taps[1]].out_ch,
            self.blocks[self.taps[2]].out_ch,
            c32,
        ]
    }

    /// Channel sequence of the stem, each stage and the final conv.
    pub fn channel_sequence(&self) -> Vec<usize> {
        let mut seq = vec![self.stem.spec.out_channels];
        for b in &self.blocks {
            if seq.last() != Some(&b.out_ch) {
                seq.push(b.out_ch);
            }
        }
        if let Some(f) = &self.final_conv {
            seq.push(f.spec.out_channels);
        }
        seq
    }

    fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.stem.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        if let Some(f) = &self.final_conv {
            f.init(store, rng);
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, x: &Var<T>) -> Result<EncoderFeatures<T>> {
        let mut h = self.stem.forward(cx, x)?;
        let mut taps: Vec<Var<T>> = Vec::with_capacity(3);
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(cx, &h)?;
            if self.taps.contains(&i) {
                taps.push(h.clone());
            }
        }
        if let Some(f) = &self.final_conv {
            h = f.forward(cx, &h)?;
        }
        let mut taps = taps.into_iter();
        Ok(EncoderFeatures {
            s4: taps.next().expect("stride-4 tap"),
            s8: taps.next().expect("stride-8 tap"),
            s16: taps.next().expect("stride-16 tap"),
            s32: h,
        })
    }

    /// Layers plus the static shapes of the four taps.
    pub fn layers(&self, input: Shape) -> Result<(Vec<LayerNode>, [Shape; 4])> {
        let mut v = self.stem.layers(input)?;
        let mut shape = v[0].output;
        let mut taps = [[0; 4]; 4];
        let mut t = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            let l = b.layers(shape)?;
            shape = l.last().expect("block has layers").output;
            v.extend(l);
            if self.taps.contains(&i) {
                taps[t] = shape;
                t += 1;
            }
        }
        if let Some(f) = &self.final_conv {
            let l = f.layers(shape)?;
            shape = l[0].output;
            v.extend(l);
        }
        taps[3] = shape;
        Ok((v, taps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub name: String,
    pub up: UpsampleBlock,
    pub skip: ConvBn,
    pub afb: Option<Afb>,
    pub fuse: DsConv,
}

impl DecoderStage {
    fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.up.init(store, rng);
        self.skip.init(store, rng);
        if let Some(a) = &self.afb {
            a.init(store, rng);
        }
        self.fuse.init(store, rng);
    }

    fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, prev: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        let up = self.up.forward(cx, prev)?;
        let skip = self.skip.forward(cx, skip)?;
        let fused = match &self.afb {
            Some(afb) => afb.forward(cx, &skip, &up)?,
            None => cx.graph.add(&skip, &up).map_err(|e| e.in_layer(&self.name))?,
        };
        self.fuse.forward(cx, &fused)
    }

    fn layers(&self, prev: Shape, skip: Shape) -> Result<(Vec<LayerNode>, Shape)> {
        let mut v = self.up.layers(prev)?;
        let up = v[0].output;
        let s = self.skip.layers(skip)?;
        let skip_out = s[0].output;
        v.extend(s);
        if up != skip_out {
            return Err(Error::shape(format!("{} fusion", self.name), skip_out, up));
        }
        match &self.afb {
            Some(afb) => v.extend(afb.layers(up)?),
            None => v.push(LayerNode::new(format!("{}.add", self.name), LayerKind::Add, up, up)),
        }
        let f = self.fuse.layers(up)?;
        let out = f.last().expect("fuse layers").output;
        v.extend(f);
        Ok((v, out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    /// Pointwise projection of the stride-32 features to the first decoder width.
    pub reduce: ConvBn,
    /// Stages at strides 16, 8, 4.
    pub stages: Vec<DecoderStage>,
    pub head: ConvSpec,
}

impl Decoder {
    pub fn new(config: &NetworkConfig, enc_channels: [usize; 4]) -> Result<Self> {
        let [w16, w8, w4] = config.decoder_widths;
        let reduce = ConvBn::new(
            "decoder.reduce32",
            ConvSpec::pointwise(enc_channels[3], w16),
            Activation::Relu6,
        );
        let mut stages = Vec::new();
        let mut prev = w16;
        for (stride, width, skip_ch) in [
            (16, w16, enc_channels[2]),
            (8, w8, enc_channels[1]),
            (4, w4, enc_channels[0]),
        ] {
            let name = format!("decoder.stage{stride}");
            stages.push(DecoderStage {
                up: UpsampleBlock::new(format!("{name}.up"), prev, width, config.upsample_kernel)?,
                skip: ConvBn::new(
                    format!("{name}.skip"),
                    ConvSpec::pointwise(skip_ch, width),
                    Activation::Relu6,
                ),
                afb: if config.afb_enabled {
                    Some(Afb::new(format!("{name}.afb"), width, config.se_reduction)?)
                } else {
                    None
                },
                fuse: DsConv::new(format!("{name}.fuse"), width, width, 3, 1),
                name,
            });
            prev = width;
        }
        Ok(Self {
            reduce,
            stages,
            head: ConvSpec::pointwise(w4, config.num_classes).with_bias(true),
        })
    }

    fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.reduce.init(store, rng);
        for s in &self.stages {
            s.init(store, rng);
        }
        store.insert_param(
            "head.weight",
            kaiming_normal(self.head.weight_shape(), self.head.out_channels, rng),
        );
        store.insert_param("head.bias", Tensor::zeros([self.head.out_channels, 1, 1, 1]));
    }

    pub fn forward<T: Element>(&self, cx: &mut ForwardCtx<T>, feats: &EncoderFeatures<T>) -> Result<Var<T>> {
        let mut h = self.reduce.forward(cx, &feats.s32)?;
        for (stage, skip) in self.stages.iter().zip([&feats.s16, &feats.s8, &feats.s4]) {
            h = stage.forward(cx, &h, skip)?;
        }
        let w = cx.param("head.weight")?;
        let b = cx.param("head.bias")?;
        cx.graph
            .conv2d(&h, &w, Some(&b), &self.head)
            .map_err(|e| e.in_layer("head"))
    }

    fn layers(&self, taps: [Shape; 4]) -> Result<Vec<LayerNode>> {
        let mut v = self.reduce.layers(taps[3])?;
        let mut h = v[0].output;
        for (stage, skip) in self.stages.iter().zip([taps[2], taps[1], taps[0]]) {
            let (l, out) = stage.layers(h, skip)?;
            v.extend(l);
            h = out;
        }
        let out = self.head.output_shape(h)?;
        v.push(LayerNode::new("head.conv", LayerKind::Conv { spec: self.head }, h, out));
        Ok(v)
    }
}

/// A built network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: NetworkConfig,
    encoder: Encoder,
    decoder: Decoder,
    params: ParamStore<T>,
}

/// Batch statistics gathered by a train-mode forward.
pub type BnUpdates<T> = Vec<(String, BatchStats<T>)>;

impl<T: Element> Model<T> {
    /// Build and initialise with seed 0.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        Self::build_seeded(config, 0)
    }

    pub fn build_seeded(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let (encoder, decoder) = Self::architecture(config)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder.init(&mut params, &mut rng);
        decoder.init(&mut params, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            params,
        })
    }

    /// Build the descriptors and verify the encoder taps for the configured input size.
    fn architecture(config: &NetworkConfig) -> Result<(Encoder, Decoder)> {
        config.validate()?;
        let encoder = Encoder::new(config.width_mult, config.keep_final_encoder_conv);
        let ch = encoder.channels();
        let [h, w] = config.input_size;
        let (_, taps) = encoder.layers([1, 3, h, w])?;
        for (i, stride) in [4, 8, 16, 32].into_iter().enumerate() {
            let expected = [1, ch[i], h / stride, w / stride];
            if taps[i] != expected {
                return Err(Error::shape(format!("encoder stride-{stride} tap"), expected, taps[i]));
            }
        }
        let decoder = Decoder::new(config, ch)?;
        Ok((encoder, decoder))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replace every tensor; the key set and shapes must match exactly.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        for name in self.params.names() {
            if !params.contains(name) {
                return Err(Error::MissingKey(name.clone()));
            }
        }
        for (name, e) in params.iter() {
            let mine = self
                .params
                .entry(name)
                .ok_or_else(|| Error::UnexpectedKey(name.clone()))?;
            if mine.tensor.shape() != e.tensor.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: mine.tensor.shape(),
                    got: e.tensor.shape(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape[1] != 3 {
            return Err(Error::shape("model input", "[*, 3, *, *]", shape));
        }
        check_input_hw(shape[2], shape[3])
    }

    /// Forward without touching running statistics; train-mode batch
    /// statistics are returned for the caller to apply.
    pub fn forward_collect(&self, graph: &mut Graph<T>, x: &Var<T>, mode: BnMode) -> Result<(Var<T>, BnUpdates<T>)> {
        self.check_input(x.shape())?;
        let mut cx = ForwardCtx::new(graph, &self.params, mode);
        let feats = self.encoder.forward(&mut cx, x)?;
        let logits = self.decoder.forward(&mut cx, &feats)?;
        Ok((logits, cx.bn_updates))
    }

    /// Logits `[n, classes, h/4, w/4]`. Train mode also updates the running statistics.
    pub fn forward(&mut self, graph: &mut Graph<T>, x: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        let (logits, updates) = self.forward_collect(graph, x, mode)?;
        self.params.apply_bn_updates(&updates, BN_MOMENTUM)?;
        Ok(logits)
    }

    /// Eval-mode logits without recording a tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let (logits, _) = self.forward_collect(&mut g, &xv, BnMode::Eval)?;
        Ok(logits.into_tensor())
    }

    /// Eval-mode encoder outputs at strides 4, 8, 16 and 32.
    pub fn encoder_features(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        self.check_input(x.shape())?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let mut cx = ForwardCtx::new(&mut g, &self.params, BnMode::Eval);
        let f = self.encoder.forward(&mut cx, &xv)?;
        Ok([
            f.s4.into_tensor(),
            f.s8.into_tensor(),
            f.s16.into_tensor(),
            f.s32.into_tensor(),
        ])
    }

    /// Every layer in execution order with static shapes for `input`.
    pub fn layers(&self, input: Shape) -> Result<Vec<LayerNode>> {
        self.check_input(input)?;
        let (mut v, taps) = self.encoder.layers(input)?;
        v.extend(self.decoder.layers(taps)?);
        Ok(v)
    }

    /// Names of every tensor owned by an attention fusion block.
    pub fn afb_param_names(&self) -> Vec<String> {
        self.params.names().filter(|n| n.contains(".afb.")).cloned().collect()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_matches_reference() {
        assert_eq!(make_divisible(32.0), 32);
        assert_eq!(make_divisible(16.0 * 0.5), 8);
        assert_eq!(make_divisible(24.0 * 0.75), 24);
        assert_eq!(make_divisible(96.0 * 1.4), 136);
        assert_eq!(make_divisible(3.0), 8);
    }

    #[test]
    fn canonical_channel_sequence() {
        let e = Encoder::new(1.0, true);
        assert_eq!(e.channel_sequence(), vec![32, 16, 24, 32, 64, 96, 160, 320, 1280]);
        assert_eq!(e.channels(), [24, 32, 96, 1280]);
        assert_eq!(e.blocks.len(), 17);
        assert_eq!(Encoder::new(1.0, false).channels()[3], 320);
    }

    #[test]
    fn config_rejects_indivisible_input() {
        let cfg = NetworkConfig {
            input_size: [100, 96],
            ..NetworkConfig::default()
        };
        assert!(matches!(Model::<f32>::build(&cfg), Err(Error::Config(_))));
        let cfg = NetworkConfig {
            se_reduction: 5,
            ..NetworkConfig::default()
        };
        assert!(Model::<f32>::build(&cfg).is_err());
    }

    #[test]
    fn reference_tap_shapes() {
        let e = Encoder::new(1.0, true);
        let (_, taps) = e.layers([1, 3, 544, 960]).unwrap();
        assert_eq!(
            taps,
            [[1, 24, 136, 240], [1, 32, 68, 120], [1, 96, 34, 60], [1, 1280, 17, 30]]
        );
    }
}
