//! Finite-difference sweep over every differentiable op and block, on
//! randomly drawn shapes and values (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grad_check_sampled, GradCheck, Graph, Var};
use crate::blocks::{Activation, Afb, ConvBn, DsConv, ForwardCtx, InvertedResidual, UpsampleBlock};
use crate::error::Result;
use crate::loss::{FocalConfig, LabelMap};
use crate::params::ParamStore;
use crate::tensor::{BnMode, ConvSpec, Shape, Tensor, BN_EPS};

/// Central-difference step.
pub const SUITE_STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;
const MAX_TRIES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

type Rng64 = ChaCha8Rng;
type Sampler = Box<dyn FnMut(&mut Rng64) -> Vec<Tensor<f64>>>;

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

fn small_dim(rng: &mut Rng64) -> usize {
    rng.gen_range(2..=5)
}

/// Run `cases` random checks of one op and fold the errors.
fn run_case<F>(
    name: &str,
    cases: usize,
    rng: &mut Rng64,
    mut make: impl FnMut(&mut Rng64) -> (F, Sampler),
) -> Result<SuiteEntry>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut entry = SuiteEntry {
        name: name.to_string(),
        cases,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..cases {
        let (op, sampler) = make(rng);
        let GradCheck {
            max_rel_error,
            coordinates,
            ..
        } = grad_check_sampled(op, sampler, rng, SUITE_STEP, MAX_TRIES)?;
        entry.coordinates += coordinates;
        entry.max_rel_error = entry.max_rel_error.max(max_rel_error);
    }
    Ok(entry)
}

/// Parameters of a block, with trainable tensors drawn away from their
/// trivial initial values and running statistics randomised.
fn block_params(
    init: impl FnOnce(&mut ParamStore<f64>, &mut Rng64),
    rng: &mut Rng64,
) -> (ParamStore<f64>, Vec<(String, Shape)>) {
    let mut store = ParamStore::new();
    init(&mut store, rng);
    for name in store.names().cloned().collect::<Vec<_>>() {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            let shape = store.tensor(&name).expect("present").shape();
            store.set(&name, uniform(shape, 0.2, 1.2, rng)).expect("same shape");
        }
    }
    let trainable = store.trainable().map(|(k, t)| (k.clone(), t.shape())).collect();
    (store, trainable)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>>;
type BlockForward<B> = fn(&B, &mut ForwardCtx<f64>, &[Var<f64>]) -> Result<Var<f64>>;

fn conv_case(rng: &mut Rng64, depthwise: bool) -> (OpFn, Sampler) {
    let n = rng.gen_range(1..=2);
    let (spec, h, w) = loop {
        let k = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..k);
        let spec = if depthwise {
            let c = rng.gen_range(1..=4);
            ConvSpec::new(c, c, k, s, p).with_groups(c)
        } else {
            let g = [1, 1, 2][rng.gen_range(0..3)];
            ConvSpec::new(g * rng.gen_range(1..=2), g * rng.gen_range(1..=3), k, s, p)
                .with_groups(g)
                .with_bias(rng.gen_bool(0.5))
        };
        let (h, w) = (small_dim(rng) + 1, small_dim(rng) + 1);
        if spec.output_shape([n, spec.in_channels, h, w]).is_ok() {
            break (spec, h, w);
        }
    };
    let op: OpFn = Box::new(move |g, v| g.conv2d(&v[0], &v[1], v.get(2), &spec));
    let sampler: Sampler = Box::new(move |r| {
        let mut t = vec![
            uniform([n, spec.in_channels, h, w], -1.0, 1.0, r),
            uniform(spec.weight_shape(), -1.0, 1.0, r),
        ];
        if spec.bias {
            t.push(uniform([spec.out_channels, 1, 1, 1], -1.0, 1.0, r));
        }
        t
    });
    (op, sampler)
}

fn transposed_case(rng: &mut Rng64) -> (OpFn, Sampler) {
    let n = rng.gen_range(1..=2);
    let (spec, h, w) = loop {
        let k = rng.gen_range(1..=4);
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..k);
        let spec = ConvSpec::new(rng.gen_range(1..=3), rng.gen_range(1..=3), k, s, p);
        let (h, w) = (small_dim(rng), small_dim(rng));
        if spec.transposed_output_shape([n, spec.in_channels, h, w]).is_ok() {
            break (spec, h, w);
        }
    };
    let op: OpFn = Box::new(move |g, v| g.transposed_conv2d(&v[0], &v[1], &spec));
    let sampler: Sampler = Box::new(move |r| {
        vec![
            uniform([n, spec.in_channels, h, w], -1.0, 1.0, r),
            uniform(spec.transposed_weight_shape(), -1.0, 1.0, r),
        ]
    });
    (op, sampler)
}

fn random_shape(rng: &mut Rng64) -> Shape {
    [
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        small_dim(rng),
        small_dim(rng),
    ]
}

fn unary_case(
    rng: &mut Rng64,
    lo: f64,
    hi: f64,
    f: fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> (OpFn, Sampler) {
    let shape = random_shape(rng);
    (
        Box::new(move |g, v| f(g, &v[0])),
        Box::new(move |r| vec![uniform(shape, lo, hi, r)]),
    )
}

fn bn_case(rng: &mut Rng64, train: bool) -> (OpFn, Sampler) {
    let shape = random_shape(rng);
    let c = shape[1];
    let pshape = [c, 1, 1, 1];
    let mean = Tensor::rand_uniform(pshape, -0.5, 0.5, rng);
    let var = Tensor::rand_uniform(pshape, 0.3, 1.5, rng);
    let op: OpFn = if train {
        Box::new(|g, v| Ok(g.batchnorm_train(&v[0], &v[1], &v[2], BN_EPS)?.0))
    } else {
        Box::new(move |g, v| g.batchnorm_eval(&v[0], &v[1], &v[2], &mean, &var, BN_EPS))
    };
    let sampler: Sampler = Box::new(move |r| {
        vec![
            uniform(shape, -2.0, 2.0, r),
            uniform(pshape, 0.5, 1.5, r),
            uniform(pshape, -0.5, 0.5, r),
        ]
    });
    (op, sampler)
}

fn focal_case(rng: &mut Rng64, gamma: f64) -> (OpFn, Sampler) {
    let [n, _, h, w] = random_shape(rng);
    let c = rng.gen_range(2..=4);
    let ignore = rng.gen_bool(0.3).then_some(c as u8);
    let labels: Vec<u8> = (0..n * h * w)
        .map(|_| {
            if ignore.is_some() && rng.gen_bool(0.2) {
                c as u8
            } else {
                rng.gen_range(0..c) as u8
            }
        })
        .collect();
    let target = std::sync::Arc::new(LabelMap::new([n, h, w], labels).expect("sized"));
    let cfg = FocalConfig {
        gamma,
        ignore_index: ignore,
    };
    let op: OpFn = Box::new(move |g, v| g.focal_loss(&v[0], target.clone(), &cfg));
    (op, Box::new(move |r| vec![uniform([n, c, h, w], -3.0, 3.0, r)]))
}

/// A block differentiated w.r.t. its data inputs and every trainable tensor.
fn block_case<B: 'static>(
    rng: &mut Rng64,
    block: B,
    init: impl FnOnce(&B, &mut ParamStore<f64>, &mut Rng64),
    input: Shape,
    mode: BnMode,
    forward: BlockForward<B>,
    data_inputs: usize,
) -> (OpFn, Sampler) {
    let (store, trainable) = block_params(|s, r| init(&block, s, r), rng);
    let names: Vec<String> = trainable.iter().map(|(n, _)| n.clone()).collect();
    let op: OpFn = Box::new(move |g, v| {
        let mut cx = ForwardCtx::new(g, &store, mode);
        for (name, var) in names.iter().zip(&v[data_inputs..]) {
            cx.bind(name.clone(), var.clone());
        }
        forward(&block, &mut cx, &v[..data_inputs])
    });
    let sampler: Sampler = Box::new(move |r| {
        let mut inputs: Vec<Tensor<f64>> = (0..data_inputs).map(|_| uniform(input, -1.0, 1.0, r)).collect();
        for (name, shape) in &trainable {
            let (lo, hi) = if name.ends_with(".gamma") {
                (0.5, 1.5)
            } else {
                (-1.0, 1.0)
            };
            inputs.push(uniform(*shape, lo, hi, r));
        }
        inputs
    });
    (op, sampler)
}

fn mode_of(rng: &mut Rng64) -> BnMode {
    if rng.gen_bool(0.5) {
        BnMode::Train
    } else {
        BnMode::Eval
    }
}

/// Every op and block, `cases` random draws each.
pub fn gradient_suite(seed: u64, cases: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        run_case("conv2d", cases, r, |r| conv_case(r, false))?,
        run_case("depthwise_conv2d", cases, r, |r| conv_case(r, true))?,
        run_case("transposed_conv2d", cases, r, transposed_case)?,
        run_case("global_avg_pool", cases, r, |r| {
            unary_case(r, -1.0, 1.0, |g, x| g.global_avg_pool(x))
        })?,
        run_case("relu", cases, r, |r| unary_case(r, -1.0, 1.0, |g, x| Ok(g.relu(x))))?,
        run_case("relu6", cases, r, |r| unary_case(r, -2.0, 8.0, |g, x| Ok(g.relu6(x))))?,
        run_case("sigmoid", cases, r, |r| {
            unary_case(r, -4.0, 4.0, |g, x| Ok(g.sigmoid(x)))
        })?,
        run_case("softmax_channels", cases, r, |r| {
            unary_case(r, -3.0, 3.0, |g, x| Ok(g.softmax_channels(x)))
        })?,
    ];
    for f in [2, 3] {
        out.push(run_case(&format!("bilinear_upsample_x{f}"), cases, r, |r| {
            let shape = random_shape(r);
            let op: OpFn = Box::new(move |g, v| g.bilinear_upsample(&v[0], f));
            (
                op,
                Box::new(move |r: &mut Rng64| vec![uniform(shape, -1.0, 1.0, r)]) as Sampler,
            )
        })?);
    }
    out.push(run_case("batchnorm_train", cases, r, |r| bn_case(r, true))?);
    out.push(run_case("batchnorm_eval", cases, r, |r| bn_case(r, false))?);
    out.push(run_case("add", cases, r, |r| {
        let shape = random_shape(r);
        let op: OpFn = Box::new(|g, v| g.add(&v[0], &v[1]));
        (
            op,
            Box::new(move |r: &mut Rng64| vec![uniform(shape, -1.0, 1.0, r), uniform(shape, -1.0, 1.0, r)]) as Sampler,
        )
    })?);
    out.push(run_case("broadcast_mul_channels", cases, r, |r| {
        let shape = random_shape(r);
        let a = [shape[0], shape[1], 1, 1];
        let op: OpFn = Box::new(|g, v| g.broadcast_mul_channels(&v[0], &v[1]));
        (
            op,
            Box::new(move |r: &mut Rng64| vec![uniform(shape, -1.0, 1.0, r), uniform(a, -1.0, 1.0, r)]) as Sampler,
        )
    })?);
    for gamma in [0.0, 2.0, 6.0] {
        out.push(run_case(&format!("focal_loss_gamma{gamma}"), cases, r, |r| {
            focal_case(r, gamma)
        })?);
    }
    out.push(run_case("conv_bn", cases, r, |r| {
        let c = r.gen_range(1..=3);
        let d = r.gen_range(1..=3);
        let k = [1, 3][r.gen_range(0..2)];
        let block = ConvBn::new(
            "u",
            ConvSpec::new(c, d, k, r.gen_range(1..=2), k / 2),
            Activation::Relu6,
        );
        let mode = mode_of(r);
        block_case(
            r,
            block,
            |b, s, r| b.init(s, r),
            [2, c, 4, 4],
            mode,
            |b, cx, v| b.forward(cx, &v[0]),
            1,
        )
    })?);
    out.push(run_case("ds_conv", cases, r, |r| {
        let c = r.gen_range(1..=3);
        let block = DsConv::new("ds", c, r.gen_range(1..=3), 3, r.gen_range(1..=2));
        let mode = mode_of(r);
        block_case(
            r,
            block,
            |b, s, r| b.init(s, r),
            [2, c, 4, 4],
            mode,
            |b, cx, v| b.forward(cx, &v[0]),
            1,
        )
    })?);
    out.push(run_case("inverted_residual", cases, r, |r| {
        let c = r.gen_range(1..=3);
        let (out_c, stride) = if r.gen_bool(0.5) {
            (c, 1)
        } else {
            (r.gen_range(1..=3), r.gen_range(1..=2))
        };
        let block = InvertedResidual::new("ir", c, out_c, stride, r.gen_range(1..=2));
        let mode = mode_of(r);
        block_case(
            r,
            block,
            |b, s, r| b.init(s, r),
            [2, c, 4, 4],
            mode,
            |b, cx, v| b.forward(cx, &v[0]),
            1,
        )
    })?);
    out.push(run_case("afb", cases, r, |r| {
        let red = r.gen_range(1..=2);
        let c = red * r.gen_range(1..=3);
        let block = Afb::new("afb", c, red).expect("divisible");
        let shape = [r.gen_range(1..=2), c, small_dim(r), small_dim(r)];
        block_case(
            r,
            block,
            |b, s, r| b.init(s, r),
            shape,
            BnMode::Eval,
            |b, cx, v| b.forward(cx, &v[0], &v[1]),
            2,
        )
    })?);
    out.push(run_case("upsample_block", cases, r, |r| {
        let c = r.gen_range(1..=3);
        let k = [2, 4][r.gen_range(0..2)];
        let block = UpsampleBlock::new("up", c, r.gen_range(1..=3), k).expect("even kernel");
        let mode = mode_of(r);
        let shape = [2, c, small_dim(r), small_dim(r)];
        block_case(
            r,
            block,
            |b, s, r| b.init(s, r),
            shape,
            mode,
            |b, cx, v| b.forward(cx, &v[0]),
            1,
        )
    })?);
    Ok(out)
}
