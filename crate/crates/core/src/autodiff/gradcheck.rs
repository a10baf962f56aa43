use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sample points whose ReLU/ReLU6 pre-activations come closer than this to a
/// kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over every input coordinate.
    pub max_rel_error: f64,
    /// Closest approach of any ReLU input to its kink at the sampled point.
    pub kink_margin: f64,
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::InvalidArgument("grad_check closure must return a scalar".into()));
    }
    Ok(out.value().data()[0])
}

/// Compare reverse-mode gradients of the scalar-valued `f` against central
/// differences with step `h`, at the given 64-bit inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    g.track_kinks(true);
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(&loss)?;
    let mut max_rel: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var).expect("leaf of a recording graph");
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        kink_margin: g.kink_margin(),
        coordinates,
    })
}

/// Gradient-check a tensor-valued op by contracting its output with fixed
/// random weights.
pub fn grad_check_op<F>(op: F, inputs: &[Tensor<f64>], h: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    grad_check(
        |g, vars| {
            let out = op(g, vars)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let weights = Tensor::rand_uniform(out.shape(), -1.0, 1.0, &mut rng);
            g.weighted_sum(&out, weights)
        },
        inputs,
        h,
    )
}

/// Draw inputs from `sample` until no ReLU pre-activation sits within
/// [`KINK_MARGIN`] of a kink, then gradient-check there.
pub fn grad_check_sampled<F, S, R>(op: F, mut sample: S, rng: &mut R, h: f64, max_tries: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
    S: FnMut(&mut R) -> Vec<Tensor<f64>>,
    R: Rng,
{
    for _ in 0..max_tries.max(1) {
        let inputs = sample(rng);
        let mut g = Graph::no_grad();
        g.track_kinks(true);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        op(&mut g, &vars)?;
        if g.kink_margin() < KINK_MARGIN {
            continue;
        }
        let seed = rng.gen();
        return grad_check_op(&op, &inputs, h, seed);
    }
    Err(Error::InvalidArgument(format!(
        "no sample cleared the {KINK_MARGIN} kink margin in {max_tries} tries"
    )))
}
