use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu6<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    x.map(|v| {
        if v <= T::zero() {
            T::zero()
        } else if v >= six {
            six
        } else {
            v
        }
    })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    // Branching on sign keeps exp from overflowing.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for j in 0..c {
                max = max.max(src[base + j * hw + p]);
            }
            let mut sum = T::zero();
            for j in 0..c {
                let e = (src[base + j * hw + p] - max).exp();
                dst[base + j * hw + p] = e;
                sum = sum + e;
            }
            for j in 0..c {
                dst[base + j * hw + p] = dst[base + j * hw + p] / sum;
            }
        }
    }
    out
}

/// Per-channel spatial mean, `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h * w == 0 {
        return Err(Error::InvalidArgument(format!(
            "global average pool over empty spatial extent {h}x{w}"
        )));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn add<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("add", x.shape(), y.shape()));
    }
    x.zip_map(y, |a, b| a + b)
}

/// `x[n,c,h,w] * a[n,c]`, the scale broadcast over every spatial position.
pub fn broadcast_mul_channels<T: Element>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if a.shape() != [n, c, 1, 1] {
        return Err(Error::shape("broadcast_mul_channels", [n, c, 1, 1], a.shape()));
    }
    let mut out = x.clone();
    for (plane, &s) in out.data_mut().chunks_mut(h * w).zip(a.data()) {
        for v in plane {
            *v = *v * s;
        }
    }
    Ok(out)
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear resize.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_factor(x: Shape, factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    if x[2] == 0 || x[3] == 0 {
        return Err(Error::InvalidArgument("upsample of empty tensor".into()));
    }
    Ok(())
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
pub fn bilinear_upsample<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(x.shape(), factor)?;
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (cc, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + lx * (b - a);
                let bot = cc + lx * (d - cc);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]; maps a gradient at the upsampled size back.
pub fn bilinear_upsample_adjoint<T: Element>(
    dy: &Tensor<T>,
    factor: usize,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w) = in_hw;
    let [n, c, oh, ow] = dy.shape();
    check_factor([n, c, h, w], factor)?;
    if oh != h * factor || ow != w * factor {
        return Err(Error::shape(
            "bilinear_upsample backward",
            [n, c, h * factor, w * factor],
            dy.shape(),
        ));
    }
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (g, d) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                let wy0 = T::from_f64(1.0 - ly);
                let wy1 = T::from_f64(ly);
                let wx0 = T::from_f64(1.0 - lx);
                let wx1 = T::from_f64(lx);
                d[y0 * w + x0] = d[y0 * w + x0] + gv * wy0 * wx0;
                d[y0 * w + x1] = d[y0 * w + x1] + gv * wy0 * wx1;
                d[y1 * w + x0] = d[y1 * w + x0] + gv * wy1 * wx0;
                d[y1 * w + x1] = d[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics of a train-mode batchnorm, kept for the backward pass and
/// the running-average update.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub x_hat: Tensor<T>,
    /// Elements per channel.
    pub count: usize,
}

impl<T: Element> BatchStats<T> {
    /// Exponential running-average update with the unbiased batch variance.
    pub fn update_running(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::from_f64(1.0 - momentum);
        let unbias = if self.count > 1 {
            T::from_f64(self.count as f64 / (self.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &v) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + m * v * unbias;
        }
    }
}

fn check_channel_params<T: Element>(x: &Tensor<T>, params: &[(&str, &Tensor<T>)]) -> Result<()> {
    for (name, p) in params {
        if p.len() != x.c() {
            return Err(Error::shape(format!("batchnorm {name}"), x.c(), p.shape()));
        }
    }
    Ok(())
}

fn affine<T: Element>(x_hat: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = x_hat.shape();
    let mut y = x_hat.clone();
    for (idx, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
        let (g, b) = (gamma.data()[idx % c], beta.data()[idx % c]);
        for v in plane {
            *v = *v * g + b;
        }
    }
    y
}

/// Normalise with batch statistics.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    check_channel_params(x, &[("gamma", gamma), ("beta", beta)])?;
    let [n, c, h, w] = x.shape();
    let count = n * h * w;
    if count == 0 {
        return Err(Error::InvalidArgument("batchnorm over empty batch".into()));
    }
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for j in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s = s + x.plane(i, j).iter().copied().sum::<T>();
        }
        let mu = s * inv_count;
        let mut ss = T::zero();
        for i in 0..n {
            ss = ss + x.plane(i, j).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[j] = mu;
        var[j] = ss * inv_count;
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut x_hat = x.clone();
    for (idx, plane) in x_hat.data_mut().chunks_mut(h * w).enumerate() {
        let j = idx % c;
        for v in plane {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    let y = affine(&x_hat, gamma, beta);
    Ok((
        y,
        BatchStats {
            mean,
            var,
            inv_std,
            x_hat,
            count,
        },
    ))
}

/// Normalise with running statistics.
pub fn batchnorm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_channel_params(
        x,
        &[
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ],
    )?;
    let [_, c, h, w] = x.shape();
    let eps_t = T::from_f64(eps);
    let scale: Vec<T> = (0..c)
        .map(|j| gamma.data()[j] / (running_var.data()[j] + eps_t).sqrt())
        .collect();
    let mut y = x.clone();
    for (idx, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
        let j = idx % c;
        let (mu, s, b) = (running_mean.data()[j], scale[j], beta.data()[j]);
        for v in plane {
            *v = (*v - mu) * s + b;
        }
    }
    Ok(y)
}

/// Batch normalisation. Train mode normalises by batch statistics and folds
/// them into the running averages; eval mode uses the running averages.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Eval => batchnorm_eval(x, gamma, beta, running_mean, running_var, eps),
        BnMode::Train => {
            check_channel_params(x, &[("running_mean", running_mean), ("running_var", running_var)])?;
            let (y, stats) = batchnorm_train(x, gamma, beta, eps)?;
            stats.update_running(running_mean, running_var, momentum);
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![0.0, 10.0, -1.0, 3.0]).unwrap();
        assert_eq!(sigmoid(&x).data()[0], 0.5);
        assert_eq!(relu6(&x).data(), &[0.0, 6.0, 0.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 10.0, 0.0, 3.0]);
        let big = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-200.0, 200.0]).unwrap();
        let s = sigmoid(&big);
        assert!(s.all_finite());
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
    }

    #[test]
    fn softmax_uniform_and_normalised() {
        let x = Tensor::<f64>::full([1, 4, 2, 2], 3.0);
        assert!(softmax_channels(&x).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 5, 3, 3], 30.0, &mut rng);
        let s = softmax_channels(&x);
        for i in 0..2 {
            for p in 0..9 {
                let total: f64 = (0..5).map(|j| s.plane(i, j)[p]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gap_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full([2, 3, 4, 5], 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        let lin = global_avg_pool(&x.scale(3.0)).unwrap();
        assert_eq!(lin.data(), &[7.5]);
        assert!(global_avg_pool(&Tensor::<f32>::zeros([1, 1, 0, 3])).is_err());
    }

    #[test]
    fn broadcast_mul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn([2, 3, 4, 4], 1.0, &mut rng);
        assert_eq!(broadcast_mul_channels(&x, &Tensor::ones([2, 3, 1, 1])).unwrap(), x);
        let mut a = Tensor::ones([2, 3, 1, 1]);
        a.set([1, 2, 0, 0], 0.0);
        let y = broadcast_mul_channels(&x, &a).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                if (i, j) == (1, 2) {
                    assert!(y.plane(i, j).iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(y.plane(i, j), x.plane(i, j));
                }
            }
        }
        assert!(broadcast_mul_channels(&x, &Tensor::ones([2, 2, 1, 1])).is_err());
        assert!(add(&x, &Tensor::zeros([2, 3, 4, 5])).is_err());
    }

    #[test]
    fn bilinear_constant_and_shape() {
        let x = Tensor::<f32>::full([1, 2, 3, 5], 0.37);
        let y = bilinear_upsample(&x, 4).unwrap();
        assert_eq!(y.shape(), [1, 2, 12, 20]);
        assert!(y.data().iter().all(|&v| v == 0.37));
        assert!(bilinear_upsample(&x, 0).is_err());
    }

    #[test]
    fn bilinear_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([1, 2, 3, 4], 1.0, &mut rng);
        let u = Tensor::<f64>::randn([1, 2, 6, 8], 1.0, &mut rng);
        let lhs = bilinear_upsample(&x, 2).unwrap().dot(&u).unwrap();
        let rhs = x.dot(&bilinear_upsample_adjoint(&u, 2, (3, 4)).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([4, 3, 5, 5], 2.0, &mut rng).map(|v| v + 1.5);
        let (g, b) = (Tensor::ones([3, 1, 1, 1]), Tensor::zeros([3, 1, 1, 1]));
        let mut rm = Tensor::zeros([3, 1, 1, 1]);
        let mut rv = Tensor::ones([3, 1, 1, 1]);

        let y = batchnorm(&x, &g, &b, &mut rm, &mut rv, BnMode::Eval, 0.1, BN_EPS).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);

        let y = batchnorm(&x, &g, &b, &mut rm.clone(), &mut rv.clone(), BnMode::Train, 0.1, BN_EPS).unwrap();
        for j in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|i| y.plane(i, j).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }

        let (rm0, rv0) = (rm.clone(), rv.clone());
        batchnorm(&x, &g, &b, &mut rm, &mut rv, BnMode::Train, 0.0, BN_EPS).unwrap();
        assert_eq!((rm.clone(), rv.clone()), (rm0, rv0));
        batchnorm(&x, &g, &b, &mut rm, &mut rv, BnMode::Train, 0.1, BN_EPS).unwrap();
        assert!(rm.data()[0] > 0.1);

        assert!(batchnorm_train(&x, &Tensor::ones([2, 1, 1, 1]), &b, BN_EPS).is_err());
    }
}
