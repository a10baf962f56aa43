use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, transpose};
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Static description of a 2-D convolution with square kernels and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
            bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    /// Per-channel `k×k` convolution with "same" padding.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride, kernel / 2)
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if kernel < 1 || stride < 1 || groups < 1 {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs kernel, stride and groups >= 1, got {self:?}"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }

    /// `[d2, d1/g, k, k]`.
    pub fn weight_shape(&self) -> Shape {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Weight shape when this spec is used for a transposed convolution: `[d1, d2, k, k]`.
    pub fn transposed_weight_shape(&self) -> Shape {
        [self.in_channels, self.out_channels, self.kernel, self.kernel]
    }

    pub fn out_dim(&self, dim: usize) -> Option<usize> {
        let padded = dim + 2 * self.padding;
        if padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [n, _, h, w] = input;
        match (self.out_dim(h), self.out_dim(w)) {
            (Some(oh), Some(ow)) => Ok([n, self.out_channels, oh, ow]),
            _ => Err(Error::InvalidArgument(format!(
                "kernel {} larger than padded input {h}x{w}",
                self.kernel
            ))),
        }
    }

    pub fn transposed_out_dim(&self, dim: usize) -> Option<usize> {
        let full = dim.checked_sub(1)? * self.stride + self.kernel;
        full.checked_sub(2 * self.padding).filter(|&d| d > 0)
    }

    pub fn transposed_output_shape(&self, input: Shape) -> Result<Shape> {
        let [n, _, h, w] = input;
        match (self.transposed_out_dim(h), self.transposed_out_dim(w)) {
            (Some(oh), Some(ow)) => Ok([n, self.out_channels, oh, ow]),
            _ => Err(Error::InvalidArgument(format!(
                "transposed conv of {h}x{w} with k={} s={} p={} has non-positive size",
                self.kernel, self.stride, self.padding
            ))),
        }
    }

    /// The convolution whose adjoint is the transposed convolution described by `self`.
    fn adjoint_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            bias: false,
            ..*self
        }
    }

    fn is_unit_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn check_input<T: Element>(layer: &str, x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.c() != channels {
        return Err(Error::shape(layer, format!("[*, {channels}, *, *]"), x.shape()));
    }
    Ok(())
}

fn check_weights<T: Element>(
    layer: &str,
    spec: &ConvSpec,
    w: &Tensor<T>,
    expected: Shape,
    b: Option<&Tensor<T>>,
) -> Result<()> {
    spec.validate()?;
    if w.shape() != expected {
        return Err(Error::shape(format!("{layer} weight"), expected, w.shape()));
    }
    if let Some(b) = b {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!("{layer} bias"), spec.out_channels, b.shape()));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let [n, c, h, w] = y.shape();
    let hw = h * w;
    let bias = b.data();
    for (idx, plane) in y.data_mut().chunks_mut(hw).enumerate() {
        let bv = bias[idx % c];
        for v in plane {
            *v = *v + bv;
        }
    }
    debug_assert_eq!(y.len(), n * c * hw);
}

/// Unfold the `channels` planes of `x` (contiguous, `[channels, h, w]`) into a
/// `[channels·k·k, oh·ow]` column matrix.
fn im2col<T: Element>(x: &[T], channels: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<T> {
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let p_cols = oh * ow;
    let mut cols = vec![T::zero(); channels * k * k * p_cols];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p_cols..(row + 1) * p_cols];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[channels, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let p_cols = oh * ow;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p_cols..(row + 1) * p_cols];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose tap `kx` lands inside `[0, w)`.
fn valid_cols(kx: usize, s: usize, p: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if w + p < kx + 1 {
        0
    } else {
        ((w + p - kx - 1) / s + 1).min(ow)
    };
    lo..hi.max(lo)
}

/// Standard or grouped 2-D convolution, zero padded. Weight `[d2, d1/g, k, k]`.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_weights("conv2d", spec, w, spec.weight_shape(), b)?;
    check_input("conv2d", x, spec.in_channels)?;
    let out_shape = spec.output_shape(x.shape())?;
    let mut y = if spec.is_depthwise() {
        depthwise_forward(x, w, spec, out_shape)
    } else {
        grouped_forward(x, w, spec, out_shape)
    };
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Depthwise convolution (`groups = d1 = d2`), weight `[d1, 1, k, k]`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.groups != spec.in_channels || spec.out_channels != spec.in_channels {
        return Err(Error::InvalidArgument(format!(
            "depthwise conv needs groups = in = out channels, got groups {} for {}->{}",
            spec.groups, spec.in_channels, spec.out_channels
        )));
    }
    conv2d(x, w, b, spec)
}

fn grouped_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, out_shape: Shape) -> Tensor<T> {
    let [_, d1, h, wd] = x.shape();
    let [_, d2, oh, ow] = out_shape;
    let g = spec.groups;
    let (cin, cout) = (d1 / g, d2 / g);
    let kk = cin * spec.kernel * spec.kernel;
    let mut y = Tensor::zeros(out_shape);
    let out_sample = d2 * oh * ow;
    for (i, ys) in y.data_mut().chunks_mut(out_sample).enumerate() {
        let xs = &x.data()[i * d1 * h * wd..(i + 1) * d1 * h * wd];
        for grp in 0..g {
            let xg = &xs[grp * cin * h * wd..(grp + 1) * cin * h * wd];
            let wg = &w.data()[grp * cout * kk..(grp + 1) * cout * kk];
            let yg = &mut ys[grp * cout * oh * ow..(grp + 1) * cout * oh * ow];
            if spec.is_unit_pointwise() {
                gemm(cout, oh * ow, kk, wg, xg, yg);
            } else {
                let cols = im2col(xg, cin, h, wd, spec, oh, ow);
                gemm(cout, oh * ow, kk, wg, &cols, yg);
            }
        }
    }
    y
}

fn depthwise_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, out_shape: Shape) -> Tensor<T> {
    let [_, c, h, wd] = x.shape();
    let [_, _, oh, ow] = out_shape;
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut y = Tensor::zeros(out_shape);
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, out)| {
            let ch = plane_idx % c;
            let inp = &x.data()[plane_idx * h * wd..(plane_idx + 1) * h * wd];
            let wk = &w.data()[ch * k * k..(ch + 1) * k * k];
            for oy in 0..oh {
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &inp[iy as usize * wd..(iy as usize + 1) * wd];
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let cols = valid_cols(kx, s, p, wd, ow);
                        if s == 1 {
                            let off = cols.start + kx - p;
                            let src = &irow[off..off + cols.len()];
                            for (o, &v) in orow[cols].iter_mut().zip(src) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for ox in cols {
                                let ix = ox * s + kx - p;
                                orow[ox] = orow[ox] + wv * irow[ix];
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Reference direct-loop convolution. Slow; the public contract the fast paths match.
pub fn conv2d_direct<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_weights("conv2d", spec, w, spec.weight_shape(), b)?;
    check_input("conv2d", x, spec.in_channels)?;
    let out_shape = spec.output_shape(x.shape())?;
    let [n, _, h, wd] = x.shape();
    let [_, d2, oh, ow] = out_shape;
    let cin = spec.in_channels / spec.groups;
    let cout = d2 / spec.groups;
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    let mut y = Tensor::zeros(out_shape);
    for i in 0..n {
        for co in 0..d2 {
            let grp = co / cout;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize * s - p + ky;
                                let ix = ox as isize * s - p + kx;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.at([i, grp * cin + ci, iy as usize, ix as usize]);
                                let wv = w.at([co, ci, ky as usize, kx as usize]);
                                acc = acc + wv * xv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc = acc + b.data()[co];
                    }
                    y.set([i, co, oy, ox], acc);
                }
            }
        }
    }
    Ok(y)
}

/// Gradient of `conv2d` with respect to its input: `Aᵀ·dy` where `A` is the
/// linear map `x ↦ conv2d(x, w)`.
pub fn conv2d_backward_input<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    check_weights("conv2d backward", spec, w, spec.weight_shape(), None)?;
    check_input("conv2d backward", dy, spec.out_channels)?;
    let (h, wd) = in_hw;
    let [n, d2, oh, ow] = dy.shape();
    let expect = spec.output_shape([n, spec.in_channels, h, wd])?;
    if expect != dy.shape() {
        return Err(Error::shape("conv2d backward", expect, dy.shape()));
    }
    let d1 = spec.in_channels;
    let mut dx = Tensor::zeros([n, d1, h, wd]);
    if spec.is_depthwise() {
        depthwise_backward_input(dy, w, spec, &mut dx);
        return Ok(dx);
    }
    let g = spec.groups;
    let (cin, cout) = (d1 / g, d2 / g);
    let kk = cin * spec.kernel * spec.kernel;
    for i in 0..n {
        let dys = &dy.data()[i * d2 * oh * ow..(i + 1) * d2 * oh * ow];
        let dxs = &mut dx.data_mut()[i * d1 * h * wd..(i + 1) * d1 * h * wd];
        for grp in 0..g {
            let wg = &w.data()[grp * cout * kk..(grp + 1) * cout * kk];
            let wt = transpose(cout, kk, wg);
            let dyg = &dys[grp * cout * oh * ow..(grp + 1) * cout * oh * ow];
            let dxg = &mut dxs[grp * cin * h * wd..(grp + 1) * cin * h * wd];
            if spec.is_unit_pointwise() {
                gemm(kk, oh * ow, cout, &wt, dyg, dxg);
            } else {
                let mut cols = vec![T::zero(); kk * oh * ow];
                gemm(kk, oh * ow, cout, &wt, dyg, &mut cols);
                col2im(&cols, cin, h, wd, spec, oh, ow, dxg);
            }
        }
    }
    Ok(dx)
}

fn depthwise_backward_input<T: Element>(dy: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, dx: &mut Tensor<T>) {
    let [_, c, oh, ow] = dy.shape();
    let [_, _, h, wd] = dx.shape();
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    dx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(plane_idx, dxp)| {
            let ch = plane_idx % c;
            let g = &dy.data()[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
            let wk = &w.data()[ch * k * k..(ch + 1) * k * k];
            for oy in 0..oh {
                let grow = &g[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dxp[iy as usize * wd..(iy as usize + 1) * wd];
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        for ox in valid_cols(kx, s, p, wd, ow) {
                            let ix = ox * s + kx - p;
                            drow[ix] = drow[ix] + wv * grow[ox];
                        }
                    }
                }
            }
        });
}

/// Gradient of `conv2d` with respect to its weight, summed over the batch.
pub fn conv2d_backward_weight<T: Element>(x: &Tensor<T>, dy: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    check_input("conv2d backward", x, spec.in_channels)?;
    let expect = spec.output_shape(x.shape())?;
    if expect != dy.shape() {
        return Err(Error::shape("conv2d backward", expect, dy.shape()));
    }
    let [n, d1, h, wd] = x.shape();
    let [_, d2, oh, ow] = dy.shape();
    let mut dw = Tensor::zeros(spec.weight_shape());
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    if spec.is_depthwise() {
        let c = d1;
        dw.data_mut().par_chunks_mut(k * k).enumerate().for_each(|(ch, dwk)| {
            for i in 0..n {
                let xp = x.plane(i, ch);
                let gp = dy.plane(i, ch);
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xp[iy as usize * wd..];
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            for ox in valid_cols(kx, s, p, wd, ow) {
                                acc = acc + grow[ox] * xrow[ox * s + kx - p];
                            }
                        }
                        dwk[ky * k + kx] = dwk[ky * k + kx] + acc;
                    }
                }
            }
            debug_assert!(ch < c);
        });
        return Ok(dw);
    }
    let g = spec.groups;
    let (cin, cout) = (d1 / g, d2 / g);
    let kk = cin * k * k;
    for i in 0..n {
        let xs = &x.data()[i * d1 * h * wd..(i + 1) * d1 * h * wd];
        let dys = &dy.data()[i * d2 * oh * ow..(i + 1) * d2 * oh * ow];
        for grp in 0..g {
            let xg = &xs[grp * cin * h * wd..(grp + 1) * cin * h * wd];
            let dyg = &dys[grp * cout * oh * ow..(grp + 1) * cout * oh * ow];
            let cols_t = if spec.is_unit_pointwise() {
                transpose(cin, h * wd, xg)
            } else {
                let cols = im2col(xg, cin, h, wd, spec, oh, ow);
                transpose(kk, oh * ow, &cols)
            };
            let dwg = &mut dw.data_mut()[grp * cout * kk..(grp + 1) * cout * kk];
            gemm(cout, kk, oh * ow, dyg, &cols_t, dwg);
        }
    }
    Ok(dw)
}

/// Transposed convolution, weight `[d1, d2, k, k]`: the exact adjoint of
/// `conv2d` mapping `d2 → d1` channels with the same kernel, stride and padding.
pub fn transposed_conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.groups != 1 {
        return Err(Error::InvalidArgument(
            "grouped transposed conv is not supported".into(),
        ));
    }
    if w.shape() != spec.transposed_weight_shape() {
        return Err(Error::shape(
            "transposed_conv2d weight",
            spec.transposed_weight_shape(),
            w.shape(),
        ));
    }
    check_input("transposed_conv2d", x, spec.in_channels)?;
    let [_, _, oh, ow] = spec.transposed_output_shape(x.shape())?;
    conv2d_backward_input(x, w, &spec.adjoint_conv(), (oh, ow))
}

/// Weight gradient of [`transposed_conv2d`] given the input `x` and output gradient `dy`.
pub fn transposed_conv2d_backward_weight<T: Element>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv2d_backward_weight(dy, x, &spec.adjoint_conv())
}

/// Input gradient of [`transposed_conv2d`]: the forward convolution of `dy`.
pub(crate) fn transposed_conv2d_backward_input<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv2d(dy, w, None, &spec.adjoint_conv())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn same_padding_shape() {
        let spec = ConvSpec::new(3, 5, 3, 1, 1);
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let w = Tensor::ones(spec.weight_shape());
        let y = conv2d(&x, &w, Some(&Tensor::zeros([5, 1, 1, 1])), &spec).unwrap();
        assert_eq!(y.shape(), [1, 5, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_scales() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0);
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let spec = ConvSpec::new(4, 5, 3, 1, 1);
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let w = Tensor::ones(spec.weight_shape());
        let msg = conv2d(&x, &w, None, &spec).unwrap_err().to_string();
        assert!(
            msg.contains("conv2d") && msg.contains("[1, 3, 8, 8]") && msg.contains("4"),
            "{msg}"
        );
        let bad_w = Tensor::<f32>::ones([5, 4, 1, 1]);
        let msg = conv2d(&Tensor::zeros([1, 4, 8, 8]), &bad_w, None, &spec)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("[5, 4, 3, 3]") && msg.contains("[5, 4, 1, 1]"), "{msg}");
    }

    #[test]
    fn invalid_groups_rejected() {
        let spec = ConvSpec::new(4, 6, 3, 1, 1).with_groups(4);
        assert!(spec.validate().is_err());
        let dw = ConvSpec::new(4, 4, 3, 1, 1).with_groups(2);
        let err = depthwise_conv2d(
            &Tensor::<f32>::zeros([1, 4, 4, 4]),
            &Tensor::zeros(dw.weight_shape()),
            None,
            &dw,
        );
        assert!(err.is_err());
    }

    #[test]
    fn depthwise_identity_and_shape() {
        let mut r = rng();
        let spec = ConvSpec::new(2, 2, 1, 1, 0).with_groups(2);
        let x = Tensor::<f32>::randn([1, 2, 4, 4], 1.0, &mut r);
        let y = depthwise_conv2d(&x, &Tensor::ones([2, 1, 1, 1]), None, &spec).unwrap();
        assert_eq!(y, x);

        let spec = ConvSpec::depthwise(2, 3, 2);
        let y = depthwise_conv2d(&x, &Tensor::ones(spec.weight_shape()), None, &spec).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2]);
    }

    #[test]
    fn depthwise_channels_independent() {
        let mut r = rng();
        let spec = ConvSpec::depthwise(3, 3, 1);
        let x = Tensor::<f64>::randn([2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        let mut x2 = x.clone();
        for i in 0..2 {
            for yy in 0..5 {
                for xx in 0..5 {
                    x2.set([i, 1, yy, xx], 0.0);
                }
            }
        }
        let y2 = conv2d(&x2, &w, None, &spec).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let same = y.plane(i, c) == y2.plane(i, c);
                assert_eq!(same, c != 1, "channel {c}");
            }
        }
    }

    #[test]
    fn fast_paths_match_direct_bitwise() {
        let mut r = rng();
        let specs = [
            ConvSpec::new(3, 5, 3, 1, 1).with_bias(true),
            ConvSpec::new(3, 4, 3, 2, 1),
            ConvSpec::new(6, 4, 1, 1, 0),
            ConvSpec::new(6, 4, 2, 2, 0),
            ConvSpec::new(4, 6, 3, 1, 0).with_groups(2),
            ConvSpec::depthwise(5, 3, 1),
            ConvSpec::depthwise(5, 3, 2),
            ConvSpec::depthwise(3, 5, 2),
        ];
        for spec in specs {
            let x = Tensor::<f64>::randn([2, spec.in_channels, 7, 6], 1.0, &mut r);
            let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
            let b = spec
                .bias
                .then(|| Tensor::randn([spec.out_channels, 1, 1, 1], 1.0, &mut r));
            let fast = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
            let slow = conv2d_direct(&x, &w, b.as_ref(), &spec).unwrap();
            assert_eq!(fast, slow, "{spec:?}");
        }
    }

    #[test]
    fn transposed_single_cover() {
        let spec = ConvSpec::new(1, 1, 2, 2, 0);
        let x = Tensor::<f32>::ones([1, 1, 2, 2]);
        let y = transposed_conv2d(&x, &Tensor::ones([1, 1, 2, 2]), &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));

        let z = transposed_conv2d(&Tensor::<f32>::zeros([1, 1, 3, 3]), &Tensor::ones([1, 1, 2, 2]), &spec).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_rejects_empty_output() {
        let spec = ConvSpec::new(1, 1, 1, 1, 1);
        let x = Tensor::<f32>::ones([1, 1, 1, 1]);
        assert!(transposed_conv2d(&x, &Tensor::ones([1, 1, 1, 1]), &spec).is_err());
    }

    #[test]
    fn transposed_matches_backward_input() {
        let mut r = rng();
        let spec = ConvSpec::new(2, 3, 3, 2, 1);
        let x = Tensor::<f64>::randn([1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(spec.transposed_weight_shape(), 1.0, &mut r);
        let y = transposed_conv2d(&x, &w, &spec).unwrap();
        let adj = ConvSpec::new(3, 2, 3, 2, 1);
        let oracle = conv2d_backward_input(&x, &w, &adj, (y.h(), y.w())).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn valid_cols_covers_in_bounds_taps() {
        for s in 1..4 {
            for p in 0..3 {
                for k in 1..5 {
                    for w in 1..9 {
                        let Some(ow) = (ConvSpec {
                            padding: p,
                            stride: s,
                            kernel: k,
                            ..ConvSpec::pointwise(1, 1)
                        })
                        .out_dim(w) else {
                            continue;
                        };
                        for kx in 0..k {
                            let r = valid_cols(kx, s, p, w, ow);
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p as isize;
                                assert_eq!(
                                    r.contains(&ox),
                                    ix >= 0 && ix < w as isize,
                                    "s{s} p{p} k{k} w{w} kx{kx} ox{ox}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}
