//! Focal loss over per-pixel class logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Integer class-index masks, `[n, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("label map", shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], class: u8) -> Self {
        Self {
            shape,
            data: vec![class; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[&LabelMap]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero label maps".into()))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * h * w);
        let mut n = 0;
        for m in items {
            if m.shape[1..] != first.shape[1..] {
                return Err(Error::shape("label stack", first.shape, m.shape));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Ok(Self { shape: [n, h, w], data })
    }

    /// Per-pixel argmax over the channel axis of `[n, c, h, w]` scores.
    pub fn argmax<T: Element>(scores: &Tensor<T>) -> Self {
        let [n, c, h, w] = scores.shape();
        let hw = h * w;
        let mut data = vec![0u8; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = scores.data()[i * c * hw + p];
                for j in 1..c {
                    let v = scores.data()[(i * c + j) * hw + p];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                data[i * hw + p] = best as u8;
            }
        }
        Self { shape: [n, h, w], data }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    /// Focusing exponent; 0 recovers cross-entropy.
    pub gamma: f64,
    pub ignore_index: Option<u8>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 6.0,
            ignore_index: None,
        }
    }
}

impl FocalConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Floor on `p_t` inside the logarithm.
pub const PT_FLOOR: f64 = 1e-12;

/// Stabilised per-pixel quantities: `log p_t` (floored), `1 − p_t` summed from
/// the other classes, and whether the floor was hit.
struct PixelTerms {
    log_pt: f64,
    one_minus_pt: f64,
    floored: bool,
}

fn pixel_terms(logits: &[f64], target: usize) -> PixelTerms {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + denom.ln();
    let raw = logits[target] - lse;
    let floor = PT_FLOOR.ln();
    let one_minus_pt = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &z)| (z - lse).exp())
        .sum::<f64>()
        .min(1.0);
    PixelTerms {
        // `f64::max` would swallow a NaN; keep it so the trainer can abort.
        log_pt: if raw.is_nan() { raw } else { raw.max(floor) },
        one_minus_pt,
        floored: raw < floor,
    }
}

fn check_target<T: Element>(logits: &Tensor<T>, target: &LabelMap, cfg: &FocalConfig) -> Result<()> {
    cfg.validate()?;
    let [n, _, h, w] = logits.shape();
    if target.shape() != [n, h, w] {
        return Err(Error::shape("focal_loss target", [n, h, w], target.shape()));
    }
    Ok(())
}

/// Visit every valid pixel with its logits (as f64) and target class.
fn for_each_pixel<T: Element>(
    logits: &Tensor<T>,
    target: &LabelMap,
    cfg: &FocalConfig,
    mut f: impl FnMut(usize, usize, &[f64], usize),
) -> Result<usize> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut z = vec![0.0; c];
    let mut valid = 0;
    for i in 0..n {
        for p in 0..hw {
            let t = target.data()[i * hw + p];
            if cfg.ignore_index == Some(t) {
                continue;
            }
            if t as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "target class {t} out of range for {c} classes (sample {i}, pixel {p})"
                )));
            }
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = logits.data()[(i * c + j) * hw + p].as_f64();
            }
            f(i, p, &z, t as usize);
            valid += 1;
        }
    }
    Ok(valid)
}

/// Per-pixel focal loss `−(1−p_t)^γ · log p_t`, `[n, 1, h, w]`; ignored pixels are 0.
pub fn focal_loss_per_pixel<T: Element>(logits: &Tensor<T>, target: &LabelMap, cfg: &FocalConfig) -> Result<Tensor<T>> {
    check_target(logits, target, cfg)?;
    let [n, _, h, w] = logits.shape();
    let mut out = Tensor::zeros([n, 1, h, w]);
    let hw = h * w;
    for_each_pixel(logits, target, cfg, |i, p, z, t| {
        let terms = pixel_terms(z, t);
        let v = -terms.one_minus_pt.powf(cfg.gamma) * terms.log_pt;
        out.data_mut()[i * hw + p] = T::from_f64(v);
    })?;
    Ok(out)
}

/// Mean focal loss over pixels whose target is not `ignore_index`.
pub fn focal_loss_forward<T: Element>(logits: &Tensor<T>, target: &LabelMap, cfg: &FocalConfig) -> Result<T> {
    check_target(logits, target, cfg)?;
    let mut total = 0.0;
    let valid = for_each_pixel(logits, target, cfg, |_, _, z, t| {
        let terms = pixel_terms(z, t);
        total += -terms.one_minus_pt.powf(cfg.gamma) * terms.log_pt;
    })?;
    Ok(T::from_f64(if valid == 0 { 0.0 } else { total / valid as f64 }))
}

/// Gradient of [`focal_loss_forward`] with respect to the logits.
pub fn focal_loss_backward<T: Element>(logits: &Tensor<T>, target: &LabelMap, cfg: &FocalConfig) -> Result<Tensor<T>> {
    check_target(logits, target, cfg)?;
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let gamma = cfg.gamma;
    let mut grad = vec![0.0f64; n * c * hw];
    let valid = for_each_pixel(logits, target, cfg, |i, p, z, t| {
        let terms = pixel_terms(z, t);
        let pt = terms.log_pt.exp();
        let q = terms.one_minus_pt;
        // dL/dz_j = coef · (δ_jt − p_j), coef = γ(1−p)^(γ−1)·p·log p − (1−p)^γ·[not floored]
        let focus = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * terms.log_pt
        };
        let direct = if terms.floored { 0.0 } else { q.powf(gamma) };
        let coef = focus - direct;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        for j in 0..c {
            let pj = (z[j] - max).exp() / denom;
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[(i * c + j) * hw + p] = coef * (delta - pj);
        }
    })?;
    let scale = if valid == 0 { 0.0 } else { 1.0 / valid as f64 };
    Tensor::from_vec(
        logits.shape(),
        grad.into_iter().map(|v| T::from_f64(v * scale)).collect(),
    )
}
