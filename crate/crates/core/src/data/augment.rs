//! Random rotation, shift and horizontal flip applied identically to an image
//! (bilinear) and its mask (nearest neighbour). Pixels mapped from outside the
//! source become black / background.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::loss::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Shift drawn uniformly from `±shift` of the image size, per axis.
    pub shift: f64,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 15.0,
            shift: 0.1,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A config that never changes a sample.
    pub fn identity() -> Self {
        Self {
            enabled: true,
            rotation_deg: 0.0,
            shift: 0.0,
            hflip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg.is_nan() || self.rotation_deg < 0.0 || self.shift.is_nan() || self.shift < 0.0 {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "hflip_prob must be in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// Mirror image and mask left-right. An exact involution.
pub fn hflip(sample: &SegSample) -> SegSample {
    let [_, c, h, w] = sample.image.shape();
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    for row in image.data_mut().chunks_mut(w).take(c * h) {
        row.reverse();
    }
    for row in mask.data_mut().chunks_mut(w) {
        row.reverse();
    }
    SegSample {
        name: sample.name.clone(),
        image,
        mask,
    }
}

/// Rotate by `theta` radians about the centre, then translate by `(tx, ty)` pixels.
fn warp(sample: &SegSample, theta: f64, tx: f64, ty: f64) -> SegSample {
    let [_, c, h, w] = sample.image.shape();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = sample.image.data();
    let src_mask = sample.mask.data();
    let mut image = vec![0f32; c * h * w];
    let mut mask = vec![0u8; h * w];
    let sample_px = |plane: usize, xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            src[plane * h * w + yi as usize * w + xi as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            // Inverse map: undo the shift, then rotate back.
            let (dx, dy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (nx, ny) = (sx.round() as i64, sy.round() as i64);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                mask[y * w + x] = src_mask[ny as usize * w + nx as usize];
            }
            let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for plane in 0..c {
                let v00 = sample_px(plane, x0, y0);
                let v01 = sample_px(plane, x0 + 1, y0);
                let v10 = sample_px(plane, x0, y0 + 1);
                let v11 = sample_px(plane, x0 + 1, y0 + 1);
                let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
                image[plane * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    SegSample {
        name: sample.name.clone(),
        image: Tensor::from_vec([1, c, h, w], image).expect("shape preserved"),
        mask: LabelMap::new([1, h, w], mask).expect("shape preserved"),
    }
}

/// One random draw of rotation, shift and flip.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegSample {
    if !cfg.enabled {
        return sample.clone();
    }
    let [h, w] = sample.hw();
    let theta = if cfg.rotation_deg > 0.0 {
        rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
    } else {
        0.0
    };
    let (tx, ty) = if cfg.shift > 0.0 {
        (
            rng.gen_range(-cfg.shift..=cfg.shift) * w as f64,
            rng.gen_range(-cfg.shift..=cfg.shift) * h as f64,
        )
    } else {
        (0.0, 0.0)
    };
    let flip = cfg.hflip_prob > 0.0 && rng.gen::<f64>() < cfg.hflip_prob;
    let mut out = if theta == 0.0 && tx == 0.0 && ty == 0.0 {
        sample.clone()
    } else {
        warp(sample, theta, tx, ty)
    };
    if flip {
        out = hflip(&out);
    }
    out
}
