//! Procedural stand-in for surgical frames: instrument-like shapes on a
//! textured tissue background, with a small foreground fraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng_for, SegSample};
use crate::error::{Error, Result};
use crate::loss::LabelMap;
use crate::tensor::Tensor;

/// Shape kinds, assigned to foreground classes in rotation.
pub const SHAPE_KINDS: [&str; 3] = ["bar", "wedge", "ellipse"];

struct Shape {
    class: u8,
    kind: usize,
    cx: f64,
    cy: f64,
    /// Half-length along the major axis.
    a: f64,
    /// Half-width.
    b: f64,
    cos: f64,
    sin: f64,
    tint: [f32; 3],
}

impl Shape {
    fn random(class: u8, num_fg: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = h.min(w) as f64;
        let kind = (class as usize - 1) % SHAPE_KINDS.len();
        let (a, b) = match kind {
            0 => (rng.gen_range(0.18..0.28) * s, rng.gen_range(0.05..0.07) * s),
            1 => (rng.gen_range(0.16..0.21) * s, rng.gen_range(0.10..0.14) * s),
            _ => (rng.gen_range(0.12..0.18) * s, rng.gen_range(0.07..0.10) * s),
        };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let margin = 0.6 * a;
        // Metallic grey with a class-dependent tint so classes sharing a kind stay separable.
        let hue = (class as usize - 1) as f32 / num_fg.max(1) as f32;
        let base = rng.gen_range(0.55f32..0.7);
        Self {
            class,
            kind,
            cx: rng.gen_range(margin..(w as f64 - margin).max(margin + 1.0)),
            cy: rng.gen_range(margin..(h as f64 - margin).max(margin + 1.0)),
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
            tint: [base + 0.25 * hue, base + 0.1 * (1.0 - hue), base + 0.3 * (1.0 - hue)],
        }
    }

    /// Local coordinates: `u` along the major axis, `v` across it.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        match self.kind {
            0 => u.abs() <= self.a && v.abs() <= self.b,
            // Isosceles triangle: apex at u = +a, base of half-width b at u = −a.
            1 => u.abs() <= self.a && v.abs() <= self.b * (self.a - u) / (2.0 * self.a),
            _ => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
        }
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng) -> [(f64, f64, f64, f64); 3] {
    std::array::from_fn(|_| {
        (
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.03..0.08),
        )
    })
}

fn one_sample(index: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Result<SegSample> {
    let mut rng = rng_for(&[seed, index as u64]);
    let num_fg = num_classes - 1;
    // Guarantee every class shows up by cycling through them; add a second shape half the time.
    let mut classes = vec![1 + (index % num_fg) as u8];
    if num_fg > 1 && rng.gen_bool(0.5) {
        classes.push(rng.gen_range(1..=num_fg) as u8);
    }
    let shapes: Vec<Shape> = classes
        .iter()
        .map(|&c| Shape::random(c, num_fg, h, w, &mut rng))
        .collect();

    let tissue = [
        rng.gen_range(0.55f64..0.75),
        rng.gen_range(0.2..0.35),
        rng.gen_range(0.2..0.3),
    ];
    let waves = smooth_noise(&mut rng);
    let shadow_offset = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let highlight = rng.gen_bool(0.7);
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + ph).sin())
                .sum();
            let vignette = 1.0 - 0.25 * ((fx - 0.5).powi(2) + (fy - 0.5).powi(2));
            let grain: f64 = rng.gen_range(-0.02..0.02);
            let mut px = tissue.map(|t| (t + texture + grain) * vignette);
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            // Later shapes occlude earlier ones.
            let hit = shapes.iter().rev().find(|s| s.contains(xc, yc));
            match hit {
                Some(s) => {
                    mask[y * w + x] = s.class;
                    let (u, v) = s.local(xc, yc);
                    // Cylindrical shading across the instrument, optional specular streak.
                    let shade = 1.0 - 0.35 * (v / s.b).powi(2).min(1.0);
                    let spec = if highlight {
                        0.25 * (-((v / s.b + 0.3) * 4.0).powi(2)).exp()
                    } else {
                        0.0
                    };
                    let stripe = if u.rem_euclid(6.0) < 1.0 { -0.05 } else { 0.0 };
                    for (v, &t) in px.iter_mut().zip(&s.tint) {
                        *v = t as f64 * shade + spec + stripe + grain;
                    }
                }
                None => {
                    let (sx, sy) = (xc - shadow_offset.0, yc - shadow_offset.1);
                    if shapes.iter().any(|s| s.contains(sx, sy)) {
                        px = px.map(|v| v * 0.6);
                    }
                }
            }
            for c in 0..3 {
                image[c * h * w + y * w + x] = px[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    SegSample::new(
        format!("synth{index:05}"),
        Tensor::from_vec([1, 3, h, w], image)?,
        LabelMap::new([1, h, w], mask)?,
    )
}

/// `n` samples of size `[h, w]`. Sample `i` depends only on `(seed, i)`.
pub fn synth_shapes(n: usize, size: [usize; 2], num_classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    if !(2..=256).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs 2..=256 classes, got {num_classes}"
        )));
    }
    let [h, w] = size;
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images must be at least 8x8, got {w}x{h}"
        )));
    }
    (0..n).map(|i| one_sample(i, h, w, num_classes, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = synth_shapes(4, [32, 40], 4, 9).unwrap();
        assert_eq!(a, synth_shapes(4, [32, 40], 4, 9).unwrap());
        assert_ne!(a, synth_shapes(4, [32, 40], 4, 10).unwrap());
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_shapes(1, [16, 16], 1, 0).is_err());
    }

    #[test]
    fn images_in_unit_range() {
        for s in synth_shapes(6, [24, 24], 3, 0).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v < 3));
        }
    }
}
