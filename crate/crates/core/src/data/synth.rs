//! Procedural oral-scene images with three classes: gum background (0),
//! teeth (1) and tongue (2).
//!
//! Every sample is a pure function of `(seed, index)`: its generator is
//! `rng::stream(seed, [DATA, index])`. Pixel values are quantised to multiples
//! of 1/255, so writing a sample to PPM and reading it back is lossless.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::SegSample;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const CLASSES: usize = 3;
pub const MIN_EXTENT: usize = 32;

pub const GUM: u8 = 0;
pub const TOOTH: u8 = 1;
pub const TONGUE: u8 = 2;

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    /// Semi-axis along the arc.
    a: f64,
    /// Semi-axis along the radius.
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius squared; `< 1` inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    /// `r / r(θ)`; `< 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let mut r = 1.0;
        for (k, &(amp, phase)) in self.harmonics.iter().enumerate() {
            r += amp * ((k as f64 + 2.0) * theta + phase).cos();
        }
        dx.hypot(dy) / (self.r0 * r)
    }
}

fn jitter(rng: &mut Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| v + rng.random_range(-amount..amount))
}

/// One sample of extent `height × width`.
pub fn gen_sample(seed: u64, index: u64, height: usize, width: usize) -> Result<SegSample> {
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return invalid(
            "gen_synthetic",
            format!("size {height}x{width} below the {MIN_EXTENT}x{MIN_EXTENT} minimum"),
        );
    }
    let mut rng = rng::stream(seed, &[rng::tag::DATA, index]);
    let (hf, wf) = (height as f64, width as f64);
    // Geometry lives in the unit square; x across, y down.
    let tongue = Blob {
        cx: 0.5 + rng.random_range(-0.1..0.1),
        cy: 0.74 + rng.random_range(-0.05..0.05),
        r0: rng.random_range(0.14..0.21),
        harmonics: std::array::from_fn(|_| (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI))),
    };

    let teeth_count = rng.random_range(4..=8usize);
    let coverage = rng.random_range(0.13..0.28);
    let aspect = rng.random_range(1.2..1.5);
    let a = (coverage / (teeth_count as f64 * PI * aspect)).sqrt();
    let b = a * aspect;
    let radius = rng.random_range(0.42..0.52);
    let arc_cx = 0.5 + rng.random_range(-0.05..0.05);
    let arc_cy = 0.84 + rng.random_range(-0.04..0.04);
    let spacing = a * rng.random_range(1.6..1.9);
    let half_span = (spacing * (teeth_count - 1) as f64 / radius / 2.0).min(62f64.to_radians());
    let step = 2.0 * half_span / (teeth_count - 1) as f64;
    let teeth: Vec<Ellipse> = (0..teeth_count)
        .map(|i| {
            let phi = -half_span + step * i as f64 + rng.random_range(-0.03..0.03);
            let scale = rng.random_range(0.88..1.12);
            Ellipse {
                cx: arc_cx + radius * phi.sin(),
                cy: arc_cy - radius * phi.cos(),
                a: a * scale,
                b: b * scale,
                cos: phi.cos(),
                sin: phi.sin(),
            }
        })
        .collect();

    let gum = jitter(&mut rng, [0.80, 0.45, 0.48], 0.05);
    let tongue_rgb = jitter(&mut rng, [0.70, 0.27, 0.33], 0.05);
    let enamel = jitter(&mut rng, [0.93, 0.89, 0.78], 0.04);
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.05..0.15);
    let (gdx, gdy) = (grad_angle.cos(), grad_angle.sin());

    let mut mask = vec![GUM; height * width];
    let mut rgb = vec![[0.0f64; 3]; height * width];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = ((c as f64 + 0.5) / wf, (r as f64 + 0.5) / hf);
            let p = r * width + c;
            let shade = 1.0 + grad_amp * ((x - 0.5) * gdx + (y - 0.5) * gdy) * 2.0;
            let mut px = gum.map(|v| v * shade);
            let rho = tongue.rho(x, y);
            if rho < 1.0 {
                mask[p] = TONGUE;
                let t = 1.0 - 0.15 * rho * rho;
                px = tongue_rgb.map(|v| v * t);
            }
            let inside = teeth.iter().map(|e| e.rho2(x, y)).fold(f64::INFINITY, f64::min);
            if inside < 1.0 {
                mask[p] = TOOTH;
                let t = 1.0 - 0.12 * inside;
                px = enamel.map(|v| v * t);
            }
            rgb[p] = px;
        }
    }

    // Sensor speckle, then debris and calculus specks that do not change the
    // annotation.
    let speckle = Normal::new(0.0, rng.random_range(0.02..0.05)).expect("positive deviation");
    for px in &mut rgb {
        let n = speckle.sample(&mut rng);
        for v in px.iter_mut() {
            *v *= 1.0 + n;
        }
    }
    let specks = rng.random_range(3..=12);
    for _ in 0..specks {
        let r = rng.random_range(0..height);
        let c = rng.random_range(0..width);
        let size = rng.random_range(0..=1usize);
        let tone = if rng.random::<f64>() < 0.5 {
            [0.97, 0.96, 0.92]
        } else {
            [0.85, 0.8, 0.55]
        };
        for rr in r..(r + size + 1).min(height) {
            for cc in c..(c + size + 1).min(width) {
                rgb[rr * width + cc] = tone;
            }
        }
    }

    let plane = height * width;
    let image = Tensor::from_fn([3, height, width], |i| {
        let v = rgb[i % plane][i / plane];
        f64::from(super::pnm::quantize(v)) / 255.0
    });
    SegSample::new(image, mask)
}

/// Samples `0..count` of `seed`.
pub fn gen_synthetic(seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<SegSample>> {
    (0..count as u64).map(|i| gen_sample(seed, i, height, width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = gen_sample(1, 0, 40, 48).unwrap();
        let b = gen_sample(1, 0, 40, 48).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
        assert!(a.mask.iter().all(|&m| (m as usize) < CLASSES));
        assert_ne!(gen_sample(1, 1, 40, 48).unwrap().mask, a.mask);
        assert!(gen_sample(1, 0, 16, 64).is_err());
    }
}
