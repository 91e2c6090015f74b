//! Training-time augmentation: flips, a random crop resized back to the
//! original extent, and brightness/contrast jitter on the image.

use rand::Rng as _;

use super::SegSample;
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const FLIP_PROBABILITY: f64 = 0.5;
/// Smallest retained fraction of the image area.
pub const MIN_CROP_AREA: f64 = 0.8;
/// Relative jitter of brightness and contrast.
pub const COLOR_JITTER: f64 = 0.1;

/// A crop window in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub crop: Crop,
    /// Multiplies every image value.
    pub brightness: f64,
    /// Scales deviations from the per-channel mean.
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            hflip: false,
            vflip: false,
            crop: Crop {
                top: 0,
                left: 0,
                height,
                width,
            },
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn draw(rng: &mut Rng, height: usize, width: usize) -> Self {
        let hflip = rng.random::<f64>() < FLIP_PROBABILITY;
        let vflip = rng.random::<f64>() < FLIP_PROBABILITY;
        let side = rng.random_range(MIN_CROP_AREA..=1.0f64).sqrt();
        let ch = ((height as f64 * side).round() as usize).clamp(1, height);
        let cw = ((width as f64 * side).round() as usize).clamp(1, width);
        let top = rng.random_range(0..=height - ch);
        let left = rng.random_range(0..=width - cw);
        let brightness = 1.0 + rng.random_range(-COLOR_JITTER..=COLOR_JITTER);
        let contrast = 1.0 + rng.random_range(-COLOR_JITTER..=COLOR_JITTER);
        Self {
            hflip,
            vflip,
            crop: Crop {
                top,
                left,
                height: ch,
                width: cw,
            },
            brightness,
            contrast,
        }
    }

    pub fn from_seed(seed: u64, index: u64, epoch: u64, height: usize, width: usize) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag::AUGMENT, epoch, index]);
        Self::draw(&mut rng, height, width)
    }
}

/// Applies `p`; geometric operations act on image and mask alike.
pub fn augment(sample: &SegSample, p: &AugmentParams) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if p.hflip {
        image = image.flip(2)?;
        mask = flip_mask(&mask, h, w, false);
    }
    if p.vflip {
        image = image.flip(1)?;
        mask = flip_mask(&mask, h, w, true);
    }
    if (p.crop.height, p.crop.width) != (h, w) {
        image = crop_resize_bilinear(&image, p.crop, h, w);
        mask = crop_resize_nearest(&mask, w, p.crop, h, w);
    }
    if p.contrast != 1.0 || p.brightness != 1.0 {
        image = color_jitter(&image, p.brightness, p.contrast);
    }
    SegSample::new(image, mask)
}

fn flip_mask(mask: &[u8], h: usize, w: usize, vertical: bool) -> Vec<u8> {
    let mut out = vec![0; mask.len()];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if vertical { (h - 1 - r, c) } else { (r, w - 1 - c) };
            out[r * w + c] = mask[sr * w + sc];
        }
    }
    out
}

/// Source index for output `i` of `out` when resampling `len` inputs.
fn nearest(i: usize, out: usize, len: usize) -> usize {
    ((i * len) / out).min(len - 1)
}

pub fn crop_resize_nearest(mask: &[u8], src_w: usize, crop: Crop, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = crop.top + nearest(r, h, crop.height);
        for c in 0..w {
            out.push(mask[sr * src_w + crop.left + nearest(c, w, crop.width)]);
        }
    }
    out
}

/// Half-pixel-centre bilinear resampling of the crop window of `[C,H,W]`.
pub fn crop_resize_bilinear(image: &Tensor, crop: Crop, h: usize, w: usize) -> Tensor {
    let s = image.shape();
    let (ch, sw) = (s[0], s[2]);
    let src = image.data();
    let plane = s[1] * sw;
    let axis = |i: usize, out: usize, len: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Tensor::zeros([ch, h, w]);
    let dst = out.data_mut();
    for r in 0..h {
        let (r0, r1, fr) = axis(r, h, crop.height);
        let (r0, r1) = (crop.top + r0, crop.top + r1);
        for c in 0..w {
            let (c0, c1, fc) = axis(c, w, crop.width);
            let (c0, c1) = (crop.left + c0, crop.left + c1);
            for k in 0..ch {
                let at = |rr: usize, cc: usize| src[k * plane + rr * sw + cc];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                dst[(k * h + r) * w + c] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

/// `clamp(β·(γ·v + (1−γ)·μ_c), 0, 1)` with `μ_c` the channel mean.
pub fn color_jitter(image: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let s = image.shape();
    let plane = s[1] * s[2];
    let mut out = image.clone();
    for ch in out.data_mut().chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        for v in ch {
            *v = (brightness * (contrast * *v + (1.0 - contrast) * mean)).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::gen_sample;

    #[test]
    fn identity_params_are_identity() {
        let s = gen_sample(2, 0, 32, 40).unwrap();
        let out = augment(&s, &AugmentParams::identity(32, 40)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn hflip_maps_columns() {
        let s = gen_sample(2, 1, 32, 36).unwrap();
        let mut p = AugmentParams::identity(32, 36);
        p.hflip = true;
        let out = augment(&s, &p).unwrap();
        for r in 0..32 {
            for c in 0..36 {
                assert_eq!(out.mask[r * 36 + c], s.mask[r * 36 + 35 - c]);
                for k in 0..3 {
                    let idx = |cc: usize| (k * 32 + r) * 36 + cc;
                    assert_eq!(out.image.data()[idx(c)], s.image.data()[idx(35 - c)]);
                }
            }
        }
    }

    #[test]
    fn crops_keep_label_set() {
        let s = gen_sample(2, 2, 48, 48).unwrap();
        for seed in 0..20 {
            let p = AugmentParams::from_seed(seed, 0, 0, 48, 48);
            let out = augment(&s, &p).unwrap();
            assert!(out.mask.iter().all(|&m| m < 3));
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
