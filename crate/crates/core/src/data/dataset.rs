//! On-disk synthetic dataset, splits, prompt sampling and the robustness
//! perturbations.
//!
//! Layout: `images/NNNNNN.ppm`, `masks/NNNNNN.pgm` and `meta.json`.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom as _;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pnm::{self, GrayImage, RgbImage};
use super::synth::{self, CLASSES};
use super::SegSample;
use crate::decoder::{BoxPrompt, Point, Prompt};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
/// Validation and test each take this fraction of the samples.
pub const HOLDOUT_FRACTION: usize = 10;
pub const BOX_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index ranges of the three splits: the last two tenths are validation and
/// test (64/64 of 640), everything before is training.
pub fn split_ranges(count: usize) -> [Range<usize>; 3] {
    let hold = count / HOLDOUT_FRACTION;
    let train = count - 2 * hold;
    [0..train, train..train + hold, train + hold..count]
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:06}.ppm"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("masks").join(format!("{i:06}.pgm"))
}

/// Generates and writes `count` samples. An existing non-empty `dir` is only
/// replaced with `force`.
pub fn write_dataset(dir: &Path, seed: u64, count: usize, height: usize, width: usize, force: bool) -> Result<DatasetMeta> {
    if count == 0 {
        return invalid("gen-data", "count must be positive");
    }
    if height < synth::MIN_EXTENT || width < synth::MIN_EXTENT {
        return invalid(
            "gen-data",
            format!("size {height}x{width} below the {0}x{0} minimum", synth::MIN_EXTENT),
        );
    }
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            return invalid("gen-data", format!("{} exists and is not empty (use --force)", dir.display()));
        }
        for sub in ["images", "masks"] {
            if dir.join(sub).exists() {
                std::fs::remove_dir_all(dir.join(sub))?;
            }
        }
        if dir.join(META_FILE).exists() {
            std::fs::remove_file(dir.join(META_FILE))?;
        }
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for i in 0..count {
        let s = synth::gen_sample(seed, i as u64, height, width)?;
        pnm::write_ppm(&image_path(dir, i), &RgbImage::from_tensor(&s.image)?)?;
        pnm::write_pgm(&mask_path(dir, i), &GrayImage::new(width, height, s.mask)?)?;
    }
    let meta = DatasetMeta {
        seed,
        count,
        height,
        width,
        classes: CLASSES,
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        if meta.count == 0 {
            return invalid("dataset", format!("{} holds no samples", dir.display()));
        }
        let samples = (0..meta.count)
            .map(|i| {
                let img = pnm::read_ppm(&image_path(dir, i))?;
                let mask = pnm::read_pgm(&mask_path(dir, i))?;
                if (img.height, img.width) != (meta.height, meta.width) || (mask.height, mask.width) != (meta.height, meta.width) {
                    return invalid("dataset", format!("sample {i}: extent differs from meta.json"));
                }
                if let Some(&bad) = mask.data.iter().find(|&&m| m as usize >= meta.classes) {
                    return invalid("dataset", format!("sample {i}: class {bad} out of range"));
                }
                SegSample::new(img.to_tensor(), mask.data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { meta, samples })
    }

    /// In-memory dataset with the same content as [`write_dataset`] produces.
    pub fn generate(seed: u64, count: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            meta: DatasetMeta {
                seed,
                count,
                height,
                width,
                classes: CLASSES,
            },
            samples: synth::gen_synthetic(seed, count, height, width)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SegSample] {
        let [train, val, test] = split_ranges(self.samples.len());
        let r = match split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        };
        &self.samples[r]
    }
}

/// One positive point per present foreground class, one negative point on
/// the background and, with probability one half, the bounding box of class 1.
pub fn sample_prompt(rng: &mut Rng, mask: &[u8], h: usize, w: usize, k: usize) -> Prompt {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &m) in mask.iter().enumerate() {
        if let Some(v) = by_class.get_mut(m as usize) {
            v.push(i);
        }
    }
    let mut prompt = Prompt::default();
    for pixels in &by_class[1..] {
        if let Some(&i) = pixels.choose(rng) {
            prompt.points.push(Point {
                row: i / w,
                col: i % w,
                positive: true,
            });
        }
    }
    if let Some(&i) = by_class[0].choose(rng) {
        prompt.points.push(Point {
            row: i / w,
            col: i % w,
            positive: false,
        });
    }
    if rng.random::<f64>() < BOX_PROBABILITY && k > 1 && !by_class[1].is_empty() {
        let rows = by_class[1].iter().map(|i| i / w);
        let cols = by_class[1].iter().map(|i| i % w);
        prompt.boxes.push(BoxPrompt {
            r0: rows.clone().min().unwrap_or(0),
            r1: rows.max().unwrap_or(h - 1),
            c0: cols.clone().min().unwrap_or(0),
            c1: cols.max().unwrap_or(w - 1),
        });
    }
    prompt
}

/// Prompt used when evaluating sample `index`; fixed for a given seed.
pub fn eval_prompt(seed: u64, index: usize, sample: &SegSample, k: usize) -> Prompt {
    let mut rng = rng::stream(seed, &[rng::tag::PROMPTS, 0, index as u64]);
    sample_prompt(&mut rng, &sample.mask, sample.height(), sample.width(), k)
}

/// Prompt for sample `index` in training epoch `epoch`.
pub fn train_prompt(seed: u64, epoch: usize, index: usize, sample: &SegSample, k: usize) -> Prompt {
    let mut rng = rng::stream(seed, &[rng::tag::PROMPTS, 1, epoch as u64, index as u64]);
    sample_prompt(&mut rng, &sample.mask, sample.height(), sample.width(), k)
}

/// Stacks samples into `[B,3,H,W]` and a flat `B·H·W` target.
pub fn stack(samples: &[&SegSample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument {
        op: "stack",
        detail: "empty batch".into(),
    })?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return invalid("stack", "samples differ in extent");
        }
        data.extend_from_slice(s.image.data());
        target.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new([samples.len(), 3, h, w], data)?, target))
}

/// Adds zero-mean Gaussian noise with deviation `std` on the 0–255 scale and
/// clamps back to `[0, 1]`.
pub fn add_noise(image: &Tensor, std: f64, rng: &mut Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument {
        op: "add_noise",
        detail: e.to_string(),
    })?;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng) / 255.0).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Rotates by `degrees` counter-clockwise about the image centre. The mask
/// uses nearest-neighbour lookup and the image bilinear interpolation;
/// pixels mapped from outside the frame become background (class 0, value 0).
pub fn rotate(sample: &SegSample, degrees: f64) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = sample.image.data();
    let plane = h * w;
    let mut image = Tensor::zeros([3, h, w]);
    let mut mask = vec![0u8; plane];
    let dst = image.data_mut();
    for r in 0..h {
        for c in 0..w {
            // Inverse rotation: output (x, y) to source coordinates, y down.
            let (x, y) = (c as f64 - cx, r as f64 - cy);
            let sx = cos * x - sin * y + cx;
            let sy = sin * x + cos * y + cy;
            let (nr, nc) = (sy.round(), sx.round());
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                mask[r * w + c] = sample.mask[nr as usize * w + nc as usize];
            }
            let (r0, c0) = (sy.floor(), sx.floor());
            let (fr, fc) = (sy - r0, sx - c0);
            for ch in 0..3 {
                let at = |rr: f64, cc: f64| -> f64 {
                    if rr < 0.0 || cc < 0.0 || rr as usize >= h || cc as usize >= w {
                        0.0
                    } else {
                        src[ch * plane + rr as usize * w + cc as usize]
                    }
                };
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1.0) * fc;
                let bottom = at(r0 + 1.0, c0) * (1.0 - fc) + at(r0 + 1.0, c0 + 1.0) * fc;
                dst[ch * plane + r * w + c] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    SegSample::new(image, mask)
}

/// Uniform angle in `[−range, range]` degrees for evaluation sample `index`.
pub fn rotation_angle(seed: u64, index: usize, range: f64) -> f64 {
    if range == 0.0 {
        return 0.0;
    }
    rng::stream(seed, &[rng::tag::ROTATE, index as u64]).random_range(-range..=range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_match_desk_protocol() {
        let [a, b, c] = split_ranges(640);
        assert_eq!((a.len(), b.len(), c.len()), (512, 64, 64));
        assert_eq!(c.end, 640);
    }

    #[test]
    fn prompts_follow_protocol() {
        let s = synth::gen_sample(3, 0, 48, 48).unwrap();
        let p = eval_prompt(1, 0, &s, CLASSES);
        p.validate(48, 48).unwrap();
        for pt in &p.points {
            let m = s.mask[pt.row * 48 + pt.col];
            assert_eq!(pt.positive, m != 0);
        }
        let present = (1..CLASSES as u8).filter(|c| s.mask.contains(c)).count();
        assert_eq!(p.points.iter().filter(|p| p.positive).count(), present);
        assert_eq!(p, eval_prompt(1, 0, &s, CLASSES));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = synth::gen_sample(3, 1, 40, 40).unwrap();
        let r = rotate(&s, 0.0).unwrap();
        assert_eq!(r.mask, s.mask);
        assert_eq!(r.image, s.image);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let mut mask = vec![0u8; 9];
        mask[1] = 1; // top middle
        let s = SegSample::new(Tensor::zeros([3, 3, 3]), mask).unwrap();
        let r = rotate(&s, 90.0).unwrap();
        // Counter-clockwise: top middle goes to middle left.
        assert_eq!(r.mask[3], 1);
        assert_eq!(r.mask.iter().filter(|&&m| m == 1).count(), 1);
    }
}
