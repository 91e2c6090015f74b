//! Test-time augmentation over the symmetries of the pixel grid.
//!
//! Each transform is applied to the image and to the prompt coordinates, the
//! model is evaluated, the class probabilities are mapped back with the
//! inverse transform and all variants are averaged.

use crate::decoder::{encode_prompt_batch, BoxPrompt, Point, Prompt};
use crate::error::{shape_err, Result};
use crate::model::Model;
use crate::objective::class_softmax;
use crate::tensor::Tensor;

/// Elements of the dihedral group of the square acting on the last two axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    /// Both flips, equal to a half turn.
    Rot180,
    Transpose,
    /// Quarter turn counter-clockwise.
    Rot90,
    /// Quarter turn clockwise.
    Rot270,
    AntiTranspose,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform::Identity,
        Transform::HFlip,
        Transform::VFlip,
        Transform::Rot180,
        Transform::Transpose,
        Transform::Rot90,
        Transform::Rot270,
        Transform::AntiTranspose,
    ];

    /// The variants used for an `h × w` input: all eight on square inputs,
    /// otherwise the four that preserve the extent.
    pub fn variants(h: usize, w: usize) -> &'static [Transform] {
        if h == w {
            &Self::ALL
        } else {
            &Self::ALL[..4]
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Self::Transpose | Self::Rot90 | Self::Rot270 | Self::AntiTranspose)
    }

    pub fn inverse(self) -> Self {
        match self {
            Self::Rot90 => Self::Rot270,
            Self::Rot270 => Self::Rot90,
            t => t,
        }
    }

    /// Where pixel `(r, c)` of an `h × w` grid lands.
    pub fn map_point(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Identity => (r, c),
            Self::HFlip => (r, w - 1 - c),
            Self::VFlip => (h - 1 - r, c),
            Self::Rot180 => (h - 1 - r, w - 1 - c),
            Self::Transpose => (c, r),
            Self::Rot90 => (w - 1 - c, r),
            Self::Rot270 => (c, h - 1 - r),
            Self::AntiTranspose => (w - 1 - c, h - 1 - r),
        }
    }

    pub fn output_extent(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Transforms the trailing `[H,W]` axes of a tensor of rank ≥ 2.
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() < 2 {
            return shape_err("Transform::apply", format!("rank {} below 2", s.len()));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = self.output_extent(h, w);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        let mut out = Tensor::zeros(shape);
        let plane = h * w;
        for (src, dst) in t.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            for r in 0..h {
                for c in 0..w {
                    let (rr, cc) = self.map_point(r, c, h, w);
                    dst[rr * ow + cc] = src[r * w + c];
                }
            }
        }
        Ok(out)
    }

    pub fn apply_prompt(self, p: &Prompt, h: usize, w: usize) -> Prompt {
        Prompt {
            points: p
                .points
                .iter()
                .map(|pt| {
                    let (row, col) = self.map_point(pt.row, pt.col, h, w);
                    Point { row, col, ..*pt }
                })
                .collect(),
            boxes: p
                .boxes
                .iter()
                .map(|b| {
                    let (ra, ca) = self.map_point(b.r0, b.c0, h, w);
                    let (rb, cb) = self.map_point(b.r1, b.c1, h, w);
                    BoxPrompt {
                        r0: ra.min(rb),
                        c0: ca.min(cb),
                        r1: ra.max(rb),
                        c1: ca.max(cb),
                    }
                })
                .collect(),
        }
    }
}

/// Eval-mode class probabilities `[B,K,H,W]` for `images: [B,3,H,W]`.
pub fn predict_probs(model: &Model, images: &Tensor, prompts: &[Prompt]) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4("predict_probs")?;
    if prompts.len() != b {
        return shape_err("predict_probs", format!("{} prompts for a batch of {b}", prompts.len()));
    }
    let map = encode_prompt_batch(prompts, h, w)?;
    Ok(class_softmax(&model.infer(images, &map)?))
}

/// Average of the inverse-transformed probabilities over
/// [`Transform::variants`].
pub fn tta_predict(model: &Model, images: &Tensor, prompts: &[Prompt]) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4("tta_predict")?;
    let variants = Transform::variants(h, w);
    let mut acc: Option<Tensor> = None;
    for &t in variants {
        let (th, tw) = t.output_extent(h, w);
        let img = t.apply(images)?;
        let pr: Vec<Prompt> = prompts.iter().map(|p| t.apply_prompt(p, h, w)).collect();
        let probs = t.inverse().apply(&predict_probs(model, &img, &pr)?)?;
        debug_assert_eq!(t.inverse().output_extent(th, tw), (h, w));
        match &mut acc {
            None => acc = Some(probs),
            Some(a) => a.accumulate(&probs)?,
        }
    }
    Ok(acc.expect("at least one variant").scale(1.0 / variants.len() as f64))
}
