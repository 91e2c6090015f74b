//! Prompt rasterisation and the top-down fusion decoder.

use crate::autodiff::Ops;
use crate::encoder::{FeaturePyramid, Padding, STRIDE};
use crate::error::{invalid, shape_err, Result};
use crate::layers::{Conv, ConvBnAct};
use crate::model::{ModelConfig, Mode};
use crate::params::ParamInit;
use crate::tensor::Tensor;

/// Resolution factor of the fused map and of the prompt raster.
pub const PROMPT_STRIDE: usize = 4;
pub const PROMPT_CHANNELS: usize = 3;
pub const DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxPrompt {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

/// Points and boxes in input-image pixel coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Prompt {
    pub points: Vec<Point>,
    pub boxes: Vec<BoxPrompt>,
}

impl Prompt {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for p in &self.points {
            if p.row >= h || p.col >= w {
                return invalid("prompt", format!("point ({}, {}) outside {h}×{w} image", p.row, p.col));
            }
        }
        for b in &self.boxes {
            if b.r1 >= h || b.c1 >= w || b.r0 > b.r1 || b.c0 > b.c1 {
                return invalid(
                    "prompt",
                    format!("box ({}, {}, {}, {}) invalid for {h}×{w} image", b.r0, b.c0, b.r1, b.c1),
                );
            }
        }
        Ok(())
    }
}

/// Extent of the fused map for an `h`-pixel input (after padding to 16).
pub fn fused_extent(h: usize) -> usize {
    h.div_ceil(STRIDE) * STRIDE / PROMPT_STRIDE
}

/// `[3, H'/4, W'/4]` raster with `H', W'` the padded input extents: positive
/// points, negative points and box interiors.
pub fn encode_prompts(prompt: &Prompt, h: usize, w: usize) -> Result<Tensor> {
    prompt.validate(h, w)?;
    let (gh, gw) = (fused_extent(h), fused_extent(w));
    let mut t = Tensor::zeros([PROMPT_CHANNELS, gh, gw]);
    let d = t.data_mut();
    for p in &prompt.points {
        let ch = if p.positive { 0 } else { 1 };
        d[(ch * gh + p.row / PROMPT_STRIDE) * gw + p.col / PROMPT_STRIDE] = 1.0;
    }
    for b in &prompt.boxes {
        for r in b.r0 / PROMPT_STRIDE..=b.r1 / PROMPT_STRIDE {
            for c in b.c0 / PROMPT_STRIDE..=b.c1 / PROMPT_STRIDE {
                d[(2 * gh + r) * gw + c] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Stacks [`encode_prompts`] for a batch into `[B,3,H'/4,W'/4]`.
pub fn encode_prompt_batch(prompts: &[Prompt], h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = (fused_extent(h), fused_extent(w));
    let mut data = Vec::with_capacity(prompts.len() * PROMPT_CHANNELS * gh * gw);
    for p in prompts {
        data.extend_from_slice(encode_prompts(p, h, w)?.data());
    }
    Tensor::new([prompts.len(), PROMPT_CHANNELS, gh, gw], data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub fuse_mid: Conv,
    pub fuse_low: Conv,
    pub refine: Vec<ConvBnAct>,
    pub prompt_proj: Conv,
    pub head: ConvBnAct,
    pub classifier: Conv,
}

impl DecoderParams {
    pub fn init(init: &mut ParamInit<'_>, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.widths;
        let f = cfg.fuse_width;
        Ok(Self {
            fuse_mid: Conv::init(init, "dec.fuse_mid", c3 + c2, f, 1, 1, 1, true)?,
            fuse_low: Conv::init(init, "dec.fuse_low", f + c1, f, 1, 1, 1, true)?,
            refine: (0..2)
                .map(|i| ConvBnAct::init(init, &format!("dec.refine{i}"), f, f, 3, 1, f))
                .collect::<Result<_>>()?,
            prompt_proj: Conv::init(init, "dec.prompt_proj", f + PROMPT_CHANNELS, f, 1, 1, 1, true)?,
            head: ConvBnAct::init(init, "dec.head", f, cfg.head_width, 3, 1, 1)?,
            classifier: Conv::init(init, "dec.classifier", cfg.head_width, cfg.classes, 1, 1, 1, true)?,
        })
    }
}

/// Top-down fusion to a single map at 4× resolution. With `use_ldf` off the
/// 4× and 8× features are replaced by zeros of the same shape.
pub fn fuse_pyramid<O: Ops>(
    ops: &mut O,
    pyr: &FeaturePyramid<O::V>,
    p: &DecoderParams,
    use_ldf: bool,
    training: bool,
) -> Result<O::V> {
    let (_, _, fh, fw) = ops.value(&pyr.f).dims4("fuse_pyramid")?;
    let (_, _, mh, mw) = ops.value(&pyr.mf).dims4("fuse_pyramid")?;
    let (_, _, lh, lw) = ops.value(&pyr.lf).dims4("fuse_pyramid")?;
    if (mh, mw) != (2 * fh, 2 * fw) || (lh, lw) != (4 * fh, 4 * fw) {
        return shape_err(
            "fuse_pyramid",
            format!("pyramid extents {lh}×{lw}, {mh}×{mw}, {fh}×{fw} are not 4:2:1"),
        );
    }
    let lateral = |ops: &mut O, v: &O::V| -> O::V {
        if use_ldf {
            v.clone()
        } else {
            let shape = ops.value(v).shape().to_vec();
            ops.constant(Tensor::zeros(shape))
        }
    };
    let up = ops.upsample2x(&pyr.f)?;
    let mf = lateral(ops, &pyr.mf);
    let cat = ops.concat_channels(&up, &mf)?;
    let x = p.fuse_mid.forward(ops, &cat)?;
    let up = ops.upsample2x(&x)?;
    let lf = lateral(ops, &pyr.lf);
    let cat = ops.concat_channels(&up, &lf)?;
    let mut x = p.fuse_low.forward(ops, &cat)?;
    for r in &p.refine {
        x = r.forward(ops, &x, training)?;
    }
    Ok(x)
}

/// Per-class logits `[B,K,H,W]` at the original (unpadded) input extent.
pub fn predict<O: Ops>(
    ops: &mut O,
    pyr: &FeaturePyramid<O::V>,
    prompt_map: &O::V,
    p: &DecoderParams,
    pad: Padding,
    use_ldf: bool,
    mode: &Mode,
) -> Result<O::V> {
    let fused = fuse_pyramid(ops, pyr, p, use_ldf, mode.training)?;
    let cat = ops.concat_channels(&fused, prompt_map)?;
    let mut x = p.prompt_proj.forward(ops, &cat)?;
    if let Some(mask) = &mode.dropout {
        let m = ops.constant(mask.clone());
        x = ops.mul(&x, &m)?;
    }
    let x = ops.upsample2x(&x)?;
    let x = p.head.forward(ops, &x, mode.training)?;
    let x = ops.upsample2x(&x)?;
    let logits = p.classifier.forward(ops, &x)?;
    if pad == Padding::default() {
        Ok(logits)
    } else {
        ops.pad_spatial(&logits, 0, -(pad.bottom as isize), 0, -(pad.right as isize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_zero() {
        let t = encode_prompts(&Prompt::default(), 64, 64).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_and_box_rasterisation() {
        let p = Prompt {
            points: vec![Point {
                row: 8,
                col: 8,
                positive: true,
            }],
            boxes: vec![],
        };
        let t = encode_prompts(&p, 64, 64).unwrap();
        assert_eq!(t.data()[2 * 16 + 2], 1.0);
        assert_eq!(t.sum(), 1.0);

        let p = Prompt {
            points: vec![],
            boxes: vec![BoxPrompt { r0: 0, c0: 0, r1: 31, c1: 31 }],
        };
        let t = encode_prompts(&p, 64, 64).unwrap();
        assert_eq!(t.sum(), 64.0);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(t.data()[(2 * 16 + r) * 16 + c], 1.0);
            }
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let p = Prompt {
            points: vec![Point {
                row: 64,
                col: 0,
                positive: false,
            }],
            boxes: vec![],
        };
        assert!(encode_prompts(&p, 64, 64).is_err());
        let p = Prompt {
            points: vec![],
            boxes: vec![BoxPrompt { r0: 5, c0: 0, r1: 4, c1: 3 }],
        };
        assert!(encode_prompts(&p, 64, 64).is_err());
    }
}
