//! Three-stage hierarchical encoder.
//!
//! Stage 1 (4×) and stage 2 (8×) are convolutional; stage 3 (16×) runs the
//! sub-kernel token stack of bidirectional sequence blocks.

use crate::autodiff::Ops;
use crate::bsb::{apply_drop_path, BsbParams, BsbVariant};
use crate::error::Result;
use crate::layers::{Conv, ConvBnAct};
use crate::model::{ModelConfig, Mode};
use crate::params::{ParamId, ParamInit};
use crate::seq2d::{deserialize, pool_unpool_context, serialize, SerializationPlan};
use crate::tensor::Activation;

/// Total downsampling factor of the deepest stage.
pub const STRIDE: usize = 16;
/// Channel expansion inside a conv block.
pub const CONV_BLOCK_EXPANSION: usize = 4;
pub const LN_EPS: f64 = 1e-6;

/// Encoder outputs at 4×, 8× and 16× downsampling.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<V> {
    pub lf: V,
    pub mf: V,
    pub f: V,
}

/// Zero rows/columns appended to the input so both extents divide by 16.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub fn for_extent(h: usize, w: usize) -> Self {
        Self {
            bottom: h.div_ceil(STRIDE) * STRIDE - h,
            right: w.div_ceil(STRIDE) * STRIDE - w,
        }
    }
}

/// LN over channels, 1×1 expand, depthwise 3×3, 1×1 project, residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
}

impl ConvBlock {
    pub fn init(init: &mut ParamInit<'_>, name: &str, c: usize) -> Result<Self> {
        let e = CONV_BLOCK_EXPANSION * c;
        Ok(Self {
            ln_gamma: init.ones(&format!("{name}.ln.gamma"), &[c])?,
            ln_beta: init.zeros(&format!("{name}.ln.beta"), &[c])?,
            expand: Conv::init(init, &format!("{name}.expand"), c, e, 1, 1, 1, true)?,
            depthwise: Conv::init(init, &format!("{name}.dw"), e, e, 3, 1, e, true)?,
            project: Conv::init(init, &format!("{name}.project"), e, c, 1, 1, 1, true)?,
        })
    }
}

pub fn conv_block<O: Ops>(ops: &mut O, x: &O::V, p: &ConvBlock) -> Result<O::V> {
    let cl = ops.permute(x, &[0, 2, 3, 1])?;
    let g = ops.param(p.ln_gamma);
    let b = ops.param(p.ln_beta);
    let normed = ops.layer_norm(&cl, &g, &b, LN_EPS)?;
    let normed = ops.permute(&normed, &[0, 3, 1, 2])?;
    let wide = p.expand.forward(ops, &normed)?;
    let mixed = p.depthwise.forward(ops, &wide)?;
    let mixed = ops.act(Activation::Silu, &mixed);
    let back = p.project.forward(ops, &mixed)?;
    ops.add(&back, x)
}

/// One stage-3 layer: scan within sub-kernels plus the pooled global scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextLayer {
    pub inner: BsbParams,
    pub outer: BsbParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub stem: [ConvBnAct; 2],
    pub stage1: Vec<ConvBlock>,
    pub down2: Conv,
    pub stage2: Vec<ConvBlock>,
    pub down3: Conv,
    pub stage3: Vec<ContextLayer>,
    pub variant: BsbVariant,
}

impl EncoderParams {
    pub fn init(init: &mut ParamInit<'_>, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.widths;
        let stem = [
            ConvBnAct::init(init, "enc.stem0", cfg.in_channels, cfg.stem_width, 3, 2, 1)?,
            ConvBnAct::init(init, "enc.stem1", cfg.stem_width, c1, 3, 2, 1)?,
        ];
        let stage1 = (0..cfg.stage1_blocks)
            .map(|i| ConvBlock::init(init, &format!("enc.s1.{i}"), c1))
            .collect::<Result<_>>()?;
        let down2 = Conv::init(init, "enc.down2", c1, c2, 3, 2, 1, true)?;
        let stage2 = (0..cfg.stage2_blocks)
            .map(|i| ConvBlock::init(init, &format!("enc.s2.{i}"), c2))
            .collect::<Result<_>>()?;
        let down3 = Conv::init(init, "enc.down3", c2, c3, 3, 2, 1, true)?;
        let stage3 = (0..cfg.bsb_depth)
            .map(|i| {
                Ok(ContextLayer {
                    inner: BsbParams::init(init, &format!("enc.s3.{i}.inner"), c3, cfg.state, cfg.variant)?,
                    outer: BsbParams::init(init, &format!("enc.s3.{i}.outer"), c3, cfg.state, cfg.variant)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            stage1,
            down2,
            stage2,
            down3,
            stage3,
            variant: cfg.variant,
        })
    }
}

/// The stage-3 token stack on a `[B,C,h,w]` map.
pub fn context_stack<O: Ops>(ops: &mut O, map: &O::V, p: &EncoderParams, mode: &Mode) -> Result<O::V> {
    let (_, _, h, w) = ops.value(map).dims4("context_stack")?;
    let plan = SerializationPlan::for_map(h, w)?;
    let mut tokens = serialize(ops, map, &plan)?;
    for (i, layer) in p.stage3.iter().enumerate() {
        let out = pool_unpool_context(ops, &tokens, &plan, &layer.inner, &layer.outer, p.variant)?;
        let mask = mode.drop_path.get(i).and_then(|m| m.as_deref());
        tokens = apply_drop_path(ops, &tokens, &out, mask)?;
    }
    deserialize(ops, &tokens, &plan)
}

/// `image: [B,3,H,W]` → pyramid, padding the input bottom/right to a
/// multiple of 16 first.
pub fn encode<O: Ops>(
    ops: &mut O,
    image: &O::V,
    p: &EncoderParams,
    mode: &Mode,
) -> Result<(FeaturePyramid<O::V>, Padding)> {
    let (_, _, h, w) = ops.value(image).dims4("encode")?;
    let pad = Padding::for_extent(h, w);
    let x = if pad == Padding::default() {
        image.clone()
    } else {
        ops.pad_spatial(image, 0, pad.bottom as isize, 0, pad.right as isize)?
    };
    let mut x = p.stem[0].forward(ops, &x, mode.training)?;
    x = p.stem[1].forward(ops, &x, mode.training)?;
    for b in &p.stage1 {
        x = conv_block(ops, &x, b)?;
    }
    let lf = x;
    let mut x = p.down2.forward(ops, &lf)?;
    for b in &p.stage2 {
        x = conv_block(ops, &x, b)?;
    }
    let mf = x;
    let x = p.down3.forward(ops, &mf)?;
    let f = context_stack(ops, &x, p, mode)?;
    Ok((FeaturePyramid { lf, mf, f }, pad))
}
