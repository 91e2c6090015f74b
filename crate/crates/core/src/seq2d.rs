//! Conversion between feature maps and sub-kernel token sequences, and the
//! pooled cross-sub-kernel context path.
//!
//! A `[B,C,H,W]` map is cut into a grid of `m×n` sub-kernels. Each
//! sub-kernel becomes one sequence of `m·n` tokens in row-major order, and
//! sub-kernels are themselves ordered row-major, giving `[B,G,m·n,C]`.

use crate::autodiff::Ops;
use crate::bsb::{bsb_forward, BsbParams, BsbVariant};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Default sub-kernel extent.
pub const DEFAULT_SUB_KERNEL: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializationPlan {
    pub height: usize,
    pub width: usize,
    pub m: usize,
    pub n: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

fn symmetric_pad(extent: usize, k: usize) -> (usize, usize) {
    let total = extent.div_ceil(k) * k - extent;
    (total / 2, total - total / 2)
}

impl SerializationPlan {
    /// Plan for an `height×width` map with `m×n` sub-kernels. Indivisible
    /// extents are rejected unless `pad` is set, in which case the map is
    /// zero-padded symmetrically to the next multiple.
    pub fn new(height: usize, width: usize, m: usize, n: usize, pad: bool) -> Result<Self> {
        const OP: &str = "SerializationPlan";
        if height == 0 || width == 0 || m == 0 || n == 0 {
            return invalid(OP, "extents must be positive");
        }
        if !pad && (height % m != 0 || width % n != 0) {
            return invalid(
                OP,
                format!("{height}×{width} is not divisible into {m}×{n} sub-kernels and padding is disabled"),
            );
        }
        let (pad_top, pad_bottom) = symmetric_pad(height, m);
        let (pad_left, pad_right) = symmetric_pad(width, n);
        Ok(Self {
            height,
            width,
            m,
            n,
            pad_top,
            pad_bottom,
            pad_left,
            pad_right,
        })
    }

    /// Default plan: `8×8` sub-kernels with padding, or the whole map as one
    /// sub-kernel when either extent is below 8.
    pub fn for_map(height: usize, width: usize) -> Result<Self> {
        if height < DEFAULT_SUB_KERNEL || width < DEFAULT_SUB_KERNEL {
            Self::new(height, width, height, width, false)
        } else {
            Self::new(height, width, DEFAULT_SUB_KERNEL, DEFAULT_SUB_KERNEL, true)
        }
    }

    pub fn padded_height(&self) -> usize {
        self.height + self.pad_top + self.pad_bottom
    }

    pub fn padded_width(&self) -> usize {
        self.width + self.pad_left + self.pad_right
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.padded_height() / self.m, self.padded_width() / self.n)
    }

    pub fn groups(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tokens_per_group(&self) -> usize {
        self.m * self.n
    }

    fn is_padded(&self) -> bool {
        self.pad_top + self.pad_bottom + self.pad_left + self.pad_right > 0
    }

    /// Token position (`g·m·n + s`) of every padded-map pixel, indexed by
    /// flat row-major pixel index.
    pub fn permutation(&self) -> Vec<usize> {
        let (hp, wp) = (self.padded_height(), self.padded_width());
        let (_, gw) = self.grid();
        (0..hp * wp)
            .map(|i| {
                let (r, c) = (i / wp, i % wp);
                let g = (r / self.m) * gw + c / self.n;
                g * self.m * self.n + (r % self.m) * self.n + c % self.n
            })
            .collect()
    }

    /// Whether token position `g·m·n + s` lies inside the original map.
    pub fn valid(&self, pos: usize) -> bool {
        let (_, gw) = self.grid();
        let (g, s) = (pos / (self.m * self.n), pos % (self.m * self.n));
        let r = (g / gw) * self.m + s / self.n;
        let c = (g % gw) * self.n + s % self.n;
        (self.pad_top..self.pad_top + self.height).contains(&r) && (self.pad_left..self.pad_left + self.width).contains(&c)
    }

    /// Mean-pooling weights `[G, m·n]`: `1/count` on valid positions.
    pub fn pool_weights(&self) -> Tensor {
        let s = self.tokens_per_group();
        let g = self.groups();
        let mut w = vec![0.0; g * s];
        for gi in 0..g {
            let count = (0..s).filter(|&si| self.valid(gi * s + si)).count();
            for si in 0..s {
                if self.valid(gi * s + si) {
                    w[gi * s + si] = 1.0 / count as f64;
                }
            }
        }
        Tensor::new([g, s], w).expect("positive extents")
    }
}

/// `[B,C,H,W] → [B,G,m·n,C]`.
pub fn serialize<O: Ops>(ops: &mut O, map: &O::V, plan: &SerializationPlan) -> Result<O::V> {
    let (b, c, h, w) = ops.value(map).dims4("serialize")?;
    if (h, w) != (plan.height, plan.width) {
        return shape_err("serialize", format!("map is {h}×{w}, plan is for {}×{}", plan.height, plan.width));
    }
    let padded = if plan.is_padded() {
        ops.pad_spatial(
            map,
            plan.pad_top as isize,
            plan.pad_bottom as isize,
            plan.pad_left as isize,
            plan.pad_right as isize,
        )?
    } else {
        map.clone()
    };
    let (gh, gw) = plan.grid();
    let split = ops.reshape(&padded, &[b, c, gh, plan.m, gw, plan.n])?;
    let ordered = ops.permute(&split, &[0, 2, 4, 3, 5, 1])?;
    ops.reshape(&ordered, &[b, gh * gw, plan.m * plan.n, c])
}

/// Exact inverse of [`serialize`].
pub fn deserialize<O: Ops>(ops: &mut O, tokens: &O::V, plan: &SerializationPlan) -> Result<O::V> {
    let shape = ops.value(tokens).shape().to_vec();
    let [b, g, s, c] = shape[..] else {
        return shape_err("deserialize", format!("expected [B,G,S,C], got {shape:?}"));
    };
    if g != plan.groups() || s != plan.tokens_per_group() {
        return shape_err(
            "deserialize",
            format!("tokens {shape:?} do not fit {} groups of {}", plan.groups(), plan.tokens_per_group()),
        );
    }
    let (gh, gw) = plan.grid();
    let split = ops.reshape(tokens, &[b, gh, gw, plan.m, plan.n, c])?;
    let ordered = ops.permute(&split, &[0, 5, 1, 3, 2, 4])?;
    let padded = ops.reshape(&ordered, &[b, c, plan.padded_height(), plan.padded_width()])?;
    if plan.is_padded() {
        ops.pad_spatial(
            &padded,
            -(plan.pad_top as isize),
            -(plan.pad_bottom as isize),
            -(plan.pad_left as isize),
            -(plan.pad_right as isize),
        )
    } else {
        Ok(padded)
    }
}

/// Local scan within each sub-kernel plus a global scan over the pooled
/// sub-kernel summaries, broadcast back to every position.
///
/// `out = inner + unpool(outer(pool(inner)) − pool(inner))`, so an outer
/// block that reduces to its residual leaves `inner` unchanged.
pub fn pool_unpool_context<O: Ops>(
    ops: &mut O,
    tokens: &O::V,
    plan: &SerializationPlan,
    inner: &BsbParams,
    outer: &BsbParams,
    variant: BsbVariant,
) -> Result<O::V> {
    let shape = ops.value(tokens).shape().to_vec();
    let [b, g, s, c] = shape[..] else {
        return shape_err("pool_unpool_context", format!("expected [B,G,S,C], got {shape:?}"));
    };
    let flat = ops.reshape(tokens, &[b * g, s, c])?;
    let local = bsb_forward(ops, &flat, inner, variant)?;
    let local = ops.reshape(&local, &shape)?;
    let pooled = ops.group_pool(&local, &plan.pool_weights())?;
    let global = bsb_forward(ops, &pooled, outer, variant)?;
    let delta = ops.sub(&global, &pooled)?;
    ops.group_broadcast_add(&local, &delta)
}
