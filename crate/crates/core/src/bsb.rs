//! Bidirectional sequence block and its residual stack.
//!
//! Tokens are `[B,L,D]`. The block normalises its input, projects it to an
//! `E = 2D` wide scan stream `x` and gate stream `y`, runs a causal conv and
//! selective scan over `x` in each direction, gates each direction with its
//! own SiLU projection of `y`, and projects the sum back to `D` on top of the
//! un-normalised input.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::autodiff::Ops;
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{ParamId, ParamInit};
use crate::rng::Rng;
use crate::ssm::{ssm_branch, SsmParams};
use crate::tensor::{Activation, Tensor};

pub const NORM_EPS: f64 = 1e-6;
pub const CONV_WIDTH: usize = 4;
pub const EXPANSION: usize = 2;
pub const MAX_DROP_PATH: f64 = 0.1;

/// Block configurations compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BsbVariant {
    /// Independent gate per direction.
    DualGate,
    /// One gate applied to both directions.
    SharedGate,
    /// Directions summed without gating.
    NoGate,
    /// Forward direction only (with conv and gate).
    Unidirectional,
    /// Both directions and both gates, no depthwise conv.
    NoConv,
}

impl BsbVariant {
    pub const ALL: [BsbVariant; 5] = [
        BsbVariant::DualGate,
        BsbVariant::SharedGate,
        BsbVariant::NoGate,
        BsbVariant::Unidirectional,
        BsbVariant::NoConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BsbVariant::DualGate => "dual_gate",
            BsbVariant::SharedGate => "shared_gate",
            BsbVariant::NoGate => "no_gate",
            BsbVariant::Unidirectional => "unidirectional",
            BsbVariant::NoConv => "no_conv",
        }
    }

    pub fn bidirectional(self) -> bool {
        self != BsbVariant::Unidirectional
    }

    pub fn has_conv(self) -> bool {
        self != BsbVariant::NoConv
    }

    /// Number of gate projections.
    pub fn gates(self) -> usize {
        match self {
            BsbVariant::NoGate => 0,
            BsbVariant::SharedGate | BsbVariant::Unidirectional => 1,
            BsbVariant::DualGate | BsbVariant::NoConv => 2,
        }
    }
}

impl fmt::Display for BsbVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BsbVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameters of one scan direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    /// Depthwise causal conv `[E, CONV_WIDTH]` and its bias `[E]`.
    pub conv: Option<Linear>,
    pub ssm: SsmParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BsbParams {
    pub dim: usize,
    pub inner: usize,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// `[E,D]`
    pub w_x: ParamId,
    /// `[E,D]`
    pub w_y: ParamId,
    pub forward: Direction,
    pub backward: Option<Direction>,
    pub gate_forward: Option<Linear>,
    pub gate_backward: Option<Linear>,
    /// `[D,E]` with bias `[D]`.
    pub out: Linear,
}

impl BsbParams {
    pub fn init(init: &mut ParamInit<'_>, prefix: &str, dim: usize, state: usize, variant: BsbVariant) -> Result<Self> {
        if dim == 0 {
            return invalid("BsbParams::init", "token width must be positive");
        }
        let e = EXPANSION * dim;
        let norm_gamma = init.ones(&format!("{prefix}.norm.gamma"), &[dim])?;
        let norm_beta = init.zeros(&format!("{prefix}.norm.beta"), &[dim])?;
        let w_x = init.linear(&format!("{prefix}.w_x"), e, dim)?;
        let w_y = init.linear(&format!("{prefix}.w_y"), e, dim)?;
        let direction = |init: &mut ParamInit<'_>, tag: &str| -> Result<Direction> {
            let conv = if variant.has_conv() {
                Some(Linear {
                    w: init.kaiming(&format!("{prefix}.{tag}.conv.w"), &[e, CONV_WIDTH], CONV_WIDTH)?,
                    b: init.zeros(&format!("{prefix}.{tag}.conv.b"), &[e])?,
                })
            } else {
                None
            };
            let ssm = SsmParams::init(init, &format!("{prefix}.{tag}.ssm"), e, state)?;
            Ok(Direction { conv, ssm })
        };
        let forward = direction(init, "fwd")?;
        let backward = if variant.bidirectional() {
            Some(direction(init, "bwd")?)
        } else {
            None
        };
        let gate = |init: &mut ParamInit<'_>, tag: &str| -> Result<Linear> {
            Ok(Linear {
                w: init.linear(&format!("{prefix}.gate_{tag}.w"), e, e)?,
                b: init.zeros(&format!("{prefix}.gate_{tag}.b"), &[e])?,
            })
        };
        let gate_forward = (variant.gates() >= 1).then(|| gate(init, "fwd")).transpose()?;
        let gate_backward = (variant.gates() == 2).then(|| gate(init, "bwd")).transpose()?;
        let out = Linear {
            w: init.linear(&format!("{prefix}.out.w"), dim, e)?,
            b: init.zeros(&format!("{prefix}.out.b"), &[dim])?,
        };
        Ok(Self {
            dim,
            inner: e,
            norm_gamma,
            norm_beta,
            w_x,
            w_y,
            forward,
            backward,
            gate_forward,
            gate_backward,
            out,
        })
    }

    /// Whether the parameter set has exactly the pieces `variant` uses.
    pub fn matches(&self, variant: BsbVariant) -> bool {
        let conv_ok = |d: &Direction| d.conv.is_some() == variant.has_conv();
        conv_ok(&self.forward)
            && self.backward.is_some() == variant.bidirectional()
            && self.backward.as_ref().is_none_or(conv_ok)
            && usize::from(self.gate_forward.is_some()) + usize::from(self.gate_backward.is_some())
                == variant.gates()
            && (self.gate_backward.is_none() || self.gate_forward.is_some())
    }
}

/// Conv, SiLU and scan along the sequence axis of `x: [B,L,E]`.
pub fn direction_forward<O: Ops>(ops: &mut O, x: &O::V, d: &Direction) -> Result<O::V> {
    let act_in = match &d.conv {
        Some(c) => {
            let w = ops.param(c.w);
            let b = ops.param(c.b);
            let conv = ops.conv1d_causal(x, &w)?;
            ops.add_bias(&conv, &b)?
        }
        None => x.clone(),
    };
    let xp = ops.act(Activation::Silu, &act_in);
    ssm_branch(ops, &xp, &d.ssm)
}

/// The same machinery run right-to-left: reverse, scan, reverse back.
pub fn direction_backward<O: Ops>(ops: &mut O, x: &O::V, d: &Direction) -> Result<O::V> {
    let rev = ops.flip(x, 1)?;
    let k = direction_forward(ops, &rev, d)?;
    ops.flip(&k, 1)
}

fn gate<O: Ops>(ops: &mut O, y: &O::V, g: &Linear) -> Result<O::V> {
    let w = ops.param(g.w);
    let b = ops.param(g.b);
    let pre = ops.linear(y, &w, Some(&b))?;
    Ok(ops.act(Activation::Silu, &pre))
}

/// One block application on `tokens: [B,L,D]`.
pub fn bsb_forward<O: Ops>(ops: &mut O, tokens: &O::V, p: &BsbParams, variant: BsbVariant) -> Result<O::V> {
    const OP: &str = "bsb_forward";
    let (_, l, d) = ops.value(tokens).dims3(OP)?;
    if l == 0 {
        return invalid(OP, "empty sequence");
    }
    if d != p.dim {
        return shape_err(OP, format!("token width {d}, block expects {}", p.dim));
    }
    if !p.matches(variant) {
        return invalid(OP, format!("parameters do not fit variant {variant}"));
    }
    let gamma = ops.param(p.norm_gamma);
    let beta = ops.param(p.norm_beta);
    let normed = ops.layer_norm(tokens, &gamma, &beta, NORM_EPS)?;
    let w_x = ops.param(p.w_x);
    let x = ops.linear(&normed, &w_x, None)?;
    let w_y = ops.param(p.w_y);
    let y = ops.linear(&normed, &w_y, None)?;

    let k_fwd = direction_forward(ops, &x, &p.forward)?;
    let k_bwd = match &p.backward {
        Some(dir) => Some(direction_backward(ops, &x, dir)?),
        None => None,
    };
    let fused = match (variant, k_bwd) {
        (BsbVariant::NoGate, Some(kb)) => ops.add(&k_fwd, &kb)?,
        (BsbVariant::SharedGate, Some(kb)) => {
            let g = gate(ops, &y, p.gate_forward.as_ref().expect("checked by matches"))?;
            let sum = ops.add(&k_fwd, &kb)?;
            ops.mul(&sum, &g)?
        }
        (BsbVariant::Unidirectional, None) => {
            let g = gate(ops, &y, p.gate_forward.as_ref().expect("checked by matches"))?;
            ops.mul(&k_fwd, &g)?
        }
        (BsbVariant::DualGate | BsbVariant::NoConv, Some(kb)) => {
            let gf = gate(ops, &y, p.gate_forward.as_ref().expect("checked by matches"))?;
            let gb = gate(ops, &y, p.gate_backward.as_ref().expect("checked by matches"))?;
            let a = ops.mul(&k_fwd, &gf)?;
            let b = ops.mul(&kb, &gb)?;
            ops.add(&a, &b)?
        }
        _ => unreachable!("direction count checked by matches"),
    };
    let w_out = ops.param(p.out.w);
    let b_out = ops.param(p.out.b);
    let projected = ops.linear(&fused, &w_out, Some(&b_out))?;
    ops.add(&projected, tokens)
}

/// Per-layer drop-path rates, rising linearly from 0 to [`MAX_DROP_PATH`].
pub fn drop_path_rates(layers: usize) -> Vec<f64> {
    match layers {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|l| MAX_DROP_PATH * l as f64 / (n - 1) as f64).collect(),
    }
}

/// Per-sample residual-branch multipliers: `0` with probability `rate`,
/// `1/(1−rate)` otherwise. `None` when the rate is zero.
pub fn sample_drop_path(rng: &mut Rng, batch: usize, rate: f64) -> Option<Vec<f64>> {
    (rate > 0.0).then(|| {
        (0..batch)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
            .collect()
    })
}

/// `x + m_b·(y − x)` per sample `b`; `y` unchanged without a mask.
pub fn apply_drop_path<O: Ops>(ops: &mut O, x: &O::V, y: &O::V, mask: Option<&[f64]>) -> Result<O::V> {
    let Some(mask) = mask else { return Ok(y.clone()) };
    let shape = ops.value(x).shape().to_vec();
    if mask.len() != shape[0] {
        return shape_err("drop_path", format!("{} mask entries for batch {}", mask.len(), shape[0]));
    }
    let per = ops.value(x).len() / shape[0];
    let m = ops.constant(Tensor::from_fn(shape, |i| mask[i / per]));
    let branch = ops.sub(y, x)?;
    let scaled = ops.mul(&branch, &m)?;
    ops.add(x, &scaled)
}

/// Sequential blocks with per-layer drop-path masks (`masks` empty or all
/// `None` at inference).
pub fn bsb_stack<O: Ops>(
    ops: &mut O,
    tokens: &O::V,
    layers: &[BsbParams],
    variant: BsbVariant,
    masks: &[Option<Vec<f64>>],
) -> Result<O::V> {
    if !masks.is_empty() && masks.len() != layers.len() {
        return shape_err("bsb_stack", format!("{} masks for {} layers", masks.len(), layers.len()));
    }
    let mut cur = tokens.clone();
    for (i, p) in layers.iter().enumerate() {
        let out = bsb_forward(ops, &cur, p, variant)?;
        let mask = masks.get(i).and_then(|m| m.as_deref());
        cur = apply_drop_path(ops, &cur, &out, mask)?;
    }
    Ok(cur)
}
