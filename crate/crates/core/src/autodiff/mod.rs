//! Reverse-mode differentiation over the tensor primitive set.
//!
//! Model code is written once against the [`Ops`] trait. [`Eval`] runs it
//! as plain tensor arithmetic (no graph, intermediates are freed as soon as
//! they go out of scope); [`Tape`] records every primitive so that
//! [`Tape::backward`] can propagate adjoints from a scalar loss.

mod gradcheck;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_with, rel_err, Coverage, GradcheckReport, ParamCheck, Stencil};
pub use tape::{Gradients, Tape, Var};

use std::borrow::Cow;

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm;
use crate::tensor::ops::{self as k, Activation, RunningStats};
use crate::tensor::Tensor;

/// Running-statistics buffers of one batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnBuffers {
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnBuffers {
    pub fn stats(&self, store: &ParamStore) -> RunningStats {
        RunningStats {
            mean: store.get(self.mean).data().to_vec(),
            var: store.get(self.var).data().to_vec(),
        }
    }
}

/// Batch-norm hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

/// The primitive set shared by the evaluating and recording backends.
pub trait Ops {
    type V: Clone;

    fn store(&self) -> &ParamStore;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self::V>;
    /// Causal depthwise conv over `[B,L,C]`, kernel `[C,kw]`.
    fn conv1d_causal(&mut self, x: &Self::V, k: &Self::V) -> Result<Self::V>;
    fn upsample2x(&mut self, x: &Self::V) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, eps: f64) -> Result<Self::V>;
    fn batch_norm2d(
        &mut self,
        x: &Self::V,
        g: &Self::V,
        b: &Self::V,
        buffers: BnBuffers,
        cfg: BnConfig,
    ) -> Result<Self::V>;
    fn act(&mut self, f: Activation, x: &Self::V) -> Self::V;
    fn exp(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V;
    /// Adds `b[C]` along the last axis of `x`.
    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn pad_spatial(&mut self, x: &Self::V, top: isize, bottom: isize, left: isize, right: isize) -> Result<Self::V>;
    fn permute(&mut self, x: &Self::V, axes: &[usize]) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn flip(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    /// `[B,G,S,C]` → `[B,G,C]`, weighted by constant `weights[G,S]`.
    fn group_pool(&mut self, x: &Self::V, weights: &Tensor) -> Result<Self::V>;
    /// `x[B,G,S,C] + y[B,G,C]` broadcast over `S`.
    fn group_broadcast_add(&mut self, x: &Self::V, y: &Self::V) -> Result<Self::V>;
    /// Selective scan core; see [`ssm::scan_forward`].
    fn selective_scan(
        &mut self,
        x: &Self::V,
        delta: &Self::V,
        a: &Self::V,
        bm: &Self::V,
        cm: &Self::V,
    ) -> Result<Self::V>;
    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    /// Scalar function of `x` whose value and gradient are produced together
    /// by `f` (used for the fused loss kernels).
    fn scalar_fn(
        &mut self,
        x: &Self::V,
        f: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
    ) -> Result<Self::V>;

    /// Running-statistics updates produced by training-mode batch norms.
    fn take_bn_updates(&mut self) -> Vec<(BnBuffers, RunningStats)>;
}

pub(crate) fn add_bias_fwd(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().expect("rank >= 1");
    if b.shape() != [c] {
        return shape_err("add_bias", format!("bias {:?} for last axis {c}", b.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn group_pool_fwd(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [b, g, s, c] = *x.shape() else {
        return shape_err("group_pool", format!("expected [B,G,S,C], got {:?}", x.shape()));
    };
    if weights.shape() != [g, s] {
        return shape_err("group_pool", format!("weights {:?}, expected [{g},{s}]", weights.shape()));
    }
    let mut out = vec![0.0; b * g * c];
    for bi in 0..b {
        for gi in 0..g {
            let o = &mut out[(bi * g + gi) * c..][..c];
            for si in 0..s {
                let w = weights.data()[gi * s + si];
                let src = &x.data()[((bi * g + gi) * s + si) * c..][..c];
                for (ov, xv) in o.iter_mut().zip(src) {
                    *ov += w * xv;
                }
            }
        }
    }
    Tensor::new([b, g, c], out)
}

pub(crate) fn group_broadcast_add_fwd(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let [b, g, s, c] = *x.shape() else {
        return shape_err("group_broadcast_add", format!("expected [B,G,S,C], got {:?}", x.shape()));
    };
    if y.shape() != [b, g, c] {
        return shape_err("group_broadcast_add", format!("{:?} vs {:?}", x.shape(), y.shape()));
    }
    let mut out = x.data().to_vec();
    for bi in 0..b {
        for gi in 0..g {
            let add = &y.data()[(bi * g + gi) * c..][..c];
            for si in 0..s {
                for (o, a) in out[((bi * g + gi) * s + si) * c..][..c].iter_mut().zip(add) {
                    *o += a;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Plain evaluation backend: no graph is recorded.
pub struct Eval<'p> {
    store: &'p ParamStore,
    bn_updates: Vec<(BnBuffers, RunningStats)>,
}

impl<'p> Eval<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            bn_updates: Vec::new(),
        }
    }
}

type CowT<'p> = Cow<'p, Tensor>;

impl<'p> Ops for Eval<'p> {
    type V = CowT<'p>;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Self::V {
        Cow::Borrowed(self.store.get(id))
    }

    fn constant(&mut self, t: Tensor) -> Self::V {
        Cow::Owned(t)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor {
        v.as_ref()
    }

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self::V> {
        k::conv2d(x, w, b.map(|b| b.as_ref()), stride, pad, groups).map(Cow::Owned)
    }

    fn conv1d_causal(&mut self, x: &Self::V, kernel: &Self::V) -> Result<Self::V> {
        k::conv1d_causal_tokens(x, kernel).map(Cow::Owned)
    }

    fn upsample2x(&mut self, x: &Self::V) -> Result<Self::V> {
        k::bilinear_upsample2x(x).map(Cow::Owned)
    }

    fn layer_norm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, eps: f64) -> Result<Self::V> {
        k::layer_norm(x, g, b, eps).map(Cow::Owned)
    }

    fn batch_norm2d(
        &mut self,
        x: &Self::V,
        g: &Self::V,
        b: &Self::V,
        buffers: BnBuffers,
        cfg: BnConfig,
    ) -> Result<Self::V> {
        let stats = buffers.stats(self.store);
        let (y, upd) = k::batch_norm2d(x, &stats, g, b, cfg.eps, cfg.momentum, cfg.training)?;
        if let Some(u) = upd {
            self.bn_updates.push((buffers, u));
        }
        Ok(Cow::Owned(y))
    }

    fn act(&mut self, f: Activation, x: &Self::V) -> Self::V {
        Cow::Owned(k::elementwise(f, x))
    }

    fn exp(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(x.map(f64::exp))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        a.add(b).map(Cow::Owned)
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        a.sub(b).map(Cow::Owned)
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        a.mul(b).map(Cow::Owned)
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V {
        Cow::Owned(x.scale(s))
    }

    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V> {
        add_bias_fwd(x, b).map(Cow::Owned)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        k::linear(x, w, b.map(|b| b.as_ref())).map(Cow::Owned)
    }

    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        k::concat_channels(a, b).map(Cow::Owned)
    }

    fn pad_spatial(&mut self, x: &Self::V, top: isize, bottom: isize, left: isize, right: isize) -> Result<Self::V> {
        k::pad_spatial(x, top, bottom, left, right).map(Cow::Owned)
    }

    fn permute(&mut self, x: &Self::V, axes: &[usize]) -> Result<Self::V> {
        x.permute(axes).map(Cow::Owned)
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        x.as_ref().clone().reshape(shape).map(Cow::Owned)
    }

    fn flip(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        x.flip(axis).map(Cow::Owned)
    }

    fn group_pool(&mut self, x: &Self::V, weights: &Tensor) -> Result<Self::V> {
        group_pool_fwd(x, weights).map(Cow::Owned)
    }

    fn group_broadcast_add(&mut self, x: &Self::V, y: &Self::V) -> Result<Self::V> {
        group_broadcast_add_fwd(x, y).map(Cow::Owned)
    }

    fn selective_scan(
        &mut self,
        x: &Self::V,
        delta: &Self::V,
        a: &Self::V,
        bm: &Self::V,
        cm: &Self::V,
    ) -> Result<Self::V> {
        ssm::scan_forward(x, delta, a, bm, cm, false).map(|(y, _)| Cow::Owned(y))
    }

    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        k::softmax(x, axis).map(Cow::Owned)
    }

    fn sum(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(Tensor::scalar(x.sum()))
    }

    fn scalar_fn(
        &mut self,
        x: &Self::V,
        f: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
    ) -> Result<Self::V> {
        f(x).map(|(v, _)| Cow::Owned(Tensor::scalar(v)))
    }

    fn take_bn_updates(&mut self) -> Vec<(BnBuffers, RunningStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}
