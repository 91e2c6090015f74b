//! Small parameterised building blocks shared by the encoder and decoder.

use crate::autodiff::{BnBuffers, BnConfig, Ops};
use crate::error::Result;
use crate::params::{ParamId, ParamInit};
use crate::tensor::{Activation, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv {
    /// `k×k` convolution `cin → cout` with "same" padding at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        init: &mut ParamInit<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = init.conv(&format!("{name}.w"), [cout, cin / groups, k, k])?;
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[cout])).transpose()?;
        Ok(Self {
            w,
            b,
            stride,
            pad: k / 2,
            groups,
        })
    }

    pub fn forward<O: Ops>(&self, ops: &mut O, x: &O::V) -> Result<O::V> {
        let w = ops.param(self.w);
        let b = self.b.map(|b| ops.param(b));
        ops.conv2d(x, &w, b.as_ref(), self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffers: BnBuffers,
}

impl BatchNorm {
    pub fn init(init: &mut ParamInit<'_>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&format!("{name}.gamma"), &[c])?,
            beta: init.zeros(&format!("{name}.beta"), &[c])?,
            buffers: BnBuffers {
                mean: init.buffer(&format!("{name}.running_mean"), Tensor::zeros([c]))?,
                var: init.buffer(&format!("{name}.running_var"), Tensor::ones([c]))?,
            },
        })
    }

    pub fn forward<O: Ops>(&self, ops: &mut O, x: &O::V, training: bool) -> Result<O::V> {
        let g = ops.param(self.gamma);
        let b = ops.param(self.beta);
        ops.batch_norm2d(
            x,
            &g,
            &b,
            self.buffers,
            BnConfig {
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
                training,
            },
        )
    }
}

/// Bias-free convolution followed by batch norm and SiLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        init: &mut ParamInit<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::init(init, &format!("{name}.conv"), cin, cout, k, stride, groups, false)?,
            bn: BatchNorm::init(init, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<O: Ops>(&self, ops: &mut O, x: &O::V, training: bool) -> Result<O::V> {
        let c = self.conv.forward(ops, x)?;
        let n = self.bn.forward(ops, &c, training)?;
        Ok(ops.act(Activation::Silu, &n))
    }
}
