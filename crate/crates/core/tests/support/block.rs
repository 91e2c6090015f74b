//! Conversion of block parameters into the straight-line oracle's weights.

use bsbseg_core::bsb::{BsbParams, BsbVariant, Direction, Linear, NORM_EPS};
use bsbseg_core::params::{ParamId, ParamInit, ParamStore};
use bsbseg_core::rng;
use bsbseg_core::Tensor;
use bsbseg_oracles::block::{Affine, BlockWeights, Fusion, ScanWeights};
use rand::Rng;

fn raw(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn affine(store: &ParamStore, l: &Linear) -> Affine {
    Affine {
        w: raw(store, l.w),
        b: raw(store, l.b),
    }
}

fn scan_weights(store: &ParamStore, d: &Direction) -> ScanWeights {
    ScanWeights {
        conv: d.conv.as_ref().map(|c| affine(store, c)),
        a_log: raw(store, d.ssm.a_log),
        delta: Affine {
            w: raw(store, d.ssm.w_delta),
            b: raw(store, d.ssm.delta_bias),
        },
        w_b: raw(store, d.ssm.w_b),
        w_c: raw(store, d.ssm.w_c),
    }
}

pub fn oracle_weights(store: &ParamStore, p: &BsbParams, variant: BsbVariant, state: usize) -> BlockWeights {
    let gate = |g: &Option<Linear>| affine(store, g.as_ref().unwrap());
    let fusion = match variant {
        BsbVariant::DualGate | BsbVariant::NoConv => Fusion::TwoGates(gate(&p.gate_forward), gate(&p.gate_backward)),
        BsbVariant::SharedGate => Fusion::OneGate(gate(&p.gate_forward)),
        BsbVariant::NoGate => Fusion::Sum,
        BsbVariant::Unidirectional => Fusion::ForwardOnly(gate(&p.gate_forward)),
    };
    BlockWeights {
        dim: p.dim,
        inner: p.inner,
        state,
        norm_gamma: raw(store, p.norm_gamma),
        norm_beta: raw(store, p.norm_beta),
        norm_eps: NORM_EPS,
        w_x: raw(store, p.w_x),
        w_y: raw(store, p.w_y),
        forward: scan_weights(store, &p.forward),
        backward: p.backward.as_ref().map(|d| scan_weights(store, d)),
        fusion,
        out: affine(store, &p.out),
    }
}

/// Fresh block with every tensor redrawn so no parameter sits at a
/// degenerate initial value (unit norm scale, zero biases).
pub fn random_block(r: &mut rng::Rng, d: usize, n: usize, variant: BsbVariant) -> (ParamStore, BsbParams) {
    let mut store = ParamStore::new();
    let p = BsbParams::init(&mut ParamInit::new(&mut store, rng::stream(r.random(), &[rng::tag::INIT])), "b", d, n, variant).unwrap();
    for id in store.trainable_ids() {
        let cur = store.get(id).clone();
        let t = Tensor::from_fn(cur.shape().to_vec(), |i| cur.data()[i] + r.random_range(-0.3..0.3));
        store.set(id, t).unwrap();
    }
    (store, p)
}

