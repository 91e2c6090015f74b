//! Hand-written coefficient recurrence for the input-dependent scan.

use bsbseg_core::params::{ParamInit, ParamStore};
use bsbseg_core::rng;
use bsbseg_core::ssm::{ssm_recurrence_naive, SsmParams};
use bsbseg_core::Tensor;
use rand::Rng;

fn softplus(v: f64) -> f64 {
    v.exp().ln_1p()
}

/// Largest elementwise difference relative to the largest reference
/// magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Random branch parameters over `c` channels, with weights redrawn so that
/// Δ spans several orders of magnitude.
pub fn random_branch(r: &mut rng::Rng, c: usize, n: usize) -> (ParamStore, SsmParams) {
    let mut store = ParamStore::new();
    let p = SsmParams::init(&mut ParamInit::new(&mut store, rng::stream(r.random(), &[])), "s", c, n).unwrap();
    for (id, scale) in [(p.w_delta, 1.0), (p.delta_bias, 2.0), (p.w_b, 1.0), (p.w_c, 1.0), (p.a_log, 1.0)] {
        let t = Tensor::from_fn(store.get(id).shape().to_vec(), |_| r.random_range(-scale..scale));
        store.set(id, t).unwrap();
    }
    (store, p)
}

/// Per-channel coefficients of token `x_t` written out by hand, then fed
/// through the sequential reference.
pub fn scan_by_recurrence(store: &ParamStore, p: &SsmParams, x: &Tensor) -> Vec<f64> {
    let (b, c, l, n) = (x.shape()[0], x.shape()[1], x.shape()[2], p.state);
    let wd = store.get(p.w_delta).data();
    let bias = store.get(p.delta_bias).data();
    let wb = store.get(p.w_b).data();
    let wc = store.get(p.w_c).data();
    let a_log = store.get(p.a_log).data();
    let xd = x.data();
    let at = |bi: usize, ch: usize, t: usize| xd[(bi * c + ch) * l + t];
    let mut out = vec![0.0; b * c * l];
    for bi in 0..b {
        for ch in 0..c {
            let (mut ad, mut bd, mut cd) = (vec![0.0; l * n], vec![0.0; l * n], vec![0.0; l * n]);
            for t in 0..l {
                let delta = softplus((0..c).map(|j| wd[ch * c + j] * at(bi, j, t)).sum::<f64>() + bias[ch]);
                for i in 0..n {
                    let bt: f64 = (0..c).map(|j| wb[i * c + j] * at(bi, j, t)).sum();
                    let ct: f64 = (0..c).map(|j| wc[i * c + j] * at(bi, j, t)).sum();
                    ad[t * n + i] = (delta * -a_log[ch * n + i].exp()).exp();
                    bd[t * n + i] = delta * bt;
                    cd[t * n + i] = ct;
                }
            }
            let xs = Tensor::new([l], (0..l).map(|t| at(bi, ch, t)).collect()).unwrap();
            let y = ssm_recurrence_naive(
                &Tensor::new([l, n], ad).unwrap(),
                &Tensor::new([l, n], bd).unwrap(),
                &Tensor::new([l, n], cd).unwrap(),
                &xs,
            )
            .unwrap();
            out[(bi * c + ch) * l..][..l].copy_from_slice(y.data());
        }
    }
    out
}

