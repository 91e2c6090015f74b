//! Finite-difference gradient suites for the scan, the sequence block and
//! the whole model, shared by the `gradcheck` command and the tests.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{gradcheck_with, Coverage, GradcheckReport, Ops, Stencil, Tape, Var};
use crate::bsb::{bsb_forward, BsbParams, BsbVariant};
use crate::decoder::{fused_extent, PROMPT_CHANNELS};
use crate::error::Result;
use crate::model::{Mode, Model, ModelConfig};
use crate::objective::{total_loss, ClassWeights};
use crate::params::{ParamId, ParamInit, ParamStore};
use crate::rng::{self, Rng};
use crate::ssm::{ssm_branch, SsmParams};
use crate::tensor::{Activation, Tensor};

pub const SCAN_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Relative finite-difference step of the fourth-order stencil.
pub const STEP: f64 = 1e-3;
pub const STENCIL: Stencil = Stencil::Central4;
/// Coordinates probed per tensor in the model suite.
pub const MODEL_COORDS: usize = 16;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `Σ r ⊙ y` with fixed random weights `r`, so every output element
/// contributes with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, y: &Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let prod = tape.mul(y, &c)?;
    Ok(tape.sum(&prod))
}

/// The scan primitive with every input as a parameter (Δ through softplus,
/// `A = −exp(a_log)`), and the full input-dependent branch.
pub fn ssm_suite(tol: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, &(b, l, e, n)) in [(1, 5, 2, 3), (2, 7, 3, 4), (1, 16, 2, 2)].iter().enumerate() {
        let mut r = rng::stream(100 + i as u64, &[]);
        let mut store = ParamStore::new();
        let mut ids: Vec<ParamId> = Vec::new();
        for (name, shape, scale) in [
            ("x", vec![b, l, e], 1.0),
            ("delta_pre", vec![b, l, e], 0.5),
            ("a_log", vec![e, n], 0.5),
            ("bm", vec![b, l, n], 1.0),
            ("cm", vec![b, l, n], 1.0),
        ] {
            let mut init = ParamInit::new(&mut store, rng::stream(0, &[]));
            ids.push(init.tensor(name, normal(&mut r, &shape, scale))?);
        }
        let weights = normal(&mut r, &[b, l, e], 1.0);
        let report = gradcheck_with(&store, &ids, STEP, STENCIL, tol, Coverage::All, |t| {
            let v: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let delta = t.act(Activation::Softplus, &v[1]);
            let a_pos = t.exp(&v[2]);
            let a = t.scale(&a_pos, -1.0);
            let y = t.selective_scan(&v[0], &delta, &a, &v[3], &v[4])?;
            weighted_sum(t, &y, &weights)
        })?;
        out.push(CaseResult {
            name: format!("scan b={b} l={l} e={e} n={n}"),
            report,
        });
    }

    let (b, l, e, n) = (2, 6, 3, 4);
    let mut store = ParamStore::new();
    let mut r = rng::stream(200, &[]);
    let (p, x) = {
        let mut init = ParamInit::new(&mut store, rng::stream(201, &[rng::tag::INIT]));
        let p = SsmParams::init(&mut init, "ssm", e, n)?;
        let x = init.tensor("x", normal(&mut r, &[b, l, e], 1.0))?;
        (p, x)
    };
    let weights = normal(&mut r, &[b, l, e], 1.0);
    let mut ids = p.ids().to_vec();
    ids.push(x);
    let report = gradcheck_with(&store, &ids, STEP, STENCIL, tol, Coverage::All, |t| {
        let xv = t.param(x);
        let y = ssm_branch(t, &xv, &p)?;
        weighted_sum(t, &y, &weights)
    })?;
    out.push(CaseResult {
        name: "ssm_branch".into(),
        report,
    });
    Ok(out)
}

/// One block per variant, checked with respect to all parameters and the
/// input tokens.
pub fn bsb_suite(tol: f64) -> Result<Vec<CaseResult>> {
    let (b, l, d, n) = (2, 6, 4, 3);
    BsbVariant::ALL
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let mut store = ParamStore::new();
            let mut r = rng::stream(300 + i as u64, &[]);
            let (p, x) = {
                let mut init = ParamInit::new(&mut store, rng::stream(301 + i as u64, &[rng::tag::INIT]));
                let p = BsbParams::init(&mut init, "blk", d, n, variant)?;
                let x = init.tensor("tokens", normal(&mut r, &[b, l, d], 1.0))?;
                (p, x)
            };
            // Perturb the deterministic initial values so that norm scales,
            // biases and A differ across channels.
            for id in store.trainable_ids() {
                let t = store.get(id).clone();
                let jittered = t.zip_map(&normal(&mut r, t.shape(), 0.1), "jitter", |a, e| a + e)?;
                store.set(id, jittered)?;
            }
            let weights = normal(&mut r, &[b, l, d], 1.0);
            let ids = store.trainable_ids();
            let report = gradcheck_with(&store, &ids, STEP, STENCIL, tol, Coverage::All, |t| {
                let xv = t.param(x);
                let y = bsb_forward(t, &xv, &p, variant)?;
                weighted_sum(t, &y, &weights)
            })?;
            Ok(CaseResult {
                name: format!("bsb {variant}"),
                report,
            })
        })
        .collect()
}

/// Toy model on a batch of two 8×8 inputs in training mode (batch
/// statistics, no stochastic masks), loss = cross-entropy + Dice.
pub fn model_suite(tol: f64) -> Result<Vec<CaseResult>> {
    let (b, h, w) = (2, 8, 8);
    BsbVariant::ALL
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let mut model = Model::new(ModelConfig::toy(variant), 400 + i as u64)?;
            let mut r = rng::stream(500 + i as u64, &[]);
            for id in model.store.trainable_ids() {
                let t = model.store.get(id).clone();
                let jittered = t.zip_map(&normal(&mut r, t.shape(), 0.05), "jitter", |a, e| a + e)?;
                model.store.set(id, jittered)?;
            }
            let image = Tensor::from_fn([b, 3, h, w], |_| r.random::<f64>());
            let (gh, gw) = (fused_extent(h), fused_extent(w));
            let prompts = Tensor::from_fn([b, PROMPT_CHANNELS, gh, gw], |_| f64::from(r.random::<f64>() < 0.3));
            let target: Vec<u8> = (0..b * h * w).map(|_| r.random_range(0..3u8)).collect();
            let weights = ClassWeights(vec![0.7, 1.4, 0.9]);
            let ids = model.store.trainable_ids();
            let mode = Mode::train_fixed();
            let report = gradcheck_with(
                &model.store,
                &ids,
                STEP,
                STENCIL,
                tol,
                Coverage::Sample {
                    per_param: MODEL_COORDS,
                    seed: 600 + i as u64,
                },
                |t| {
                    let x = t.constant(image.clone());
                    let p = t.constant(prompts.clone());
                    let logits = model.forward(t, &x, &p, &mode)?;
                    total_loss(t, &logits, &target, &weights)
                },
            )?;
            Ok(CaseResult {
                name: format!("model {variant}"),
                report,
            })
        })
        .collect()
}
