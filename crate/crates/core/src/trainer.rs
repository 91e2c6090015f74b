//! AdamW training loop with validation, early stopping and the evaluation
//! harness shared with the command line.

use std::fmt::Write as _;

use rand::seq::SliceRandom as _;
use serde::Serialize;

use crate::autodiff::{Ops, Tape};
use crate::bsb::BsbVariant;
use crate::data::augment::{augment, AugmentParams};
use crate::data::checkpoint::Checkpoint;
use crate::data::dataset::{add_noise, eval_prompt, rotate, rotation_angle, stack, train_prompt, Dataset, Split};
use crate::data::tta::{predict_probs, tta_predict};
use crate::data::SegSample;
use crate::decoder::{encode_prompt_batch, Prompt};
use crate::error::{invalid, Error, Result};
use crate::model::{parse_bool, parse_kv, Mode, Model, ModelConfig};
use crate::objective::{argmax_classes, total_loss, BoundaryStats, ClassWeights, ConfusionMatrix, BOUNDARY_TOLERANCE};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation mIoU before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    /// Use at most this many training samples (`0` = the whole split).
    pub train_limit: usize,
    /// Validate with test-time augmentation.
    pub use_tta: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            weight_decay: 0.01,
            batch_size: 8,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            clip_norm: 1.0,
            train_limit: 0,
            use_tta: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and non-negative, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        self.model.validate()
    }

    /// Parses `key=value` lines; unspecified keys keep their defaults. Keys
    /// `variant` and `use_ldf` set the model switches and `model.<key>`
    /// overrides any other architecture field.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut model_kv: std::collections::BTreeMap<String, String> = cfg
            .model
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        for (k, v) in parse_kv(text)? {
            let num_err = |what: &str| Error::Config(format!("{k}: expected {what}, got {v:?}"));
            match k.as_str() {
                "base_lr" | "lr" => cfg.base_lr = v.parse().map_err(|_| num_err("a number"))?,
                "weight_decay" => cfg.weight_decay = v.parse().map_err(|_| num_err("a number"))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| num_err("an integer"))?,
                "max_epochs" | "epochs" => cfg.max_epochs = v.parse().map_err(|_| num_err("an integer"))?,
                "patience" => cfg.patience = v.parse().map_err(|_| num_err("an integer"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| num_err("an integer"))?,
                "clip_norm" => cfg.clip_norm = v.parse().map_err(|_| num_err("a number"))?,
                "train_limit" => cfg.train_limit = v.parse().map_err(|_| num_err("an integer"))?,
                "use_tta" => cfg.use_tta = parse_bool(&k, &v)?,
                "variant" | "use_ldf" => {
                    model_kv.insert(k.clone(), v.clone());
                }
                other => match other.strip_prefix("model.") {
                    Some(mk) if model_kv.contains_key(mk) => {
                        model_kv.insert(mk.to_string(), v.clone());
                    }
                    _ => return Err(Error::Config(format!("unknown key {k:?}"))),
                },
            }
        }
        let kv: String = model_kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        cfg.model = ModelConfig::from_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "clip_norm={}", self.clip_norm);
        let _ = writeln!(s, "train_limit={}", self.train_limit);
        let _ = writeln!(s, "use_tta={}", self.use_tta);
        for line in self.model.to_kv().lines() {
            let _ = writeln!(s, "model.{line}");
        }
        s
    }

    pub fn with_variant(mut self, variant: BsbVariant, use_ldf: bool) -> Self {
        self.model.variant = variant;
        self.model.use_ldf = use_ldf;
        self
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update of `params` in place. Weight decay is decoupled,
/// `p ← p·(1 − lr·wd)`, followed by the bias-corrected adaptive step. A
/// non-finite gradient rejects the whole step before anything changes.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, hp: &AdamW) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return invalid("adamw_step", "parameter, gradient and state counts differ");
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return invalid("adamw_step", format!("tensor {i}: size mismatch"));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "adamw_step",
                detail: format!("gradient of tensor {i} at element {j} is {}", g[j]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            if hp.weight_decay != 0.0 {
                p[j] *= decay;
            }
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Optimizer owning the moments of every trainable tensor of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub hp: AdamW,
    pub ids: Vec<ParamId>,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(store: &ParamStore, hp: AdamW) -> Self {
        let ids = store.trainable_ids();
        let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).len()).collect();
        Self {
            hp,
            ids,
            state: AdamState::new(&sizes),
        }
    }

    /// `grads` in the order of `self.ids`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        let mut values: Vec<Tensor> = self.ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut ps: Vec<&mut [f64]> = values.iter_mut().map(|t| t.data_mut()).collect();
            let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
            adamw_step(&mut ps, &gs, &mut self.state, &self.hp)?;
        }
        for (&id, v) in self.ids.iter().zip(values) {
            store.set(id, v)?;
        }
        Ok(())
    }
}

/// Region and boundary metrics over a split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_biou: Vec<Option<f64>>,
    pub mbiou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tta: bool,
    /// Gaussian pixel noise deviation on the 0–255 scale.
    pub noise_std: f64,
    /// Rotations are drawn uniformly from `[−range, range]` degrees.
    pub rotate_range: f64,
    /// Seed of prompts and perturbations.
    pub seed: u64,
    pub batch_size: usize,
    pub boundary_tolerance: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tta: false,
            noise_std: 0.0,
            rotate_range: 0.0,
            seed: 0,
            batch_size: 8,
            boundary_tolerance: BOUNDARY_TOLERANCE,
        }
    }
}

/// Perturbed copy of evaluation sample `index` and its prompt.
pub fn eval_item(sample: &SegSample, index: usize, k: usize, opts: &EvalOptions) -> Result<(SegSample, Prompt)> {
    let mut s = if opts.rotate_range > 0.0 {
        rotate(sample, rotation_angle(opts.seed, index, opts.rotate_range))?
    } else {
        sample.clone()
    };
    if opts.noise_std > 0.0 {
        let mut r = rng::stream(opts.seed, &[rng::tag::NOISE, index as u64]);
        s.image = add_noise(&s.image, opts.noise_std, &mut r)?;
    }
    let prompt = eval_prompt(opts.seed, index, &s, k);
    Ok((s, prompt))
}

pub fn evaluate(model: &Model, samples: &[SegSample], opts: &EvalOptions) -> Result<Metrics> {
    if samples.is_empty() {
        return invalid("evaluate", "no samples");
    }
    let k = model.config.classes;
    let mut cm = ConfusionMatrix::new(k);
    let mut bs = BoundaryStats::new(k);
    let items = samples
        .iter()
        .enumerate()
        .map(|(i, s)| eval_item(s, i, k, opts))
        .collect::<Result<Vec<_>>>()?;
    for chunk in items.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().map(|(s, _)| s).collect();
        let prompts: Vec<Prompt> = chunk.iter().map(|(_, p)| p.clone()).collect();
        let (images, target) = stack(&refs)?;
        let probs = if opts.tta {
            tta_predict(model, &images, &prompts)?
        } else {
            predict_probs(model, &images, &prompts)?
        };
        let pred = argmax_classes(&probs)?;
        cm.add(&pred, &target)?;
        let (h, w) = (refs[0].height(), refs[0].width());
        for (p, g) in pred.chunks(h * w).zip(target.chunks(h * w)) {
            bs.add(p, g, h, w, opts.boundary_tolerance)?;
        }
    }
    Ok(Metrics {
        per_class_iou: cm.per_class_iou(),
        miou: cm.miou(),
        per_class_biou: bs.per_class(),
        mbiou: bs.mean(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// New best score; keep this epoch's model.
    Improved,
    Continue,
    /// `patience` epochs in a row without improvement.
    Stop,
}

/// Patience counter on a score that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Only a strictly greater score counts as an improvement.
    pub fn observe(&mut self, score: f64) -> Verdict {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_best = 0;
            Verdict::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_mbiou: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_miou,val_mbiou\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_miou, r.val_mbiou);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.best);
        ck.meta.insert("train.best_epoch".into(), self.best_epoch.to_string());
        ck.meta.insert("train.val_miou".into(), format!("{:?}", self.best_val_miou));
        ck.meta.insert("train.seed".into(), cfg.seed.to_string());
        ck.meta.insert("train.base_lr".into(), format!("{:?}", cfg.base_lr));
        ck
    }
}

/// Inverse-root frequency weights over the training masks.
pub fn class_weights(samples: &[SegSample], k: usize) -> Result<ClassWeights> {
    let mut counts = vec![0u64; k];
    for s in samples {
        for (c, n) in s.class_counts(k).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    ClassWeights::from_counts(&counts)
}

/// Loss and gradient (in `ids` order) of one batch; applies nothing.
pub fn batch_gradients(
    model: &Model,
    images: &Tensor,
    prompts: &Tensor,
    target: &[u8],
    weights: &ClassWeights,
    mode: &Mode,
) -> Result<(f64, Vec<(ParamId, Tensor)>, Vec<(crate::autodiff::BnBuffers, crate::tensor::RunningStats)>)> {
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(images.clone());
    let p = tape.constant(prompts.clone());
    let logits = model.forward(&mut tape, &x, &p, mode)?;
    let loss = total_loss(&mut tape, &logits, target, weights)?;
    let value = tape.value_of(loss).item();
    let grads = tape.backward(loss)?.param_map(&model.store);
    let bn = tape.take_bn_updates();
    Ok((value, grads, bn))
}

/// Runs the full protocol on the train and validation splits of `data`.
/// `progress` receives every finished epoch.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut train_set = data.split(Split::Train);
    if cfg.train_limit > 0 && cfg.train_limit < train_set.len() {
        train_set = &train_set[..cfg.train_limit];
    }
    let val_set = data.split(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return invalid("train", "the dataset has an empty train or validation split");
    }
    if data.meta.classes != cfg.model.classes {
        return invalid(
            "train",
            format!("dataset has {} classes, model {}", data.meta.classes, cfg.model.classes),
        );
    }
    let k = cfg.model.classes;
    let weights = class_weights(train_set, k)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(&model.store, AdamW::new(cfg.base_lr, cfg.weight_decay));
    let eval_opts = EvalOptions {
        tta: cfg.use_tta,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        ..EvalOptions::default()
    };
    let (h, w) = (data.meta.height, data.meta.width);

    let mut history = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut stopper = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::ORDER, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut samples = Vec::with_capacity(chunk.len());
            let mut prompts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let p = AugmentParams::from_seed(cfg.seed, i as u64, epoch as u64, h, w);
                let s = augment(&train_set[i], &p)?;
                prompts.push(train_prompt(cfg.seed, epoch, i, &s, k));
                samples.push(s);
            }
            let refs: Vec<&SegSample> = samples.iter().collect();
            let (images, target) = stack(&refs)?;
            let prompt_map = encode_prompt_batch(&prompts, h, w)?;
            let mut mask_rng = rng::stream(cfg.seed, &[rng::tag::MASKS, epoch as u64, step as u64]);
            let mode = Mode::train_sampled(&model.config, &mut mask_rng, chunk.len(), h, w);
            let (loss, grads, bn) = batch_gradients(&model, &images, &prompt_map, &target, &weights, &mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "train",
                    detail: format!("loss {loss} at epoch {epoch}, step {step}"),
                });
            }
            let mut g: Vec<Tensor> = grads.into_iter().map(|(_, t)| t).collect();
            clip_global_norm(&mut g, cfg.clip_norm);
            opt.step(&mut model.store, &g)?;
            model.apply_bn_updates(bn)?;
            loss_sum += loss;
            steps += 1;
        }
        let metrics = evaluate(&model, val_set, &eval_opts)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_miou: metrics.miou,
            val_mbiou: metrics.mbiou,
        };
        progress(&rec);
        history.push(rec);
        match stopper.observe(metrics.miou) {
            Verdict::Improved => best = Some((model.clone(), epoch, metrics.miou)),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best, best_epoch, best_val_miou) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_miou,
        history,
    })
}

/// Test-split metrics of a trained model with the default options.
pub fn test_metrics(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<Metrics> {
    evaluate(model, data.split(Split::Test), opts)
}

/// One trained configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_ldf: bool,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_miou: f64,
    pub test_miou: f64,
    pub test_mbiou: f64,
}

/// Trains every `variant × ldf × seed` combination from `base` and reports
/// the best-epoch validation score and test metrics of each.
pub fn ablation(
    base: &TrainConfig,
    data: &Dataset,
    variants: &[BsbVariant],
    ldf: &[bool],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * ldf.len() * seeds.len());
    for &variant in variants {
        for &use_ldf in ldf {
            for &seed in seeds {
                let cfg = TrainConfig {
                    seed,
                    ..base.clone().with_variant(variant, use_ldf)
                };
                let out = train(&cfg, data, |_| {})?;
                let opts = EvalOptions {
                    seed,
                    tta: cfg.use_tta,
                    ..EvalOptions::default()
                };
                let test = test_metrics(&out.best, data, &opts)?;
                let row = AblationRow {
                    variant: variant.name().to_string(),
                    use_ldf,
                    seed,
                    best_epoch: out.best_epoch,
                    val_miou: out.best_val_miou,
                    test_miou: test.miou,
                    test_mbiou: test.mbiou,
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Mean test mIoU over seeds of one `(variant, use_ldf)` cell, if present.
pub fn ablation_mean(rows: &[AblationRow], variant: BsbVariant, use_ldf: bool) -> Option<f64> {
    let cell: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant.name() && r.use_ldf == use_ldf)
        .map(|r| r.test_miou)
        .collect();
    (!cell.is_empty()).then(|| cell.iter().sum::<f64>() / cell.len() as f64)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,use_ldf,seed,best_epoch,val_miou,test_miou,test_mbiou\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant, r.use_ldf, r.seed, r.best_epoch, r.val_miou, r.test_miou, r.test_mbiou
        );
    }
    s
}
