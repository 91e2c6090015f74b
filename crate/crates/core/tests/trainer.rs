use bsbseg_core::bsb::BsbVariant;
use bsbseg_core::data::checkpoint::Checkpoint;
use bsbseg_core::data::dataset::{Dataset, Split};
use bsbseg_core::model::{Model, ModelConfig};
use bsbseg_core::trainer::{
    ablation, ablation_csv, ablation_mean, evaluate, train, EarlyStopping, EvalOptions, TrainConfig, Verdict,
};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        batch_size: 4,
        max_epochs: 2,
        seed,
        model: ModelConfig::toy(BsbVariant::DualGate),
        ..TrainConfig::default()
    }
}

fn small_data() -> Dataset {
    Dataset::generate(3, 30, 32, 32).unwrap()
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let data = small_data();
    let cfg = small_config(5);
    let a = train(&cfg, &data, |_| {}).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint(&cfg).to_bytes().unwrap(), b.checkpoint(&cfg).to_bytes().unwrap());
    let c = train(&small_config(6), &data, |_| {}).unwrap();
    assert_ne!(a.checkpoint(&cfg).to_bytes().unwrap(), c.checkpoint(&cfg).to_bytes().unwrap());
}

#[test]
fn best_checkpoint_reproduces_its_validation_score() {
    let data = small_data();
    let cfg = small_config(7);
    let out = train(&cfg, &data, |_| {}).unwrap();
    let best_so_far = out.history.iter().map(|r| r.val_miou).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_miou, best_so_far);
    assert_eq!(out.history[out.best_epoch - 1].val_miou, out.best_val_miou);

    let reloaded = Checkpoint::from_bytes(&out.checkpoint(&cfg).to_bytes().unwrap()).unwrap().to_model().unwrap();
    let opts = EvalOptions {
        tta: cfg.use_tta,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        ..EvalOptions::default()
    };
    let m = evaluate(&reloaded, data.split(Split::Val), &opts).unwrap();
    assert_eq!(m.miou, out.best_val_miou);
}

#[test]
fn zero_learning_rate_freezes_trainable_parameters() {
    let data = small_data();
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..small_config(9)
    };
    let out = train(&cfg, &data, |_| {}).unwrap();
    let fresh = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    for id in fresh.store.trainable_ids() {
        assert_eq!(fresh.store.get(id), out.best.store.get(id), "{}", fresh.store.name(id));
    }
}

#[test]
fn patience_one_stops_after_two_worsening_epochs() {
    let mut s = EarlyStopping::new(1);
    assert_eq!(s.observe(0.5), Verdict::Improved);
    assert_eq!(s.observe(0.4), Verdict::Stop);

    let mut s = EarlyStopping::new(3);
    let verdicts: Vec<Verdict> = [0.2, 0.3, 0.3, 0.25, 0.31, 0.1, 0.1, 0.1].iter().map(|&v| s.observe(v)).collect();
    use Verdict::*;
    assert_eq!(verdicts, [Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]);
}

#[test]
fn empty_splits_are_rejected() {
    let mut data = small_data();
    data.samples.clear();
    data.meta.count = 0;
    assert!(train(&small_config(1), &data, |_| {}).is_err());
}

#[test]
fn ablation_grid_covers_every_cell() {
    let data = small_data();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small_config(2)
    };
    let variants = [BsbVariant::DualGate, BsbVariant::NoGate];
    let rows = ablation(&cfg, &data, &variants, &[true, false], &[0, 1], |_| {}).unwrap();
    assert_eq!(rows.len(), 8);
    for v in variants {
        for ldf in [true, false] {
            let m = ablation_mean(&rows, v, ldf).unwrap();
            assert!((0.0..=1.0).contains(&m));
        }
    }
    assert!(ablation_mean(&rows, BsbVariant::NoConv, true).is_none());
    assert_eq!(ablation_csv(&rows).lines().count(), 9);
}
