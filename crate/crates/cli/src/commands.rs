use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bsbseg_core::bench::{bench_model, bench_sequence, model_macs};
use bsbseg_core::bsb::BsbVariant;
use bsbseg_core::checks::{self, CaseResult};
use bsbseg_core::data::checkpoint::Checkpoint;
use bsbseg_core::data::dataset::{write_dataset, Dataset, Split};
use bsbseg_core::data::pnm::{read_ppm, write_pgm, GrayImage};
use bsbseg_core::data::tta::{predict_probs, tta_predict};
use bsbseg_core::decoder::Prompt;
use bsbseg_core::model::{Model, ModelConfig};
use bsbseg_core::objective::argmax_classes;
use bsbseg_core::trainer::{self, history_csv, EvalOptions, TrainConfig};
use serde_json::json;

use crate::args::{AblateArgs, BenchArgs, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, TrainArgs};

fn emit(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ck.to_model()?)
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let (h, w) = a.size;
    let meta = write_dataset(&a.out, a.seed, a.count, h, w, a.force)?;
    eprintln!("wrote {} samples of {h}x{w} to {}", meta.count, a.out.display());
    emit(&serde_json::to_value(meta)?)?;
    Ok(ExitCode::SUCCESS)
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_kv(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    })
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse()?;
    }
    if a.no_ldf {
        cfg.model.use_ldf = false;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    eprintln!(
        "training {} (ldf {}) on {} samples, lr {}, up to {} epochs",
        cfg.model.variant,
        cfg.model.use_ldf,
        data.split(Split::Train).len(),
        cfg.base_lr,
        cfg.max_epochs
    );
    let start = std::time::Instant::now();
    let outcome = trainer::train(&cfg, &data, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val mIoU {:.4}  val mBIoU {:.4}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val_miou,
            r.val_mbiou,
            start.elapsed().as_secs_f64()
        );
    })?;
    outcome.checkpoint(&cfg).save(&a.out)?;
    let history_path: PathBuf = a.history.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    std::fs::write(&history_path, history_csv(&outcome.history))?;
    let opts = EvalOptions {
        seed: cfg.seed,
        ..EvalOptions::default()
    };
    let test = trainer::test_metrics(&outcome.best, &data, &opts)?;
    eprintln!(
        "best epoch {} with val mIoU {:.4}; test mIoU {:.4}",
        outcome.best_epoch, outcome.best_val_miou, test.miou
    );
    emit(&json!({
        "checkpoint": a.out,
        "history": history_path,
        "variant": cfg.model.variant.name(),
        "use_ldf": cfg.model.use_ldf,
        "best_epoch": outcome.best_epoch,
        "best_val_miou": outcome.best_val_miou,
        "test": test,
    }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn infer(a: InferArgs) -> Result<ExitCode> {
    let img = read_ppm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let (h, w) = (img.height, img.width);
    let prompt = Prompt {
        points: a.points,
        boxes: a.boxes,
    };
    prompt.validate(h, w)?;
    let model = load_model(&a.ckpt)?;
    let image = img.to_tensor().reshape([1, 3, h, w])?;
    let prompts = [prompt];
    let probs = if a.tta {
        tta_predict(&model, &image, &prompts)?
    } else {
        predict_probs(&model, &image, &prompts)?
    };
    let classes = argmax_classes(&probs)?;
    write_pgm(&a.out, &GrayImage::new(w, h, classes)?)?;
    eprintln!("wrote {h}x{w} class map to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let model = load_model(&a.ckpt)?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let opts = EvalOptions {
        tta: a.tta,
        noise_std: a.noise_std,
        rotate_range: a.rotate_range,
        seed: a.seed,
        ..EvalOptions::default()
    };
    let samples = data.split(split);
    if samples.is_empty() {
        bail!("the {} split is empty", a.split);
    }
    eprintln!(
        "evaluating {} {} samples (tta {}, noise std {}, rotation ±{}°)",
        samples.len(),
        a.split,
        a.tta,
        a.noise_std,
        a.rotate_range
    );
    let m = trainer::evaluate(&model, samples, &opts)?;
    eprintln!("mIoU {:.4}  mBIoU {:.4}", m.miou, m.mbiou);
    emit(&serde_json::to_value(m)?)?;
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    let variants: Vec<BsbVariant> = if a.variants.is_empty() {
        BsbVariant::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
    };
    let ldf: &[bool] = match a.ldf.as_str() {
        "on" => &[true],
        "off" => &[false],
        _ => &[true, false],
    };
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    eprintln!(
        "ablation over {} variants, {} decoder settings, {} seeds",
        variants.len(),
        ldf.len(),
        a.seeds.len()
    );
    let rows = trainer::ablation(&cfg, &data, &variants, ldf, &a.seeds, |r| {
        eprintln!(
            "{:<15} ldf {:<5} seed {:<4} best epoch {:>3}  val mIoU {:.4}  test mIoU {:.4}",
            r.variant, r.use_ldf, r.seed, r.best_epoch, r.val_miou, r.test_miou
        );
    })?;
    std::fs::write(&a.out, trainer::ablation_csv(&rows))?;
    let mut means = Vec::new();
    for &v in &variants {
        for &l in ldf {
            if let Some(m) = trainer::ablation_mean(&rows, v, l) {
                eprintln!("mean test mIoU {:<15} ldf {:<5} {:.4}", v.name(), l, m);
                means.push(json!({ "variant": v.name(), "use_ldf": l, "mean_test_miou": m }));
            }
        }
    }
    emit(&json!({ "table": a.out, "runs": rows, "means": means }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn bench(a: BenchArgs) -> Result<ExitCode> {
    let model = match &a.ckpt {
        Some(p) => load_model(p)?,
        None => Model::new(ModelConfig::default(), 0)?,
    };
    let report = if a.seq_only {
        eprintln!("timing one sequence block over {} lengths", a.lengths.len());
        bench_sequence(&model, &a.lengths, a.runs, a.warmup)?
    } else {
        eprintln!("timing inference over {} resolutions", a.resolutions.len());
        bench_model(&model, &a.resolutions, a.runs, a.warmup)?
    };
    for r in &report.records {
        eprintln!(
            "{:>6}x{:<6} {:>10} px  {:>10.1} ms  {:>14} MACs",
            r.width, r.height, r.pixels, r.median_ms, r.macs
        );
    }
    eprintln!(
        "log-log slope: runtime {:.3}, op count {:.3}",
        report.runtime_slope, report.macs_slope
    );
    let breakdown = if a.seq_only {
        None
    } else {
        a.resolutions
            .last()
            .map(|&(w, h)| model_macs(&model.config, h, w))
            .transpose()?
    };
    emit(&json!({
        "mode": if a.seq_only { "sequence" } else { "model" },
        "records": report.records,
        "runtime_slope": report.runtime_slope,
        "macs_slope": report.macs_slope,
        "largest_breakdown": breakdown,
    }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let modules: Vec<&str> = match a.module.as_deref() {
        Some(m) => vec![m],
        None => vec!["ssm", "bsb", "model"],
    };
    let mut cases: Vec<CaseResult> = Vec::new();
    for m in modules {
        let tol = a.tol.unwrap_or(match m {
            "model" => checks::MODEL_TOLERANCE,
            "bsb" => checks::BLOCK_TOLERANCE,
            _ => checks::SCAN_TOLERANCE,
        });
        eprintln!("checking {m} at tolerance {tol:e}");
        let results = match m {
            "ssm" => checks::ssm_suite(tol)?,
            "bsb" => checks::bsb_suite(tol)?,
            _ => checks::model_suite(tol)?,
        };
        cases.extend(results);
    }
    let mut all = true;
    let mut rows = Vec::new();
    for c in &cases {
        let ok = c.passed();
        all &= ok;
        eprintln!(
            "{} {:<28} max rel err {:.2e} over {} tensors",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_err(),
            c.report.params.len()
        );
        rows.push(json!({
            "case": c.name,
            "passed": ok,
            "tolerance": c.report.tolerance,
            "max_rel_err": c.report.max_rel_err(),
        }));
    }
    emit(&json!({ "passed": all, "cases": rows }))?;
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
