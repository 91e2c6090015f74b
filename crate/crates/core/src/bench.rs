//! Analytic multiply-add counts, wall-clock timing and log-log slope fits.
//!
//! Counted operations are the multiply-adds of convolutions, linear maps,
//! bilinear upsampling (four per output element) and the scan recurrence
//! (discretisation, state update and readout, four per state element and
//! token). Normalisations, activations and reshapes are not counted.

use std::borrow::Cow;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Eval;
use crate::bsb::{bsb_forward, BsbParams, BsbVariant, CONV_WIDTH, EXPANSION};
use crate::decoder::{encode_prompt_batch, Prompt, PROMPT_CHANNELS};
use crate::encoder::{Padding, CONV_BLOCK_EXPANSION};
use crate::error::{invalid, Result};
use crate::model::{Model, ModelConfig};
use crate::seq2d::SerializationPlan;
use crate::tensor::Tensor;

/// Multiply-adds of one scan element update and readout.
pub const SCAN_MACS_PER_STATE: u64 = 4;

/// Multiply-adds of one block application on `tokens` tokens of width `dim`.
pub fn bsb_macs(dim: usize, state: usize, variant: BsbVariant, tokens: usize) -> u64 {
    let (d, e, n) = (dim as u64, (EXPANSION * dim) as u64, state as u64);
    let directions: u64 = if variant == BsbVariant::Unidirectional { 1 } else { 2 };
    let conv = if variant == BsbVariant::NoConv { 0 } else { e * CONV_WIDTH as u64 };
    let per_direction = conv + e * e + 2 * e * n + SCAN_MACS_PER_STATE * e * n;
    let gates = variant.gates() as u64 * e * e;
    let per_token = 2 * d * e + directions * per_direction + gates + e * d;
    per_token * tokens as u64
}

fn conv_macs(h: usize, w: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    (h * w * cout * (cin / groups) * k * k) as u64
}

fn conv_block_macs(h: usize, w: usize, c: usize) -> u64 {
    let e = CONV_BLOCK_EXPANSION * c;
    conv_macs(h, w, c, e, 1, 1) + conv_macs(h, w, e, e, 3, e) + conv_macs(h, w, e, c, 1, 1)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub stem: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub stage3: u64,
    pub decoder: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.stem + self.stage1 + self.stage2 + self.stage3 + self.decoder
    }
}

/// Per-module multiply-adds of one forward pass on an `h × w` input.
pub fn model_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<MacBreakdown> {
    let pad = Padding::for_extent(h, w);
    let (ph, pw) = (h + pad.bottom, w + pad.right);
    let [c1, c2, c3] = cfg.widths;
    let (h2, w2) = (ph / 2, pw / 2);
    let (h4, w4) = (ph / 4, pw / 4);
    let (h8, w8) = (ph / 8, pw / 8);
    let (h16, w16) = (ph / 16, pw / 16);

    let stem = conv_macs(h2, w2, cfg.in_channels, cfg.stem_width, 3, 1) + conv_macs(h4, w4, cfg.stem_width, c1, 3, 1);
    let stage1 = cfg.stage1_blocks as u64 * conv_block_macs(h4, w4, c1);
    let stage2 = conv_macs(h8, w8, c1, c2, 3, 1) + cfg.stage2_blocks as u64 * conv_block_macs(h8, w8, c2);
    let plan = SerializationPlan::for_map(h16, w16)?;
    let inner = bsb_macs(c3, cfg.state, cfg.variant, plan.groups() * plan.tokens_per_group());
    let outer = bsb_macs(c3, cfg.state, cfg.variant, plan.groups());
    let stage3 = conv_macs(h16, w16, c2, c3, 3, 1) + cfg.bsb_depth as u64 * (inner + outer);

    let f = cfg.fuse_width;
    let up = |h: usize, w: usize, c: usize| 4 * (4 * h * w * c) as u64;
    let decoder = up(h16, w16, c3)
        + conv_macs(h8, w8, c3 + c2, f, 1, 1)
        + up(h8, w8, f)
        + conv_macs(h4, w4, f + c1, f, 1, 1)
        + 2 * conv_macs(h4, w4, f, f, 3, f)
        + conv_macs(h4, w4, f + PROMPT_CHANNELS, f, 1, 1)
        + up(h4, w4, f)
        + conv_macs(h2, w2, f, cfg.head_width, 3, 1)
        + up(h2, w2, cfg.head_width)
        + conv_macs(ph, pw, cfg.head_width, cfg.classes, 1, 1);
    Ok(MacBreakdown {
        stem,
        stage1,
        stage2,
        stage3,
        decoder,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return invalid("loglog_slope", format!("need two or more paired points, got {} and {}", xs.len(), ys.len()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return invalid("loglog_slope", "values must be positive and finite");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return invalid("loglog_slope", "all x values are equal");
    }
    Ok(sxy / sxx)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall time in milliseconds of `runs` calls after `warmup` calls.
pub fn time_median(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if runs == 0 {
        return invalid("time_median", "at least one timed run is required");
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut times))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub width: usize,
    pub height: usize,
    /// Pixels, or tokens for the sequence benchmark.
    pub pixels: usize,
    pub median_ms: f64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub runtime_slope: f64,
    pub macs_slope: f64,
}

impl BenchReport {
    pub fn from_records(records: Vec<BenchRecord>) -> Result<Self> {
        let px: Vec<f64> = records.iter().map(|r| r.pixels as f64).collect();
        let ms: Vec<f64> = records.iter().map(|r| r.median_ms).collect();
        let macs: Vec<f64> = records.iter().map(|r| r.macs as f64).collect();
        Ok(Self {
            runtime_slope: loglog_slope(&px, &ms)?,
            macs_slope: loglog_slope(&px, &macs)?,
            records,
        })
    }
}

fn bench_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, 3, h, w], |i| ((i * 2_654_435_761) % 251) as f64 / 250.0)
}

/// Times single-image inference at each `(width, height)`.
pub fn bench_model(model: &Model, resolutions: &[(usize, usize)], runs: usize, warmup: usize) -> Result<BenchReport> {
    let mut records = Vec::with_capacity(resolutions.len());
    for &(w, h) in resolutions {
        let image = bench_image(h, w);
        let prompts = encode_prompt_batch(&[Prompt::default()], h, w)?;
        let ms = time_median(runs, warmup, || model.infer(&image, &prompts).map(|_| ()))?;
        records.push(BenchRecord {
            width: w,
            height: h,
            pixels: w * h,
            median_ms: ms,
            macs: model_macs(&model.config, h, w)?.total(),
        });
    }
    BenchReport::from_records(records)
}

/// Times one block application on `[1, L, D]` tokens for each length.
pub fn bench_sequence(model: &Model, lengths: &[usize], runs: usize, warmup: usize) -> Result<BenchReport> {
    let Some(layer) = model.encoder.stage3.first() else {
        return invalid("bench_sequence", "model has no sequence blocks");
    };
    let p: &BsbParams = &layer.inner;
    let variant = model.config.variant;
    let mut records = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let tokens = Tensor::from_fn([1, l, p.dim], |i| ((i * 40_503) % 97) as f64 / 48.0 - 1.0);
        let ms = time_median(runs, warmup, || {
            let mut ev = Eval::new(&model.store);
            bsb_forward(&mut ev, &Cow::Borrowed(&tokens), p, variant).map(|_| ())
        })?;
        records.push(BenchRecord {
            width: l,
            height: 1,
            pixels: l,
            median_ms: ms,
            macs: bsb_macs(p.dim, model.config.state, variant, l),
        });
    }
    BenchReport::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_injected_powers() {
        let xs = [76_800.0, 307_200.0, 786_432.0, 1_769_472.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((loglog_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
