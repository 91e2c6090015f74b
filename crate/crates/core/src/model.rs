//! Full segmentation network: encoder, prompt raster and decoder.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;

use crate::autodiff::{BnBuffers, Eval, Ops};
use crate::bsb::{drop_path_rates, sample_drop_path, BsbVariant};
use crate::decoder::{fused_extent, predict, DecoderParams, DROPOUT};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{RunningStats, Tensor};

/// Architecture hyper-parameters. Together with a seed they determine the
/// parameter set completely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Channel widths of the 4×, 8× and 16× stages.
    pub widths: [usize; 3],
    pub stage1_blocks: usize,
    pub stage2_blocks: usize,
    pub bsb_depth: usize,
    /// SSM state size `N`.
    pub state: usize,
    pub fuse_width: usize,
    pub head_width: usize,
    pub classes: usize,
    pub variant: BsbVariant,
    pub use_ldf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_width: 16,
            widths: [32, 64, 128],
            stage1_blocks: 2,
            stage2_blocks: 2,
            bsb_depth: 2,
            state: 16,
            fuse_width: 128,
            head_width: 16,
            classes: 3,
            variant: BsbVariant::DualGate,
            use_ldf: true,
        }
    }
}

impl ModelConfig {
    /// Narrow configuration for finite-difference checks.
    pub fn toy(variant: BsbVariant) -> Self {
        Self {
            in_channels: 3,
            stem_width: 4,
            widths: [4, 6, 8],
            stage1_blocks: 1,
            stage2_blocks: 1,
            bsb_depth: 2,
            state: 3,
            fuse_width: 6,
            head_width: 4,
            classes: 3,
            variant,
            use_ldf: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c1, c2, c3] = self.widths;
        if self.in_channels == 0
            || self.stem_width == 0
            || c1 == 0
            || self.state == 0
            || self.fuse_width == 0
            || self.head_width == 0
        {
            return Err(Error::Config("widths must be positive".into()));
        }
        if !(c1 <= c2 && c2 <= c3) {
            return Err(Error::Config(format!("stage widths must be non-decreasing, got {:?}", self.widths)));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("class count must be in 2..=256, got {}", self.classes)));
        }
        Ok(())
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let [c1, c2, c3] = self.widths;
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "stem_width={}", self.stem_width);
        let _ = writeln!(s, "widths={c1},{c2},{c3}");
        let _ = writeln!(s, "stage1_blocks={}", self.stage1_blocks);
        let _ = writeln!(s, "stage2_blocks={}", self.stage2_blocks);
        let _ = writeln!(s, "bsb_depth={}", self.bsb_depth);
        let _ = writeln!(s, "state={}", self.state);
        let _ = writeln!(s, "fuse_width={}", self.fuse_width);
        let _ = writeln!(s, "head_width={}", self.head_width);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "use_ldf={}", self.use_ldf);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("missing key {k:?}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{k}: expected an integer")))
        };
        let widths: Vec<usize> = get("widths")?
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("widths: expected three integers".into()))?;
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| Error::Config("widths: expected three integers".into()))?;
        let cfg = Self {
            in_channels: num("in_channels")?,
            stem_width: num("stem_width")?,
            widths,
            stage1_blocks: num("stage1_blocks")?,
            stage2_blocks: num("stage2_blocks")?,
            bsb_depth: num("bsb_depth")?,
            state: num("state")?,
            fuse_width: num("fuse_width")?,
            head_width: num("head_width")?,
            classes: num("classes")?,
            variant: get("variant")?.parse()?,
            use_ldf: parse_bool("use_ldf", get("use_ldf")?)?,
        };
        if let Some(k) = map.keys().find(|k| !MODEL_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const MODEL_KEYS: [&str; 12] = [
    "in_channels",
    "stem_width",
    "widths",
    "stage1_blocks",
    "stage2_blocks",
    "bsb_depth",
    "state",
    "fuse_width",
    "head_width",
    "classes",
    "variant",
    "use_ldf",
];

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {:?}", i + 1, k.trim())));
        }
    }
    Ok(map)
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// Per-forward switches and pre-sampled stochastic masks.
#[derive(Clone, Debug, Default)]
pub struct Mode {
    /// Batch statistics in batch norm (and running-stat updates).
    pub training: bool,
    /// Per stage-3 layer, per-sample residual multipliers.
    pub drop_path: Vec<Option<Vec<f64>>>,
    /// Multiplier applied to the decoder's prompt projection.
    pub dropout: Option<Tensor>,
}

impl Mode {
    pub fn eval() -> Self {
        Self::default()
    }

    /// Training mode without stochastic masks.
    pub fn train_fixed() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    /// Training mode with drop-path and dropout masks drawn from `rng` for a
    /// batch of `batch` inputs of extent `h×w`.
    pub fn train_sampled(cfg: &ModelConfig, rng: &mut Rng, batch: usize, h: usize, w: usize) -> Self {
        let drop_path = drop_path_rates(cfg.bsb_depth)
            .into_iter()
            .map(|r| sample_drop_path(rng, batch, r))
            .collect();
        let shape = [batch, cfg.fuse_width, fused_extent(h), fused_extent(w)];
        let keep = 1.0 / (1.0 - DROPOUT);
        let dropout = Tensor::from_fn(shape, |_| if rng.random::<f64>() < DROPOUT { 0.0 } else { keep });
        Self {
            training: true,
            drop_path,
            dropout: Some(dropout),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (encoder, decoder) = {
            let mut init = ParamInit::new(&mut store, rng::stream(seed, &[rng::tag::INIT]));
            let e = EncoderParams::init(&mut init, &config)?;
            let d = DecoderParams::init(&mut init, &config)?;
            (e, d)
        };
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// `image: [B,3,H,W]`, `prompts: [B,3,H'/4,W'/4]` → logits `[B,K,H,W]`.
    pub fn forward<O: Ops>(&self, ops: &mut O, image: &O::V, prompts: &O::V, mode: &Mode) -> Result<O::V> {
        let (pyr, pad) = encode(ops, image, &self.encoder, mode)?;
        predict(ops, &pyr, prompts, &self.decoder, pad, self.config.use_ldf, mode)
    }

    /// Eval-mode logits without recording a graph.
    pub fn infer(&self, image: &Tensor, prompts: &Tensor) -> Result<Tensor> {
        let mut ev = Eval::new(&self.store);
        let out = self.forward(&mut ev, &Cow::Borrowed(image), &Cow::Borrowed(prompts), &Mode::eval())?;
        Ok(out.into_owned())
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(BnBuffers, RunningStats)>) -> Result<()> {
        for (buf, stats) in updates {
            let c = stats.mean.len();
            self.store.set(buf.mean, Tensor::new([c], stats.mean)?)?;
            self.store.set(buf.var, Tensor::new([c], stats.var)?)?;
        }
        Ok(())
    }
}
