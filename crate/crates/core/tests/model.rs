//! Encoder, decoder and token-serialisation checks against direct-loop
//! transcriptions and structural properties.

use std::borrow::Cow;

use bsbseg_core::autodiff::Eval;
use bsbseg_core::bench::model_macs;
use bsbseg_core::bsb::{BsbParams, BsbVariant};
use bsbseg_core::decoder::{encode_prompt_batch, fuse_pyramid, fused_extent, Point, Prompt, PROMPT_CHANNELS};
use bsbseg_core::encoder::{conv_block, encode, ConvBlock, FeaturePyramid, LN_EPS};
use bsbseg_core::layers::{Conv, ConvBnAct, BN_EPS};
use bsbseg_core::model::{Mode, Model, ModelConfig};
use bsbseg_core::params::{ParamId, ParamInit, ParamKind, ParamStore};
use bsbseg_core::rng;
use bsbseg_core::seq2d::{deserialize, pool_unpool_context, serialize, SerializationPlan};
use bsbseg_core::Tensor;
use bsbseg_oracles::image::{self as img, Map};
use proptest::prelude::*;
use rand::Rng as _;

fn uniform(r: &mut rng::Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| scale * (2.0 * r.random::<f64>() - 1.0))
}

/// Perturbs every tensor in the store. Running variances stay positive.
fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, &[]);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get(id).clone();
        let is_var = store.kind(id) == ParamKind::Buffer && store.name(id).ends_with("running_var");
        let next = Tensor::from_fn(t.shape().to_vec(), |i| {
            let e = scale * (2.0 * r.random::<f64>() - 1.0);
            if is_var {
                0.5 + r.random::<f64>()
            } else {
                t.data()[i] + e
            }
        });
        store.set(id, next).unwrap();
    }
}

fn values(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn batch_item(t: &Tensor, b: usize) -> Map {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    Map {
        c,
        h,
        w,
        data: t.data()[b * c * h * w..(b + 1) * c * h * w].to_vec(),
    }
}

fn oracle_conv(store: &ParamStore, p: &Conv, x: &Map) -> Map {
    let shape = store.get(p.w).shape().to_vec();
    let bias = p.b.map(|b| values(store, b));
    img::conv2d(x, &values(store, p.w), bias.as_deref(), shape[0], shape[2], p.stride, p.pad, p.groups)
}

fn oracle_conv_bn_act(store: &ParamStore, p: &ConvBnAct, x: &Map) -> Map {
    let c = oracle_conv(store, &p.conv, x);
    let n = img::batch_norm_eval(
        &c,
        &values(store, p.bn.gamma),
        &values(store, p.bn.beta),
        &values(store, p.bn.buffers.mean),
        &values(store, p.bn.buffers.var),
        BN_EPS,
    );
    img::map_values(&n, img::silu)
}

fn oracle_conv_block(store: &ParamStore, p: &ConvBlock, x: &Map) -> Map {
    let n = img::layer_norm_channels(x, &values(store, p.ln_gamma), &values(store, p.ln_beta), LN_EPS);
    let wide = oracle_conv(store, &p.expand, &n);
    let mixed = img::map_values(&oracle_conv(store, &p.depthwise, &wide), img::silu);
    img::add(&oracle_conv(store, &p.project, &mixed), x)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scaled_err(got: &Tensor, reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_diff(got.data(), reference) / scale
}

#[test]
fn conv_block_matches_transcription() {
    for (seed, (c, h, w)) in [(3usize, 6usize, 5usize), (4, 8, 8), (2, 3, 7)].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let p = ConvBlock::init(&mut ParamInit::new(&mut store, rng::stream(seed as u64, &[rng::tag::INIT])), "cb", c).unwrap();
        jitter(&mut store, 10 + seed as u64, 0.3);
        let x = uniform(&mut rng::stream(20 + seed as u64, &[]), &[2, c, h, w], 1.0);
        let mut ev = Eval::new(&store);
        let y = conv_block(&mut ev, &Cow::Borrowed(&x), &p).unwrap().into_owned();
        let mut reference = Vec::new();
        for b in 0..2 {
            reference.extend(oracle_conv_block(&store, &p, &batch_item(&x, b)).data);
        }
        let err = scaled_err(&y, &reference);
        assert!(err <= 1e-10, "c={c} {h}x{w}: {err:e}");
    }
}

#[test]
fn conv_block_with_zero_projection_is_identity() {
    let mut store = ParamStore::new();
    let p = ConvBlock::init(&mut ParamInit::new(&mut store, rng::stream(1, &[rng::tag::INIT])), "cb", 4).unwrap();
    jitter(&mut store, 2, 0.3);
    for id in [p.project.w, p.project.b.unwrap()] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = uniform(&mut rng::stream(3, &[]), &[1, 4, 6, 6], 2.0);
    let mut ev = Eval::new(&store);
    let y = conv_block(&mut ev, &Cow::Borrowed(&x), &p).unwrap();
    assert_eq!(y.data(), x.data());
}

fn random_pyramid(cfg: &ModelConfig, b: usize, fh: usize, fw: usize, seed: u64) -> FeaturePyramid<Tensor> {
    let mut r = rng::stream(seed, &[]);
    let [c1, c2, c3] = cfg.widths;
    FeaturePyramid {
        lf: uniform(&mut r, &[b, c1, 4 * fh, 4 * fw], 1.0),
        mf: uniform(&mut r, &[b, c2, 2 * fh, 2 * fw], 1.0),
        f: uniform(&mut r, &[b, c3, fh, fw], 1.0),
    }
}

fn oracle_fusion(model: &Model, pyr: &FeaturePyramid<Tensor>, b: usize, use_ldf: bool) -> Map {
    let s = &model.store;
    let d = &model.decoder;
    let lateral = |t: &Tensor| {
        let m = batch_item(t, b);
        if use_ldf {
            m
        } else {
            Map::zeros(m.c, m.h, m.w)
        }
    };
    let x = img::concat(&img::upsample2x(&batch_item(&pyr.f, b)), &lateral(&pyr.mf));
    let x = oracle_conv(s, &d.fuse_mid, &x);
    let x = img::concat(&img::upsample2x(&x), &lateral(&pyr.lf));
    let mut x = oracle_conv(s, &d.fuse_low, &x);
    for r in &d.refine {
        x = oracle_conv_bn_act(s, r, &x);
    }
    x
}

#[test]
fn fusion_matches_transcription() {
    for (i, variant) in [BsbVariant::DualGate, BsbVariant::NoGate].into_iter().enumerate() {
        let cfg = ModelConfig::toy(variant);
        let mut model = Model::new(cfg.clone(), 30 + i as u64).unwrap();
        jitter(&mut model.store, 40 + i as u64, 0.2);
        let pyr = random_pyramid(&cfg, 2, 3, 2, 50 + i as u64);
        for use_ldf in [true, false] {
            let mut ev = Eval::new(&model.store);
            let cow = FeaturePyramid {
                lf: Cow::Borrowed(&pyr.lf),
                mf: Cow::Borrowed(&pyr.mf),
                f: Cow::Borrowed(&pyr.f),
            };
            let y = fuse_pyramid(&mut ev, &cow, &model.decoder, use_ldf, false).unwrap().into_owned();
            assert_eq!(y.shape(), &[2, cfg.fuse_width, 12, 8]);
            let mut reference = Vec::new();
            for b in 0..2 {
                reference.extend(oracle_fusion(&model, &pyr, b, use_ldf).data);
            }
            let err = scaled_err(&y, &reference);
            assert!(err <= 1e-10, "{variant} ldf={use_ldf}: {err:e}");
        }
    }
}

#[test]
fn default_fused_map_geometry() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let image = uniform(&mut rng::stream(1, &[]), &[1, 3, 64, 64], 1.0);
    let mut ev = Eval::new(&model.store);
    let (pyr, _) = encode(&mut ev, &Cow::Borrowed(&image), &model.encoder, &Mode::eval()).unwrap();
    let fused = fuse_pyramid(&mut ev, &pyr, &model.decoder, true, false).unwrap();
    assert_eq!(fused.shape(), &[1, 128, 16, 16]);
}

fn pyramid_shapes(model: &Model, h: usize, w: usize) -> [Vec<usize>; 3] {
    let image = uniform(&mut rng::stream(5, &[]), &[1, 3, h, w], 1.0);
    let mut ev = Eval::new(&model.store);
    let (pyr, _) = encode(&mut ev, &Cow::Borrowed(&image), &model.encoder, &Mode::eval()).unwrap();
    [pyr.lf.shape().to_vec(), pyr.mf.shape().to_vec(), pyr.f.shape().to_vec()]
}

#[test]
fn pyramid_extents() {
    let cfg = ModelConfig::toy(BsbVariant::DualGate);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let [c1, c2, c3] = cfg.widths;
    assert_eq!(
        pyramid_shapes(&model, 64, 64),
        [vec![1, c1, 16, 16], vec![1, c2, 8, 8], vec![1, c3, 4, 4]]
    );
    assert_eq!(
        pyramid_shapes(&model, 480, 640),
        [vec![1, c1, 120, 160], vec![1, c2, 60, 80], vec![1, c3, 30, 40]]
    );
    // 60 is padded to 64 before the stem.
    assert_eq!(pyramid_shapes(&model, 60, 60)[2], vec![1, c3, 4, 4]);
}

#[test]
fn logits_keep_the_input_extent() {
    let model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 3).unwrap();
    for (h, w) in [(60, 60), (64, 48), (33, 70)] {
        let image = uniform(&mut rng::stream(6, &[]), &[2, 3, h, w], 1.0);
        let prompts = encode_prompt_batch(&[Prompt::default(), Prompt::default()], h, w).unwrap();
        assert_eq!(prompts.shape(), &[2, PROMPT_CHANNELS, fused_extent(h), fused_extent(w)]);
        let logits = model.infer(&image, &prompts).unwrap();
        assert_eq!(logits.shape(), &[2, model.config.classes, h, w]);
    }
}

#[test]
fn zero_image_with_zero_biases_gives_zero_pyramid() {
    let cfg = ModelConfig::toy(BsbVariant::DualGate);
    let mut model = Model::new(cfg, 4).unwrap();
    // Every bias is zero at initialisation except the sequence blocks'
    // step-size projections, which only matter once the tokens are non-zero.
    let image = Tensor::zeros([1, 3, 32, 32]);
    let mut ev = Eval::new(&model.store);
    let (pyr, _) = encode(&mut ev, &Cow::Borrowed(&image), &model.encoder, &Mode::eval()).unwrap();
    for t in [&pyr.lf, &pyr.mf, &pyr.f] {
        assert!(t.data().iter().all(|&v| v == 0.0), "non-zero feature {}", t.max_abs());
    }
    // A non-zero bias in the last convolution breaks this.
    let b = model.encoder.down3.b.unwrap();
    let shape = model.store.get(b).shape().to_vec();
    model.store.set(b, Tensor::from_fn(shape, |_| 0.5)).unwrap();
    let mut ev = Eval::new(&model.store);
    let (pyr, _) = encode(&mut ev, &Cow::Borrowed(&image), &model.encoder, &Mode::eval()).unwrap();
    assert!(pyr.f.max_abs() > 0.0);
}

#[test]
fn evaluation_is_deterministic() {
    let model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 8).unwrap();
    let image = uniform(&mut rng::stream(9, &[]), &[1, 3, 40, 36], 1.0);
    let prompts = encode_prompt_batch(&[Prompt::default()], 40, 36).unwrap();
    let a = model.infer(&image, &prompts).unwrap();
    let b = model.infer(&image, &prompts).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn classifier_bias_decides_with_zero_weights() {
    let mut model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 11).unwrap();
    let cls = model.decoder.classifier;
    let shape = model.store.get(cls.w).shape().to_vec();
    model.store.set(cls.w, Tensor::zeros(shape)).unwrap();
    model.store.set(cls.b.unwrap(), Tensor::new([3], vec![0.0, 5.0, 0.0]).unwrap()).unwrap();
    let image = uniform(&mut rng::stream(12, &[]), &[1, 3, 32, 32], 1.0);
    let prompts = encode_prompt_batch(&[Prompt::default()], 32, 32).unwrap();
    let logits = model.infer(&image, &prompts).unwrap();
    let classes = bsbseg_core::objective::argmax_classes(&logits).unwrap();
    assert!(classes.iter().all(|&c| c == 1));
}

#[test]
fn prompt_channels_only_enter_through_their_projection_weights() {
    let mut model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 13).unwrap();
    let image = uniform(&mut rng::stream(14, &[]), &[1, 3, 32, 32], 1.0);
    let empty = encode_prompt_batch(&[Prompt::default()], 32, 32).unwrap();
    let clicked = encode_prompt_batch(
        &[Prompt {
            points: vec![Point {
                row: 10,
                col: 20,
                positive: true,
            }],
            boxes: vec![],
        }],
        32,
        32,
    )
    .unwrap();
    let a = model.infer(&image, &empty).unwrap();
    let b = model.infer(&image, &clicked).unwrap();
    assert!(max_diff(a.data(), b.data()) > 0.0);

    let proj = model.decoder.prompt_proj.w;
    let w = model.store.get(proj).clone();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let cut = Tensor::from_fn(w.shape().to_vec(), |i| if i % cin >= cin - PROMPT_CHANNELS { 0.0 } else { w.data()[i] });
    assert_eq!(cut.shape(), &[cout, cin, 1, 1]);
    model.store.set(proj, cut).unwrap();
    let a = model.infer(&image, &empty).unwrap();
    let b = model.infer(&image, &clicked).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn initial_logits_are_moderate() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let image = uniform(&mut rng::stream(15, &[]), &[1, 3, 64, 64], 1.0).map(|v| 0.5 + 0.5 * v);
    let prompts = encode_prompt_batch(&[Prompt::default()], 64, 64).unwrap();
    let logits = model.infer(&image, &prompts).unwrap();
    assert!(logits.data().iter().all(|v| v.is_finite()));
    assert!(logits.max_abs() < 1e2, "{}", logits.max_abs());
}

#[test]
fn operation_counts_scale_with_pixels() {
    let cfg = ModelConfig::default();
    let small = model_macs(&cfg, 480, 640).unwrap();
    let large = model_macs(&cfg, 960, 1280).unwrap();
    let ratio = large.total() as f64 / small.total() as f64;
    assert!((ratio - 4.0).abs() < 0.04, "ratio {ratio}");
    for m in [&small, &large] {
        assert!(m.stem > 0 && m.stage1 > 0 && m.stage2 > 0 && m.stage3 > 0 && m.decoder > 0);
    }
}

fn serialize_roundtrip(b: usize, c: usize, h: usize, w: usize, m: usize, n: usize, seed: u64) -> Result<(), TestCaseError> {
    let plan = SerializationPlan::new(h, w, m, n, true).unwrap();
    let map = uniform(&mut rng::stream(seed, &[]), &[b, c, h, w], 1.0);
    let store = ParamStore::new();
    let mut ev = Eval::new(&store);
    let tokens = serialize(&mut ev, &Cow::Borrowed(&map), &plan).unwrap();
    prop_assert_eq!(tokens.shape(), &[b, plan.groups(), m * n, c][..]);
    let back = deserialize(&mut ev, &tokens, &plan).unwrap();
    prop_assert_eq!(back.data(), map.data());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialization_roundtrips(b in 1usize..3, c in 1usize..4, h in 1usize..20, w in 1usize..20,
                                m in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        serialize_roundtrip(b, c, h, w, m, n, seed)?;
    }

    #[test]
    fn permutation_is_a_bijection(h in 1usize..24, w in 1usize..24, m in 1usize..9, n in 1usize..9) {
        let plan = SerializationPlan::new(h, w, m, n, true).unwrap();
        let mut perm = plan.permutation();
        prop_assert_eq!(perm.len(), plan.groups() * plan.tokens_per_group());
        let valid = perm.iter().filter(|&&p| plan.valid(p)).count();
        prop_assert_eq!(valid, h * w);
        perm.sort_unstable();
        prop_assert!(perm.iter().enumerate().all(|(i, &p)| i == p));
    }
}

#[test]
fn permutation_matches_serialized_positions() {
    let plan = SerializationPlan::new(6, 9, 2, 3, false).unwrap();
    let map = Tensor::from_fn([1, 1, 6, 9], |i| i as f64);
    let store = ParamStore::new();
    let mut ev = Eval::new(&store);
    let tokens = serialize(&mut ev, &Cow::Borrowed(&map), &plan).unwrap();
    for (pix, &pos) in plan.permutation().iter().enumerate() {
        assert_eq!(tokens.data()[pos], pix as f64);
    }
}

struct Context {
    store: ParamStore,
    inner: BsbParams,
    outer: BsbParams,
}

fn context(dim: usize, seed: u64, variant: BsbVariant) -> Context {
    let mut store = ParamStore::new();
    let (inner, outer) = {
        let mut init = ParamInit::new(&mut store, rng::stream(seed, &[rng::tag::INIT]));
        let inner = BsbParams::init(&mut init, "inner", dim, 3, variant).unwrap();
        let outer = BsbParams::init(&mut init, "outer", dim, 3, variant).unwrap();
        (inner, outer)
    };
    jitter(&mut store, seed + 1, 0.2);
    Context { store, inner, outer }
}

fn run_context(ctx: &Context, tokens: &Tensor, plan: &SerializationPlan, variant: BsbVariant) -> Tensor {
    let mut ev = Eval::new(&ctx.store);
    pool_unpool_context(&mut ev, &Cow::Borrowed(tokens), plan, &ctx.inner, &ctx.outer, variant)
        .unwrap()
        .into_owned()
}

fn local_only(ctx: &Context, tokens: &Tensor, variant: BsbVariant) -> Tensor {
    let s = tokens.shape().to_vec();
    let flat = tokens.clone().reshape([s[0] * s[1], s[2], s[3]]).unwrap();
    let mut ev = Eval::new(&ctx.store);
    let y = bsbseg_core::bsb::bsb_forward(&mut ev, &Cow::Borrowed(&flat), &ctx.inner, variant).unwrap();
    y.into_owned().reshape(s).unwrap()
}

fn silence_outer(ctx: &mut Context) {
    for id in [ctx.outer.out.w, ctx.outer.out.b] {
        let shape = ctx.store.get(id).shape().to_vec();
        ctx.store.set(id, Tensor::zeros(shape)).unwrap();
    }
}

#[test]
fn residual_outer_block_leaves_the_local_path() {
    let variant = BsbVariant::DualGate;
    let mut ctx = context(4, 60, variant);
    silence_outer(&mut ctx);
    let plan = SerializationPlan::new(6, 6, 3, 3, false).unwrap();
    let tokens = uniform(&mut rng::stream(61, &[]), &[2, plan.groups(), 9, 4], 1.0);
    let out = run_context(&ctx, &tokens, &plan, variant);
    let local = local_only(&ctx, &tokens, variant);
    assert!(max_diff(out.data(), local.data()) <= 1e-12);
}

#[test]
fn without_the_outer_path_groups_do_not_interact() {
    let variant = BsbVariant::NoGate;
    let mut ctx = context(3, 70, variant);
    silence_outer(&mut ctx);
    let plan = SerializationPlan::new(4, 8, 4, 4, false).unwrap();
    let tokens = uniform(&mut rng::stream(71, &[]), &[1, 2, 16, 3], 1.0);
    let mut changed = tokens.clone();
    changed.data_mut()[5] += 1.0; // group 0
    let a = run_context(&ctx, &tokens, &plan, variant);
    let b = run_context(&ctx, &changed, &plan, variant);
    assert_eq!(a.data()[48..], b.data()[48..]);
    assert!(max_diff(&a.data()[..48], &b.data()[..48]) > 0.0);

    // With the outer path active, group 1 sees the change.
    let ctx = context(3, 70, variant);
    let a = run_context(&ctx, &tokens, &plan, variant);
    let b = run_context(&ctx, &changed, &plan, variant);
    assert!(max_diff(&a.data()[48..], &b.data()[48..]) > 0.0);
}

#[test]
fn identical_groups_stay_identical_on_the_local_path() {
    let variant = BsbVariant::DualGate;
    let mut ctx = context(4, 80, variant);
    silence_outer(&mut ctx);
    let plan = SerializationPlan::new(4, 12, 4, 4, false).unwrap();
    let group = uniform(&mut rng::stream(81, &[]), &[16 * 4], 1.0);
    let tokens = Tensor::from_fn([1, 3, 16, 4], |i| group.data()[i % 64]);
    let out = run_context(&ctx, &tokens, &plan, variant);
    let d = out.data();
    assert_eq!(d[..64], d[64..128]);
    assert_eq!(d[..64], d[128..]);
}

#[test]
fn outer_path_adds_one_vector_per_group() {
    let variant = BsbVariant::DualGate;
    let ctx = context(4, 82, variant);
    let plan = SerializationPlan::new(4, 12, 4, 4, false).unwrap();
    let tokens = uniform(&mut rng::stream(83, &[]), &[2, 3, 16, 4], 1.0);
    let out = run_context(&ctx, &tokens, &plan, variant);
    let local = local_only(&ctx, &tokens, variant);
    let delta: Vec<f64> = out.data().iter().zip(local.data()).map(|(a, b)| a - b).collect();
    for g in delta.chunks(64) {
        for s in 1..16 {
            assert!(max_diff(&g[..4], &g[4 * s..4 * s + 4]) <= 1e-12);
        }
    }
    assert!(delta.iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn single_group_context_is_deterministic_and_shaped() {
    let variant = BsbVariant::SharedGate;
    let ctx = context(2, 90, variant);
    let plan = SerializationPlan::for_map(5, 3).unwrap();
    assert_eq!(plan.groups(), 1);
    let tokens = uniform(&mut rng::stream(91, &[]), &[2, 1, 15, 2], 1.0);
    let a = run_context(&ctx, &tokens, &plan, variant);
    let b = run_context(&ctx, &tokens, &plan, variant);
    assert_eq!(a.shape(), tokens.shape());
    assert_eq!(a.data(), b.data());
}
