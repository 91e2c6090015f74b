use bsbseg_core::data::augment::{augment, AugmentParams};
use bsbseg_core::data::checkpoint::Checkpoint;
use bsbseg_core::data::dataset::{write_dataset, Dataset, Split};
use bsbseg_core::data::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, GrayImage, RgbImage};
use bsbseg_core::data::synth::{gen_sample, CLASSES};
use bsbseg_core::data::tta::{predict_probs, tta_predict};
use bsbseg_core::decoder::Prompt;
use bsbseg_core::model::{Model, ModelConfig};
use bsbseg_core::bsb::BsbVariant;
use bsbseg_core::Tensor;
use proptest::prelude::*;

#[test]
fn synthetic_statistics_seed_7() {
    let mut fraction_ok = 0;
    let mut present = [0usize; CLASSES];
    let n = 1000;
    for i in 0..n {
        let s = gen_sample(7, i, 64, 64).unwrap();
        let counts = s.class_counts(CLASSES);
        let f = counts[1] as f64 / s.mask.len() as f64;
        if (0.08..=0.45).contains(&f) {
            fraction_ok += 1;
        }
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                present[c] += 1;
            }
        }
    }
    assert!(fraction_ok * 100 >= 95 * n as usize, "class-1 fraction in range for {fraction_ok}/{n}");
    for (c, &p) in present.iter().enumerate() {
        assert!(p * 100 >= 90 * n as usize, "class {c} present in {p}/{n}");
    }
}

#[test]
fn generated_directory_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), 1, 4, 64, 64, true).unwrap();
    write_dataset(b.path(), 1, 4, 64, 64, true).unwrap();
    for rel in ["meta.json", "images/000003.ppm", "masks/000000.pgm"] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
    assert!(write_dataset(a.path(), 1, 4, 64, 64, false).is_err());
    let loaded = Dataset::load(a.path()).unwrap();
    let fresh = Dataset::generate(1, 4, 64, 64).unwrap();
    assert_eq!(loaded.samples, fresh.samples);
    assert_eq!(loaded.split(Split::Train).len(), 4);
}

#[test]
fn symmetric_input_gives_identical_flip_contribution() {
    // A left-right symmetric image with an empty prompt: the h-flipped
    // prediction, mapped back, must equal the identity prediction mirrored.
    let model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 5).unwrap();
    let img = Tensor::from_fn([1, 3, 32, 32], |i| {
        let c = i % 32;
        let r = (i / 32) % 32;
        ((r * 7 + c.min(31 - c) * 3) % 17) as f64 / 17.0
    });
    let flipped = img.flip(3).unwrap();
    assert_eq!(flipped, img);
    let p = predict_probs(&model, &img, &[Prompt::default()]).unwrap();
    let pf = predict_probs(&model, &flipped, &[Prompt::default()]).unwrap();
    assert_eq!(p, pf);
    let t = tta_predict(&model, &img, &[Prompt::default()]).unwrap();
    let (h, w) = (32, 32);
    for px in 0..h * w {
        let s: f64 = (0..3).map(|k| t.data()[k * h * w + px]).sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn tta_probabilities_normalised_on_random_model() {
    let model = Model::new(ModelConfig::default(), 11).unwrap();
    let s = gen_sample(3, 0, 64, 64).unwrap();
    let img = s.image.clone().reshape([1, 3, 64, 64]).unwrap();
    let t = tta_predict(&model, &img, &[Prompt::default()]).unwrap();
    let plane = 64 * 64;
    for px in 0..plane {
        let sum: f64 = (0..3).map(|k| t.data()[k * plane + px]).sum();
        assert!((sum - 1.0).abs() <= 1e-9, "pixel {px}: {sum}");
    }
}

#[test]
fn tta_of_constant_model_equals_single_prediction() {
    // Zero every weight except the classifier bias: the output is the same
    // constant for every variant.
    let mut model = Model::new(ModelConfig::toy(BsbVariant::DualGate), 5).unwrap();
    let ids: Vec<_> = model.store.trainable_ids();
    for id in ids {
        let shape = model.store.get(id).shape().to_vec();
        let name = model.store.name(id).to_string();
        let v = if name == "dec.classifier.b" {
            Tensor::new(shape, vec![0.3, -0.2, 0.5]).unwrap()
        } else {
            Tensor::zeros(shape)
        };
        model.store.set(id, v).unwrap();
    }
    let s = gen_sample(3, 4, 32, 48).unwrap();
    let img = s.image.clone().reshape([1, 3, 32, 48]).unwrap();
    let single = predict_probs(&model, &img, &[Prompt::default()]).unwrap();
    let tta = tta_predict(&model, &img, &[Prompt::default()]).unwrap();
    for (a, b) in single.data().iter().zip(tta.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::default(), 9).unwrap();
    let ck = Checkpoint::from_model(&model);
    let path = dir.path().join("m.bsbt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"BSBT");
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.to_model().unwrap().store, model.store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = RgbImage::new(w, h, data).unwrap();
        let bytes = encode_ppm(&img);
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_ppm(&back), bytes);
    }

    #[test]
    fn pgm_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let data: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 17) as u8).collect();
        let img = GrayImage::new(w, h, data).unwrap();
        let bytes = encode_pgm(&img);
        prop_assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn augmentation_keeps_labels_and_range(seed in any::<u64>(), index in 0u64..50) {
        let s = gen_sample(1, index, 40, 40).unwrap();
        let p = AugmentParams::from_seed(seed, index, 0, 40, 40);
        let out = augment(&s, &p).unwrap();
        prop_assert!(out.mask.iter().all(|&m| (m as usize) < CLASSES));
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(augment(&s, &p).unwrap(), out);
    }
}

/// Source pixel `(row, col)` in the original image of pixel `(r, c)` in
/// each of the eight transformed views of an `n × n` image.
fn dihedral_sources(n: usize) -> Vec<Box<dyn Fn(usize, usize) -> (usize, usize)>> {
    let m = n - 1;
    vec![
        Box::new(|r, c| (r, c)),
        Box::new(move |r, c| (r, m - c)),
        Box::new(move |r, c| (m - r, c)),
        Box::new(move |r, c| (m - r, m - c)),
        Box::new(|r, c| (c, r)),
        Box::new(move |r, c| (c, m - r)),
        Box::new(move |r, c| (m - c, r)),
        Box::new(move |r, c| (m - c, m - r)),
    ]
}

#[test]
fn tta_is_the_mean_of_back_mapped_views() {
    let n = 32;
    let model = Model::new(ModelConfig::toy(BsbVariant::NoGate), 17).unwrap();
    let s = gen_sample(9, 2, n, n).unwrap();
    let img = s.image.clone().reshape([1, 3, n, n]).unwrap();
    let k = 3;
    let mut mean = vec![0.0; k * n * n];
    let views = dihedral_sources(n);
    for src in &views {
        let view = Tensor::from_fn([1, 3, n, n], |i| {
            let (ch, r, c) = (i / (n * n), (i / n) % n, i % n);
            let (r0, c0) = src(r, c);
            img.data()[(ch * n + r0) * n + c0]
        });
        let probs = predict_probs(&model, &view, &[Prompt::default()]).unwrap();
        for ch in 0..k {
            for r in 0..n {
                for c in 0..n {
                    let (r0, c0) = src(r, c);
                    mean[(ch * n + r0) * n + c0] += probs.data()[(ch * n + r) * n + c] / views.len() as f64;
                }
            }
        }
    }
    let tta = tta_predict(&model, &img, &[Prompt::default()]).unwrap();
    let err = tta.data().iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12, "{err:e}");
}
