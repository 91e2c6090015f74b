use bsbseg_core::autodiff::{Ops, Tape};
use bsbseg_core::objective::{
    boundary_iou, ce_smoothed, class_softmax, dice_loss, miou, total_loss, total_loss_with_grad, BoundaryStats,
    ClassWeights, ConfusionMatrix, DICE_SMOOTH, LABEL_SMOOTHING,
};
use bsbseg_core::params::ParamStore;
use bsbseg_core::rng;
use bsbseg_core::Tensor;
use bsbseg_oracles::metrics::{boundary_counts, ratios, region_counts};
use proptest::prelude::*;
use rand::Rng;

mod support;
use support::maps::{mean_of_present, random_map};

#[test]
fn metrics_match_pixel_set_oracles() {
    let mut r = rng::stream(31, &[]);
    let (h, w) = (16, 16);
    for case in 0..500 {
        let k = r.random_range(1..=4usize);
        let pred = random_map(&mut r, h, w, k as u8);
        let gt = random_map(&mut r, h, w, k as u8);

        let mut cm = ConfusionMatrix::new(k);
        cm.add(&pred, &gt).unwrap();
        let want = region_counts(&pred, &gt, h, w, k);
        for (c, &counts) in want.iter().enumerate() {
            assert_eq!(cm.iou_counts(c), counts, "case {case} class {c}");
        }
        let (iou, m) = miou(&pred, &gt, k).unwrap();
        assert_eq!(iou, ratios(&want));
        assert_eq!(m, mean_of_present(&ratios(&want)));

        let t = 1 + case % 3;
        let mut bs = BoundaryStats::new(k);
        bs.add(&pred, &gt, h, w, t).unwrap();
        let want = boundary_counts(&pred, &gt, h, w, k, t as i64);
        let got: Vec<(u64, u64)> = bs.inter.iter().copied().zip(bs.union.iter().copied()).collect();
        assert_eq!(got, want, "case {case} t {t}");
        let (biou, mb) = boundary_iou(&pred, &gt, h, w, k, t as i64).unwrap();
        assert_eq!(biou, ratios(&want));
        assert_eq!(mb, mean_of_present(&ratios(&want)));
    }
}

#[test]
fn worked_two_by_two() {
    let (iou, m) = miou(&[0, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
    assert_eq!(iou, vec![Some(1.0 / 2.0), Some(2.0 / 3.0)]);
    assert_eq!(m, (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
    assert!((m - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn shifted_square_boundary() {
    let (h, w) = (8, 8);
    let square = |dr: usize| {
        let mut m = vec![0u8; h * w];
        for r in 2..6 {
            for c in 2..6 {
                m[(r + dr) * w + c] = 1;
            }
        }
        m
    };
    let (a, b) = (square(0), square(1));
    for t in 0..=3 {
        let (biou, _) = boundary_iou(&a, &b, h, w, 2, t).unwrap();
        assert_eq!(biou, ratios(&boundary_counts(&a, &b, h, w, 2, t)));
    }
}

#[test]
fn negative_tolerance_rejected() {
    assert!(boundary_iou(&[0; 4], &[0; 4], 2, 2, 1, -1).is_err());
}

#[test]
fn huge_tolerance_reduces_to_region_presence() {
    // Once every contour dilates to the whole map, a class present in both
    // maps scores 1 and a class present in only one scores 0, which is
    // region IoU whenever each class is either shared exactly or absent.
    let mut r = rng::stream(32, &[]);
    for _ in 0..50 {
        let gt = random_map(&mut r, 8, 8, 3);
        let (biou, _) = boundary_iou(&gt, &gt, 8, 8, 3, 16).unwrap();
        let (iou, _) = miou(&gt, &gt, 3).unwrap();
        assert_eq!(biou, iou);
        let pred = random_map(&mut r, 8, 8, 3);
        let (biou, _) = boundary_iou(&pred, &gt, 8, 8, 3, 16).unwrap();
        for (c, v) in biou.iter().enumerate() {
            let in_p = pred.contains(&(c as u8));
            let in_g = gt.contains(&(c as u8));
            let want = (in_p || in_g).then_some(if in_p && in_g { 1.0 } else { 0.0 });
            assert_eq!(*v, want);
        }
    }
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000, t in 0i64..4) {
        let mut r = rng::stream(seed, &[]);
        let a = random_map(&mut r, 12, 10, 4);
        let b = random_map(&mut r, 12, 10, 4);
        prop_assert_eq!(miou(&a, &b, 4).unwrap(), miou(&b, &a, 4).unwrap());
        prop_assert_eq!(boundary_iou(&a, &b, 12, 10, 4, t).unwrap(), boundary_iou(&b, &a, 12, 10, 4, t).unwrap());
    }

    #[test]
    fn losses_invariant_under_joint_pixel_permutation(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, &[1]);
        let (k, h, w) = (3, 3, 4);
        let logits = Tensor::from_fn([1, k, h, w], |_| r.random_range(-3.0..3.0));
        let target: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k as u8)).collect();
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let plogits = Tensor::from_fn([1, k, h, w], |i| logits.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]);
        let ptarget: Vec<u8> = perm.iter().map(|&p| target[p]).collect();
        let wts = ClassWeights(vec![0.5, 1.2, 1.3]);
        let a = ce_smoothed(&logits, &target, &wts, LABEL_SMOOTHING).unwrap();
        let b = ce_smoothed(&plogits, &ptarget, &wts, LABEL_SMOOTHING).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let a = dice_loss(&class_softmax(&logits), &target, DICE_SMOOTH).unwrap();
        let b = dice_loss(&class_softmax(&plogits), &ptarget, DICE_SMOOTH).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_hand_expansion() {
    let mut r = rng::stream(33, &[]);
    let (k, h, w) = (3, 2, 2);
    let logits = Tensor::from_fn([1, k, h, w], |_| r.random_range(-2.0..2.0));
    let target = [2u8, 0, 1, 2];
    let wts = ClassWeights(vec![0.8, 1.5, 0.7]);
    let eps = LABEL_SMOOTHING;
    let mut want = 0.0;
    for (px, &y) in target.iter().enumerate() {
        let z: Vec<f64> = (0..k).map(|c| logits.data()[c * h * w + px]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let mut loss = 0.0;
        for (c, zc) in z.iter().enumerate() {
            let q = if c == y as usize { 1.0 - eps + eps / 3.0 } else { eps / 3.0 };
            loss -= q * (zc.exp() / denom).ln();
        }
        want += wts.0[y as usize] * loss;
    }
    want /= 4.0;
    let got = ce_smoothed(&logits, &target, &wts, eps).unwrap();
    assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    assert!(ce_smoothed(&logits, &[3, 0, 0, 0], &wts, eps).is_err());
}

#[test]
fn dice_closed_form_for_uniform_probabilities() {
    // K = 2, n = 4 pixels per class, p = 1/2 everywhere, so Σp·t = n/2,
    // Σp = n and Σt = n: dice_c = (n + 1)/(2n + 1).
    let probs = Tensor::full([1, 2, 2, 4], 0.5);
    let target = [0u8, 0, 0, 0, 1, 1, 1, 1];
    let dice_c = (2.0 * 2.0 + 1.0) / (4.0 + 4.0 + 1.0);
    let got = dice_loss(&probs, &target, 1.0).unwrap();
    assert!((got - (1.0 - dice_c)).abs() < 1e-15);
    let onehot = Tensor::from_fn([1, 2, 2, 4], |i| f64::from((i / 8) as u8 == target[i % 8]));
    assert_eq!(dice_loss(&onehot, &target, 1.0).unwrap(), 0.0);
}

#[test]
fn total_loss_is_the_sum_of_its_terms() {
    let mut r = rng::stream(34, &[]);
    let logits = Tensor::from_fn([2, 3, 3, 3], |_| r.random_range(-2.0..2.0));
    let target: Vec<u8> = (0..18).map(|_| r.random_range(0..3)).collect();
    let wts = ClassWeights::from_counts(&[10, 5, 3]).unwrap();
    let ce = ce_smoothed(&logits, &target, &wts, LABEL_SMOOTHING).unwrap();
    let dice = dice_loss(&class_softmax(&logits), &target, DICE_SMOOTH).unwrap();
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(logits.clone());
    let total = total_loss(&mut tape, &x, &target, &wts).unwrap();
    assert!((tape.value(&total).item() - (ce + dice)).abs() < 1e-12);
    let (ce_only, _) = total_loss_with_grad(&logits, &target, &wts, 0.0).unwrap();
    assert_eq!(ce_only, ce);
}

#[test]
fn class_weights_have_unit_mean() {
    let w = ClassWeights::from_counts(&[900, 90, 10]).unwrap();
    assert!((w.0.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    assert!(w.0[0] < w.0[1] && w.0[1] < w.0[2]);
    let absent = ClassWeights::from_counts(&[100, 0]).unwrap();
    assert!(absent.0.iter().all(|v| v.is_finite()));
    assert!(ClassWeights::from_counts(&[0, 0]).is_err());
}
