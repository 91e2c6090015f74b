use bsbseg_core::rng;
use bsbseg_core::ssm::{scan_forward, selective_scan, ssm_recurrence_naive, zoh_discretize};
use bsbseg_core::Tensor;
use bsbseg_oracles::quadrature::zoh_by_quadrature;
use rand::Rng;

mod support;
use support::scan::{random_branch, rel_err, scan_by_recurrence};

#[test]
fn selective_scan_matches_recurrence_on_random_configs() {
    let start = std::time::Instant::now();
    let mut r = rng::stream(11, &[]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (l, n, c, b) = (r.random_range(1..=64), r.random_range(1..=16), r.random_range(1..=8), r.random_range(1..=2));
        let (store, p) = random_branch(&mut r, c, n);
        let x = Tensor::from_fn([b, c, l], |_| r.random_range(-2.0..2.0));
        let y = selective_scan(&store, &x, &p).unwrap();
        worst = worst.max(rel_err(y.data(), &scan_by_recurrence(&store, &p, &x)));
    }
    assert!(worst <= 1e-10, "max relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn worked_size_l16_n4_c2() {
    let mut r = rng::stream(12, &[]);
    let (store, p) = random_branch(&mut r, 2, 4);
    let x = Tensor::from_fn([1, 2, 16], |_| r.random_range(-1.0..1.0));
    let y = selective_scan(&store, &x, &p).unwrap();
    assert!(rel_err(y.data(), &scan_by_recurrence(&store, &p, &x)) <= 1e-10);
}

#[test]
fn frozen_coefficients_make_the_scan_linear() {
    let mut r = rng::stream(13, &[]);
    let (b, l, e, n) = (2, 20, 3, 5);
    let mut draw = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi));
    // Coefficients come from a carrier sequence and stay fixed.
    let delta = draw(&[b, l, e], 0.01, 0.5);
    let a = draw(&[e, n], -3.0, -0.1);
    let bm = draw(&[b, l, n], -1.0, 1.0);
    let cm = draw(&[b, l, n], -1.0, 1.0);
    let x1 = draw(&[b, l, e], -1.0, 1.0);
    let x2 = draw(&[b, l, e], -1.0, 1.0);
    let (alpha, beta) = (0.7, -1.3);
    let mix = x1.zip_map(&x2, "mix", |u, v| alpha * u + beta * v).unwrap();
    let scan = |x: &Tensor| scan_forward(x, &delta, &a, &bm, &cm, false).unwrap().0;
    let lhs = scan(&mix);
    let rhs = scan(&x1).zip_map(&scan(&x2), "mix", |u, v| alpha * u + beta * v).unwrap();
    assert!(rel_err(lhs.data(), rhs.data()) <= 1e-10);
}

#[test]
fn zero_input_with_zero_projection_biases() {
    let mut r = rng::stream(14, &[]);
    let (store, p) = random_branch(&mut r, 3, 4);
    let y = selective_scan(&store, &Tensor::zeros([1, 3, 9]), &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn state_stays_bounded_over_long_sequences() {
    let l = 100_000;
    let mut r = rng::stream(15, &[]);
    let (a_c, dt) = (-0.05, 0.1);
    let (a_d, b_d) = zoh_discretize(a_c, 1.0, dt).unwrap();
    let x: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = ssm_recurrence_naive(
        &Tensor::full([l, 1], a_d),
        &Tensor::full([l, 1], b_d),
        &Tensor::full([l, 1], 1.0),
        &Tensor::new([l], x).unwrap(),
    )
    .unwrap();
    let bound = b_d / (1.0 - a_d);
    let peak = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak <= bound * (1.0 + 1e-12), "peak {peak} above {bound}");
}

#[test]
fn zoh_matches_quadrature() {
    let mut r = rng::stream(16, &[]);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let magnitude = 10f64.powf(r.random_range(-8.0..1.0));
        // Mostly stable modes, with a few growing ones.
        let a = if i % 10 == 0 { magnitude } else { -magnitude };
        let b = r.random_range(-2.0..2.0);
        let dt = 10f64.powf(r.random_range(-3.0..0.5));
        let (ad, bd) = zoh_discretize(a, b, dt).unwrap();
        let (qa, qb) = zoh_by_quadrature(a, b, dt);
        worst = worst.max(((ad - qa) / qa).abs()).max(((bd - qb) / qb).abs());
    }
    assert!(worst <= 1e-10, "max relative error {worst:e}");
}

#[test]
fn zoh_worked_example_against_quadrature() {
    let (ad, bd) = zoh_discretize(-1.0, 1.0, 0.5).unwrap();
    let (qa, qb) = zoh_by_quadrature(-1.0, 1.0, 0.5);
    assert!((ad - qa).abs() <= 1e-10 && (bd - qb).abs() <= 1e-10);
    assert!((bd - (1.0 - (-0.5f64).exp())).abs() <= 1e-15);
}

#[test]
fn series_branch_is_continuous_at_the_switch() {
    let dt = 1.0;
    for sign in [-1.0, 1.0] {
        for z in [1e-6, 1e-7, 3e-6] {
            for eps in [1e-12, 1e-9] {
                let below = zoh_discretize(sign * z * (1.0 - eps), 1.0, dt).unwrap().1;
                let above = zoh_discretize(sign * z * (1.0 + eps), 1.0, dt).unwrap().1;
                assert!((below - above).abs() <= 1e-9, "jump {:e} at z {z}", (below - above).abs());
                let q = zoh_by_quadrature(sign * z, 1.0, dt).1;
                assert!(((below - q) / q).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn non_positive_dt_is_rejected() {
    assert!(zoh_discretize(-1.0, 1.0, 0.0).is_err());
    assert!(zoh_discretize(-1.0, 1.0, -0.1).is_err());
}

#[test]
fn euler_input_term_gap_is_second_order() {
    let mut r = rng::stream(17, &[]);
    for _ in 0..50 {
        let a = -10f64.powf(r.random_range(-2.0..1.0));
        let b = r.random_range(-2.0..2.0);
        let dt = 10f64.powf(r.random_range(-4.0..-1.0));
        let (_, exact) = zoh_discretize(a, b, dt).unwrap();
        let gap = (dt * b - exact).abs();
        assert!(gap <= 0.5 * a.abs() * dt * dt * b.abs() * (1.0 + 1e-9), "gap {gap:e} at a {a} dt {dt}");
    }
}
