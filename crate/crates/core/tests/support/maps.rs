//! Random label maps for the metric oracles.

use bsbseg_core::rng;
use rand::Rng;

pub fn mean_of_present(v: &[Option<f64>]) -> f64 {
    let p: Vec<f64> = v.iter().flatten().copied().collect();
    if p.is_empty() {
        0.0
    } else {
        p.iter().sum::<f64>() / p.len() as f64
    }
}

/// Random maps mixing blobs and salt noise, so contours are neither trivial
/// nor always the whole map.
pub fn random_map(r: &mut rng::Rng, h: usize, w: usize, k: u8) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..r.random_range(1..5) {
        let c = r.random_range(0..k);
        let (r0, c0) = (r.random_range(0..h), r.random_range(0..w));
        let (r1, c1) = (r.random_range(r0..h), r.random_range(c0..w));
        for row in r0..=r1 {
            for col in c0..=c1 {
                m[row * w + col] = c;
            }
        }
    }
    for _ in 0..r.random_range(0..12) {
        let i = r.random_range(0..h * w);
        m[i] = r.random_range(0..k);
    }
    m
}

