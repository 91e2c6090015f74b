//! Region and boundary IoU by explicit pixel-set arithmetic.
//!
//! Results are integer `(intersection, union)` pairs so callers can compare
//! exactly.

use std::collections::BTreeSet;

pub type PixelSet = BTreeSet<(i64, i64)>;

/// Pixels holding class `c`.
pub fn class_set(map: &[u8], h: usize, w: usize, c: u8) -> PixelSet {
    let mut s = PixelSet::new();
    for r in 0..h {
        for col in 0..w {
            if map[r * w + col] == c {
                s.insert((r as i64, col as i64));
            }
        }
    }
    s
}

/// Members of `set` with at least one 4-neighbour that is not in `set`
/// (positions outside the image are never in `set`).
pub fn contour(set: &PixelSet) -> PixelSet {
    set.iter()
        .filter(|&&(r, c)| {
            [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                .iter()
                .any(|n| !set.contains(n))
        })
        .copied()
        .collect()
}

/// Image pixels within Chebyshev distance `t` of some member of `set`,
/// found by checking every pixel against every member.
pub fn dilate(set: &PixelSet, h: usize, w: usize, t: i64) -> PixelSet {
    let mut out = PixelSet::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if set.iter().any(|&(sr, sc)| (sr - r).abs().max((sc - c).abs()) <= t) {
                out.insert((r, c));
            }
        }
    }
    out
}

fn iou_counts(a: &PixelSet, b: &PixelSet) -> (u64, u64) {
    (a.intersection(b).count() as u64, a.union(b).count() as u64)
}

/// Per-class `(|P ∩ G|, |P ∪ G|)` of the class regions.
pub fn region_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, k: usize) -> Vec<(u64, u64)> {
    (0..k as u8)
        .map(|c| iou_counts(&class_set(pred, h, w, c), &class_set(gt, h, w, c)))
        .collect()
}

/// Per-class `(|B_P ∩ B_G|, |B_P ∪ B_G|)` of the dilated class contours.
pub fn boundary_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, k: usize, t: i64) -> Vec<(u64, u64)> {
    (0..k as u8)
        .map(|c| {
            let bp = dilate(&contour(&class_set(pred, h, w, c)), h, w, t);
            let bg = dilate(&contour(&class_set(gt, h, w, c)), h, w, t);
            iou_counts(&bp, &bg)
        })
        .collect()
}

/// Ratio per class, `None` where the union is empty.
pub fn ratios(counts: &[(u64, u64)]) -> Vec<Option<f64>> {
    counts.iter().map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_by_two() {
        let pred = [0, 1, 1, 1];
        let gt = [0, 1, 0, 1];
        assert_eq!(region_counts(&pred, &gt, 2, 2, 2), vec![(1, 2), (2, 3)]);
    }

    #[test]
    fn interior_pixels_are_not_contour() {
        let full: PixelSet = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let edge = contour(&full);
        assert_eq!(edge.len(), 8);
        assert!(!edge.contains(&(1, 1)));
    }
}
