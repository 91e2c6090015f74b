//! Training loss (label-smoothed weighted cross-entropy plus soft Dice) and
//! region / boundary IoU metrics.

use crate::autodiff::Ops;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub const LABEL_SMOOTHING: f64 = 0.1;
pub const DICE_SMOOTH: f64 = 1.0;
pub const FREQ_FLOOR: f64 = 1e-6;
pub const BOUNDARY_TOLERANCE: usize = 3;

/// Per-class loss weights, `w_c ∝ freq_c^{−1/2}` normalised to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    /// From per-class pixel counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return invalid("ClassWeights", "no pixels to count");
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&c| (c as f64 / total as f64).max(FREQ_FLOOR).powf(-0.5))
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Ok(Self(raw.iter().map(|w| w / mean).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_target(op: &'static str, logits: &Tensor, target: &[u8]) -> Result<(usize, usize, usize)> {
    let (b, k, h, w) = logits.dims4(op)?;
    if target.len() != b * h * w {
        return shape_err(op, format!("{} target pixels for logits {:?}", target.len(), logits.shape()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return invalid(op, format!("target class {bad} out of range for K={k}"));
    }
    Ok((b, k, h * w))
}

/// Softmax over the class axis of `[B,K,H,W]`, returned in the same layout.
pub fn class_softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut p = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..hw {
            let base = bi * k * hw + i;
            let m = (0..k).map(|c| x[base + c * hw]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (x[base + c * hw] - m).exp();
                p[base + c * hw] = e;
                z += e;
            }
            for c in 0..k {
                p[base + c * hw] /= z;
            }
        }
    }
    Tensor::new(s, p).expect("shape preserved")
}

/// Value and logit gradient of the smoothed, class-weighted cross-entropy.
pub fn ce_smoothed_with_grad(
    logits: &Tensor,
    target: &[u8],
    weights: &ClassWeights,
    eps: f64,
) -> Result<(f64, Tensor)> {
    const OP: &str = "ce_smoothed";
    let (b, k, hw) = check_target(OP, logits, target)?;
    if weights.len() != k {
        return shape_err(OP, format!("{} class weights for K={k}", weights.len()));
    }
    let x = logits.data();
    let n = (b * hw) as f64;
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..hw {
            let base = bi * k * hw + i;
            let y = target[bi * hw + i] as usize;
            let wy = weights.0[y];
            let m = (0..k).map(|c| x[base + c * hw]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (x[base + c * hw] - m).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for c in 0..k {
                let q = if c == y { 1.0 - eps } else { 0.0 } + eps / k as f64;
                let logp = x[base + c * hw] - lse;
                loss -= q * logp;
                grad[base + c * hw] = wy * (logp.exp() - q) / n;
            }
            total += wy * loss;
        }
    }
    Ok((total / n, Tensor::new(logits.shape(), grad)?))
}

pub fn ce_smoothed(logits: &Tensor, target: &[u8], weights: &ClassWeights, eps: f64) -> Result<f64> {
    ce_smoothed_with_grad(logits, target, weights, eps).map(|(v, _)| v)
}

/// Soft multi-class Dice loss on probabilities `[B,K,H,W]`:
/// `1 − mean_c (2Σp·t + s)/(Σp + Σt + s)`.
pub fn dice_loss(probs: &Tensor, target: &[u8], smooth: f64) -> Result<f64> {
    let (_, k, hw) = check_target("dice_loss", probs, target)?;
    let (inter, psum, tsum) = dice_sums(probs, target, k, hw);
    let mean = (0..k)
        .map(|c| (2.0 * inter[c] + smooth) / (psum[c] + tsum[c] + smooth))
        .sum::<f64>()
        / k as f64;
    Ok(1.0 - mean)
}

fn dice_sums(p: &Tensor, target: &[u8], k: usize, hw: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let b = p.shape()[0];
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for bi in 0..b {
        for c in 0..k {
            let plane = &p.data()[(bi * k + c) * hw..][..hw];
            for (i, &pv) in plane.iter().enumerate() {
                psum[c] += pv;
                if target[bi * hw + i] as usize == c {
                    inter[c] += pv;
                    tsum[c] += 1.0;
                }
            }
        }
    }
    (inter, psum, tsum)
}

/// Dice loss of `softmax(logits)` and its gradient with respect to the logits.
pub fn dice_from_logits_with_grad(logits: &Tensor, target: &[u8], smooth: f64) -> Result<(f64, Tensor)> {
    let (b, k, hw) = check_target("dice_loss", logits, target)?;
    let p = class_softmax(logits);
    let (inter, psum, tsum) = dice_sums(&p, target, k, hw);
    let denom: Vec<f64> = (0..k).map(|c| psum[c] + tsum[c] + smooth).collect();
    let numer: Vec<f64> = (0..k).map(|c| 2.0 * inter[c] + smooth).collect();
    let loss = 1.0 - (0..k).map(|c| numer[c] / denom[c]).sum::<f64>() / k as f64;
    let pd = p.data();
    let mut grad = vec![0.0; pd.len()];
    let mut gp = vec![0.0; k];
    for bi in 0..b {
        for i in 0..hw {
            let y = target[bi * hw + i] as usize;
            let base = bi * k * hw + i;
            let mut dot = 0.0;
            for c in 0..k {
                let t = if c == y { 1.0 } else { 0.0 };
                gp[c] = -(2.0 * t / denom[c] - numer[c] / (denom[c] * denom[c])) / k as f64;
                dot += gp[c] * pd[base + c * hw];
            }
            for c in 0..k {
                grad[base + c * hw] = pd[base + c * hw] * (gp[c] - dot);
            }
        }
    }
    Ok((loss, Tensor::new(logits.shape(), grad)?))
}

/// `ce_smoothed + λ·dice` with its gradient.
pub fn total_loss_with_grad(
    logits: &Tensor,
    target: &[u8],
    weights: &ClassWeights,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    let (ce, mut g) = ce_smoothed_with_grad(logits, target, weights, LABEL_SMOOTHING)?;
    let (dice, gd) = dice_from_logits_with_grad(logits, target, DICE_SMOOTH)?;
    for (a, b) in g.data_mut().iter_mut().zip(gd.data()) {
        *a += lambda * b;
    }
    Ok((ce + lambda * dice, g))
}

/// Training objective recorded as a single node.
pub fn total_loss<O: Ops>(ops: &mut O, logits: &O::V, target: &[u8], weights: &ClassWeights) -> Result<O::V> {
    ops.scalar_fn(logits, &|l: &Tensor| total_loss_with_grad(l, target, weights, 1.0))
}

/// Per-pixel argmax over classes of `[B,K,H,W]`, as `[B·H·W]` class indices.
pub fn argmax_classes(scores: &Tensor) -> Result<Vec<u8>> {
    let (b, k, h, w) = scores.dims4("argmax_classes")?;
    let hw = h * w;
    let x = scores.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * hw + i] > x[(bi * k + best) * hw + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// `K×K` counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return shape_err("confusion", format!("{} predictions vs {} labels", pred.len(), gt.len()));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return invalid("confusion", format!("class index out of range for K={}", self.k));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(TP, TP+FP+FN)` for class `c`.
    pub fn iou_counts(&self, c: usize) -> (u64, u64) {
        let tp = self.counts[c * self.k + c];
        let row: u64 = (0..self.k).map(|j| self.counts[c * self.k + j]).sum();
        let col: u64 = (0..self.k).map(|i| self.counts[i * self.k + c]).sum();
        (tp, row + col - tp)
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let (i, u) = self.iou_counts(c);
                (u > 0).then(|| i as f64 / u as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class_iou())
    }
}

/// Mean of the present entries (0 when none are present).
pub fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Per-class IoU and mIoU of one pair of maps.
pub fn miou(pred: &[u8], gt: &[u8], k: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok((cm.per_class_iou(), cm.miou()))
}

/// Pixels of class `c` with a 4-neighbour outside the class or outside the
/// image.
pub fn class_contour(map: &[u8], h: usize, w: usize, c: u8) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for col in 0..w {
            if map[r * w + col] != c {
                continue;
            }
            let edge = r == 0
                || col == 0
                || r + 1 == h
                || col + 1 == w
                || map[(r - 1) * w + col] != c
                || map[(r + 1) * w + col] != c
                || map[r * w + col - 1] != c
                || map[r * w + col + 1] != c;
            out[r * w + col] = edge;
        }
    }
    out
}

/// Square (L∞) dilation by radius `t`, done separably.
pub fn dilate(set: &[bool], h: usize, w: usize, t: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if set[r * w + c] {
                for cc in c.saturating_sub(t)..=(c + t).min(w - 1) {
                    rows[r * w + cc] = true;
                }
            }
        }
    }
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if rows[r * w + c] {
                for rr in r.saturating_sub(t)..=(r + t).min(h - 1) {
                    out[rr * w + c] = true;
                }
            }
        }
    }
    out
}

/// Accumulated boundary intersection/union counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryStats {
    pub inter: Vec<u64>,
    pub union: Vec<u64>,
}

impl BoundaryStats {
    pub fn new(k: usize) -> Self {
        Self {
            inter: vec![0; k],
            union: vec![0; k],
        }
    }

    /// Adds one `h×w` map pair at tolerance `t`.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize, t: usize) -> Result<()> {
        if pred.len() != h * w || gt.len() != h * w {
            return shape_err("boundary_iou", format!("maps do not hold {h}×{w} pixels"));
        }
        for c in 0..self.inter.len() {
            let bp = dilate(&class_contour(pred, h, w, c as u8), h, w, t);
            let bg = dilate(&class_contour(gt, h, w, c as u8), h, w, t);
            for (a, b) in bp.iter().zip(&bg) {
                self.inter[c] += u64::from(*a && *b);
                self.union[c] += u64::from(*a || *b);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.inter.iter_mut().zip(&other.inter) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        mean_present(&self.per_class())
    }
}

/// Per-class boundary IoU and its mean for one `h×w` map pair. `t` is the
/// dilation radius in pixels; negative values are rejected.
pub fn boundary_iou(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    k: usize,
    t: i64,
) -> Result<(Vec<Option<f64>>, f64)> {
    if t < 0 {
        return invalid("boundary_iou", format!("tolerance must be non-negative, got {t}"));
    }
    let mut s = BoundaryStats::new(k);
    s.add(pred, gt, h, w, t as usize)?;
    Ok((s.per_class(), s.mean()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_by_two() {
        let (per, m) = miou(&[0, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_maps() {
        let (per, m) = miou(&[0; 4], &[1; 4], 2).unwrap();
        assert_eq!(per, vec![Some(0.0), Some(0.0)]);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn absent_class_excluded() {
        let (per, m) = miou(&[0, 0, 1, 1], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(per[2], None);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros([1, 3, 2, 2]);
        let v = ce_smoothed(&logits, &[0, 1, 2, 1], &ClassWeights::uniform(3), 0.0).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-15);
        assert!(ce_smoothed(&logits, &[0, 1, 3, 1], &ClassWeights::uniform(3), 0.0).is_err());
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let mut logits = Tensor::zeros([1, 2, 1, 2]);
        logits.data_mut()[0] = 50.0;
        logits.data_mut()[3] = 50.0;
        let v = ce_smoothed(&logits, &[0, 1], &ClassWeights::uniform(2), 0.0).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn dice_perfect_and_uniform() {
        let onehot = Tensor::new([1, 2, 2, 2], vec![1., 0., 1., 0., 0., 1., 0., 1.]).unwrap();
        let target = [0, 1, 0, 1];
        assert_eq!(dice_loss(&onehot, &target, 1.0).unwrap(), 0.0);
        // uniform 1/2 over 8 pixels, 4 per class: Σp·t = 2, Σp = Σt = 4,
        // so dice_c = (2·2+1)/(4+4+1)
        let uniform = Tensor::full([1, 2, 2, 4], 0.5);
        let target = [0, 1, 0, 1, 1, 0, 1, 0];
        let v = dice_loss(&uniform, &target, 1.0).unwrap();
        assert!((v - (1.0 - 5.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn class_weights_are_scale_invariant() {
        let a = ClassWeights::from_counts(&[100, 25, 4]).unwrap();
        let b = ClassWeights::from_counts(&[200, 50, 8]).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.0.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        let z = ClassWeights::from_counts(&[10, 0]).unwrap();
        assert!(z.0.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn boundary_identity_and_far_points() {
        let mut m = vec![0u8; 64];
        m[9] = 1;
        let (per, mb) = boundary_iou(&m, &m, 8, 8, 2, 3).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0)]);
        assert_eq!(mb, 1.0);
        let mut p = vec![0u8; 100];
        let mut g = vec![0u8; 100];
        p[0] = 1;
        g[99] = 1;
        let (per, _) = boundary_iou(&p, &g, 10, 10, 2, 3).unwrap();
        assert_eq!(per[1], Some(0.0));
        assert!(boundary_iou(&p, &g, 10, 10, 2, -1).is_err());
    }
}
