//! Straight-line transcription of the bidirectional sequence block on one
//! batch element at a time, with explicit loops over tokens and channels.
//!
//! Matrices are row-major `[out, in]`. The backward direction is written
//! with reversed time indices rather than by flipping the sequence.

/// Projection `W·v + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ScanWeights {
    /// Causal depthwise kernel `[E, K]` (tap 0 is the current token) and
    /// bias, or none.
    pub conv: Option<Affine>,
    /// `[E, N]`; the continuous diagonal is `−exp(a_log)`.
    pub a_log: Vec<f64>,
    pub delta: Affine,
    /// `[N, E]`
    pub w_b: Vec<f64>,
    /// `[N, E]`
    pub w_c: Vec<f64>,
}

/// How the direction outputs are combined before the output projection.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// `k_f ⊙ g_f + k_b ⊙ g_b`
    TwoGates(Affine, Affine),
    /// `(k_f + k_b) ⊙ g`
    OneGate(Affine),
    /// `k_f + k_b`
    Sum,
    /// `k_f ⊙ g`
    ForwardOnly(Affine),
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub dim: usize,
    pub inner: usize,
    pub state: usize,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub norm_eps: f64,
    /// `[E, D]`
    pub w_x: Vec<f64>,
    /// `[E, D]`
    pub w_y: Vec<f64>,
    pub forward: ScanWeights,
    pub backward: Option<ScanWeights>,
    pub fusion: Fusion,
    /// `[D, E]` and `[D]`.
    pub out: Affine,
}

fn matvec(w: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum())
        .collect()
}

fn affine(a: &Affine, v: &[f64]) -> Vec<f64> {
    let mut y = matvec(&a.w, v, a.b.len());
    for (yi, bi) in y.iter_mut().zip(&a.b) {
        *yi += bi;
    }
    y
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// One direction over `x[t]` (each `[E]`), visiting tokens in `order`.
/// The causal conv looks at tokens earlier in `order`.
fn run_direction(s: &ScanWeights, x: &[Vec<f64>], order: &[usize], e: usize, n: usize) -> Vec<Vec<f64>> {
    let l = x.len();
    let mut out = vec![vec![0.0; e]; l];
    let mut h = vec![vec![0.0; n]; e];
    for (step, &t) in order.iter().enumerate() {
        // x' = SiLU(Conv1d(x))
        let mut xp = vec![0.0; e];
        for ch in 0..e {
            let pre = match &s.conv {
                Some(conv) => {
                    let kw = conv.w.len() / e;
                    let mut acc = conv.b[ch];
                    for j in 0..kw {
                        if j <= step {
                            acc += conv.w[ch * kw + j] * x[order[step - j]][ch];
                        }
                    }
                    acc
                }
                None => x[t][ch],
            };
            xp[ch] = silu(pre);
        }
        let bvec = matvec(&s.w_b, &xp, n);
        let cvec = matvec(&s.w_c, &xp, n);
        let dpre = affine(&s.delta, &xp);
        for ch in 0..e {
            let delta = softplus(dpre[ch]);
            let mut y = 0.0;
            for i in 0..n {
                let a = -s.a_log[ch * n + i].exp();
                let a_bar = (delta * a).exp();
                let b_bar = delta * bvec[i];
                h[ch][i] = a_bar * h[ch][i] + b_bar * xp[ch];
                y += cvec[i] * h[ch][i];
            }
            out[t][ch] = y;
        }
    }
    out
}

/// Applies the block to `tokens: [B, L, D]` (row-major) and returns the
/// same shape.
pub fn block_forward(tokens: &[f64], batch: usize, len: usize, p: &BlockWeights) -> Vec<f64> {
    let (d, e, n) = (p.dim, p.inner, p.state);
    assert_eq!(tokens.len(), batch * len * d);
    let mut result = Vec::with_capacity(tokens.len());
    for bi in 0..batch {
        let z: Vec<Vec<f64>> = (0..len).map(|t| tokens[(bi * len + t) * d..][..d].to_vec()).collect();
        let mut x = Vec::with_capacity(len);
        let mut y = Vec::with_capacity(len);
        for tok in &z {
            let mean = tok.iter().sum::<f64>() / d as f64;
            let var = tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let normed: Vec<f64> = (0..d)
                .map(|i| p.norm_gamma[i] * (tok[i] - mean) / (var + p.norm_eps).sqrt() + p.norm_beta[i])
                .collect();
            x.push(matvec(&p.w_x, &normed, e));
            y.push(matvec(&p.w_y, &normed, e));
        }
        let forward_order: Vec<usize> = (0..len).collect();
        let backward_order: Vec<usize> = (0..len).rev().collect();
        let k_f = run_direction(&p.forward, &x, &forward_order, e, n);
        let k_b = p.backward.as_ref().map(|s| run_direction(s, &x, &backward_order, e, n));
        for t in 0..len {
            let fused: Vec<f64> = match (&p.fusion, &k_b) {
                (Fusion::TwoGates(gf, gb), Some(kb)) => {
                    let g_f = affine(gf, &y[t]);
                    let g_b = affine(gb, &y[t]);
                    (0..e).map(|c| k_f[t][c] * silu(g_f[c]) + kb[t][c] * silu(g_b[c])).collect()
                }
                (Fusion::OneGate(g), Some(kb)) => {
                    let g = affine(g, &y[t]);
                    (0..e).map(|c| (k_f[t][c] + kb[t][c]) * silu(g[c])).collect()
                }
                (Fusion::Sum, Some(kb)) => (0..e).map(|c| k_f[t][c] + kb[t][c]).collect(),
                (Fusion::ForwardOnly(g), None) => {
                    let g = affine(g, &y[t]);
                    (0..e).map(|c| k_f[t][c] * silu(g[c])).collect()
                }
                _ => panic!("fusion does not match the number of directions"),
            };
            let projected = affine(&p.out, &fused);
            result.extend(projected.iter().zip(&z[t]).map(|(a, b)| a + b));
        }
    }
    result
}
