//! Single-image feature-map operations written as direct loops.

/// A `C×H×W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn map_values(m: &Map, f: impl Fn(f64) -> f64) -> Map {
    Map {
        data: m.data.iter().map(|&v| f(v)).collect(),
        ..m.clone()
    }
}

pub fn add(a: &Map, b: &Map) -> Map {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
    Map {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Map, b: &Map) -> Map {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Map {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Zero-padded cross-correlation with weights `[cout, cin/groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &Map, w: &[f64], b: Option<&[f64]>, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Map {
    let cin_g = x.c / groups;
    let cout_g = cout / groups;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(cout, oh, ow);
    for o in 0..cout {
        let g = o / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = w[((o * cin_g + ci) * k + ky) * k + kx];
                            acc += wv * x.at(g * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

/// LayerNorm across channels at every pixel (biased variance).
pub fn layer_norm_channels(x: &Map, gamma: &[f64], beta: &[f64], eps: f64) -> Map {
    let mut out = Map::zeros(x.c, x.h, x.w);
    for y in 0..x.h {
        for xx in 0..x.w {
            let vals: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx)).collect();
            let mean = vals.iter().sum::<f64>() / x.c as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.c as f64;
            for c in 0..x.c {
                out.set(c, y, xx, gamma[c] * (vals[c] - mean) / (var + eps).sqrt() + beta[c]);
            }
        }
    }
    out
}

/// Inference-mode batch norm from running statistics.
pub fn batch_norm_eval(x: &Map, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Map {
    let mut out = x.clone();
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                out.set(c, y, xx, gamma[c] * (x.at(c, y, xx) - mean[c]) / (var[c] + eps).sqrt() + beta[c]);
            }
        }
    }
    out
}

/// Bilinear 2× upsampling, sampling the source at `(i + 0.5)/2 − 0.5`
/// clamped to the valid range (half-pixel centres).
pub fn upsample2x(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, 2 * x.h, 2 * x.w);
    let coord = |i: usize, n: usize| ((i as f64 + 0.5) * 0.5 - 0.5).max(0.0).min((n - 1) as f64);
    for c in 0..x.c {
        for oy in 0..2 * x.h {
            let sy = coord(oy, x.h);
            let (y0, ty) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(x.h - 1);
            for ox in 0..2 * x.w {
                let sx = coord(ox, x.w);
                let (x0, tx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(x.w - 1);
                let v = (1.0 - ty) * (1.0 - tx) * x.at(c, y0, x0)
                    + (1.0 - ty) * tx * x.at(c, y0, x1)
                    + ty * (1.0 - tx) * x.at(c, y1, x0)
                    + ty * tx * x.at(c, y1, x1);
                out.set(c, oy, ox, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_a_constant_is_constant() {
        let m = Map {
            c: 1,
            h: 2,
            w: 3,
            data: vec![4.0; 6],
        };
        assert!(upsample2x(&m).data.iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let m = Map {
            c: 2,
            h: 2,
            w: 2,
            data: (0..8).map(f64::from).collect(),
        };
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv2d(&m, &w, None, 2, 1, 1, 0, 1), m);
    }
}
