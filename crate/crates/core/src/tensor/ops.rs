//! Neural primitives on [`Tensor`] and their adjoints.
//!
//! Forward functions are pure. The `*_backward` companions are used by the
//! tape in [`crate::autodiff`] and are kept next to their forward kernels so
//! that index conventions live in one place.

use super::{gemm, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Upper bound on the im2col scratch buffer, in elements.
const IM2COL_CHUNK: usize = 1 << 21;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [batch, cin, h, w] = *input else {
            return shape_err(OP, format!("input must be [B,Cin,H,W], got {input:?}"));
        };
        let [cout, cin_g, kh, kw] = *kernel else {
            return shape_err(OP, format!("kernel must be [Cout,Cin/groups,kh,kw], got {kernel:?}"));
        };
        if stride == 0 || groups == 0 {
            return invalid(OP, "stride and groups must be positive");
        }
        if cin % groups != 0 {
            return shape_err(OP, format!("Cin={cin} not divisible by groups={groups}"));
        }
        if cin_g * groups != cin {
            return shape_err(
                OP,
                format!("kernel dim 1 (Cin/groups) is {cin_g}, expected {}", cin / groups),
            );
        }
        if cout % groups != 0 {
            return shape_err(OP, format!("Cout={cout} not divisible by groups={groups}"));
        }
        if h + 2 * pad < kh {
            return shape_err(OP, format!("H={h} with padding {pad} smaller than kh={kh}"));
        }
        if w + 2 * pad < kw {
            return shape_err(OP, format!("W={w} with padding {pad} smaller than kw={kw}"));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (IM2COL_CHUNK / (self.col_rows() * self.wo).max(1)).clamp(1, self.ho)
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    /// Multiply-adds performed by one forward evaluation.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.ho * self.wo * self.col_rows()) as u64
    }
}

/// Fills `cols` (`col_rows × (r1-r0)·wo`) with the receptive fields of output
/// rows `r0..r1` for one batch item and group.
fn im2col(g: &Conv2dGeom, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
    let p = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for (oi, oy) in (r0..r1).enumerate() {
                    let out = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back into the input gradient plane set `dx`.
fn col2im(g: &Conv2dGeom, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
    let p = (r1 - r0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for (oi, oy) in (r0..r1).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oi * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2D cross-correlation with zero padding.
///
/// `input` is `[B,Cin,H,W]`, `kernel` is `[Cout,Cin/groups,kh,kw]`; the output
/// is `[B,Cout,H',W']` with `H' = (H + 2·padding − kh)/stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = Conv2dGeom::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.cout));
        }
    }
    let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
    let x = input.data();
    let k = kernel.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;

    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let xp = &x[(b * g.cin + c) * plane_in..][..plane_in];
                let kp = &k[c * g.kh * g.kw..][..g.kh * g.kw];
                let op = &mut out[(b * g.cout + c) * plane_out..][..plane_out];
                depthwise_plane(&g, xp, kp, op);
            }
        }
    } else {
        let kr = g.col_rows();
        let mut cols = Vec::new();
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xg = &x[(b * g.cin + gi * g.cin_g()) * plane_in..][..g.cin_g() * plane_in];
                let kg = &k[gi * g.cout_g() * kr..][..g.cout_g() * kr];
                let og = &mut out[(b * g.cout + gi * g.cout_g()) * plane_out..][..g.cout_g() * plane_out];
                if g.is_pointwise() {
                    gemm(g.cout_g(), kr, plane_out, 1.0, kg, kr, 1, xg, plane_out, 1, 0.0, og, plane_out);
                    continue;
                }
                let step = g.rows_per_chunk();
                let mut r0 = 0;
                while r0 < g.ho {
                    let r1 = (r0 + step).min(g.ho);
                    let p = (r1 - r0) * g.wo;
                    cols.resize(kr * p, 0.0);
                    im2col(&g, xg, r0, r1, &mut cols);
                    gemm(
                        g.cout_g(),
                        kr,
                        p,
                        1.0,
                        kg,
                        kr,
                        1,
                        &cols,
                        p,
                        1,
                        0.0,
                        &mut og[r0 * g.wo..],
                        plane_out,
                    );
                    r0 = r1;
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * g.cout + c) * plane_out..][..plane_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

fn depthwise_plane(g: &Conv2dGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            for oy in 0..g.ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = &x[iy as usize * g.w..][..g.w];
                let orow = &mut out[oy * g.wo..][..g.wo];
                if g.stride == 1 {
                    // valid ox range where 0 <= ox + kx - pad < w
                    let lo = g.pad.saturating_sub(kx);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
                    for ox in lo..hi {
                        orow[ox] += wv * row[ox + kx - g.pad];
                    }
                } else {
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o += wv * row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = Conv2dGeom::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if grad_out.shape() != g.output_shape() {
        return shape_err(
            "conv2d_backward",
            format!("grad {:?}, expected {:?}", grad_out.shape(), g.output_shape()),
        );
    }
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.cout];

    for b in 0..g.batch {
        for c in 0..g.cout {
            db[c] += dy[(b * g.cout + c) * plane_out..][..plane_out].iter().sum::<f64>();
        }
    }

    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let xp = &x[(b * g.cin + c) * plane_in..][..plane_in];
                let dxp = &mut dx[(b * g.cin + c) * plane_in..][..plane_in];
                let kp = &k[c * g.kh * g.kw..][..g.kh * g.kw];
                let dkp = &mut dk[c * g.kh * g.kw..][..g.kh * g.kw];
                let dyp = &dy[(b * g.cout + c) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = kp[ky * g.kw + kx];
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let gval = dyp[oy * g.wo + ox];
                                acc += gval * xp[iy * g.w + ix as usize];
                                dxp[iy * g.w + ix as usize] += gval * wv;
                            }
                        }
                        dkp[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    } else {
        let kr = g.col_rows();
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xoff = (b * g.cin + gi * g.cin_g()) * plane_in;
                let xg = &x[xoff..][..g.cin_g() * plane_in];
                let kg = &k[gi * g.cout_g() * kr..][..g.cout_g() * kr];
                let dyg = &dy[(b * g.cout + gi * g.cout_g()) * plane_out..][..g.cout_g() * plane_out];
                if g.is_pointwise() {
                    // dW += dY · Xᵀ ; dX = Wᵀ · dY
                    gemm(
                        g.cout_g(),
                        plane_out,
                        kr,
                        1.0,
                        dyg,
                        plane_out,
                        1,
                        xg,
                        1,
                        plane_out,
                        1.0,
                        &mut dk[gi * g.cout_g() * kr..],
                        kr,
                    );
                    gemm(
                        kr,
                        g.cout_g(),
                        plane_out,
                        1.0,
                        kg,
                        1,
                        kr,
                        dyg,
                        plane_out,
                        1,
                        0.0,
                        &mut dx[xoff..],
                        plane_out,
                    );
                    continue;
                }
                let step = g.rows_per_chunk();
                let mut r0 = 0;
                while r0 < g.ho {
                    let r1 = (r0 + step).min(g.ho);
                    let p = (r1 - r0) * g.wo;
                    cols.resize(kr * p, 0.0);
                    dcols.resize(kr * p, 0.0);
                    im2col(&g, xg, r0, r1, &mut cols);
                    let dy_chunk = &dyg[r0 * g.wo..];
                    gemm(
                        g.cout_g(),
                        p,
                        kr,
                        1.0,
                        dy_chunk,
                        plane_out,
                        1,
                        &cols,
                        1,
                        p,
                        1.0,
                        &mut dk[gi * g.cout_g() * kr..],
                        kr,
                    );
                    gemm(kr, g.cout_g(), p, 1.0, kg, 1, kr, dy_chunk, plane_out, 1, 0.0, &mut dcols, p);
                    col2im(&g, &dcols, r0, r1, &mut dx[xoff..xoff + g.cin_g() * plane_in]);
                    r0 = r1;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::new([g.cout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// depthwise causal conv1d
// ---------------------------------------------------------------------------

fn check_conv1d(op: &'static str, channels: usize, kernel: &Tensor) -> Result<usize> {
    match *kernel.shape() {
        [c, kw] if c == channels => Ok(kw),
        [c, _] => shape_err(op, format!("kernel has {c} channels, sequence has {channels}")),
        _ => shape_err(op, format!("kernel must be [C,kw], got {:?}", kernel.shape())),
    }
}

/// Depthwise causal 1D convolution over `[B,C,L]`.
///
/// Forward: `out[t] = Σ_j k[j]·x[t−j]` with zeros before the start, so tap
/// `j` weights the input `j` steps in the past. With `reverse` the sequence
/// is flipped, convolved causally and flipped back, i.e.
/// `out[t] = Σ_j k[j]·x[t+j]`.
pub fn conv1d_depthwise(seq: &Tensor, kernel: &Tensor, reverse: bool) -> Result<Tensor> {
    const OP: &str = "conv1d_depthwise";
    let (b, c, l) = seq.dims3(OP)?;
    let kw = check_conv1d(OP, c, kernel)?;
    let x = seq.data();
    let k = kernel.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let row = &x[(bi * c + ci) * l..][..l];
            let orow = &mut out[(bi * c + ci) * l..][..l];
            let taps = &k[ci * kw..][..kw];
            for t in 0..l {
                let mut acc = 0.0;
                for (j, &kv) in taps.iter().enumerate() {
                    let src = if reverse { t.checked_add(j).filter(|&s| s < l) } else { t.checked_sub(j) };
                    if let Some(s) = src {
                        acc += kv * row[s];
                    }
                }
                orow[t] = acc;
            }
        }
    }
    Tensor::new([b, c, l], out)
}

/// Causal depthwise conv over token layout `[B,L,C]` (used by the sequence
/// block, which keeps channels last). Same tap convention as
/// [`conv1d_depthwise`] with `reverse = false`.
pub fn conv1d_causal_tokens(seq: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    const OP: &str = "conv1d_causal_tokens";
    let (b, l, c) = seq.dims3(OP)?;
    let kw = check_conv1d(OP, c, kernel)?;
    let x = seq.data();
    let k = kernel.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for t in 0..l {
            let orow = &mut out[(bi * l + t) * c..][..c];
            for j in 0..kw.min(t + 1) {
                let src = &x[(bi * l + t - j) * c..][..c];
                for ci in 0..c {
                    orow[ci] += k[ci * kw + j] * src[ci];
                }
            }
        }
    }
    Tensor::new([b, l, c], out)
}

pub fn conv1d_causal_tokens_backward(
    grad_out: &Tensor,
    seq: &Tensor,
    kernel: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, l, c) = seq.dims3("conv1d_causal_tokens_backward")?;
    seq.same_shape(grad_out, "conv1d_causal_tokens_backward")?;
    let kw = kernel.shape()[1];
    let x = seq.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for bi in 0..b {
        for t in 0..l {
            let g = &dy[(bi * l + t) * c..][..c];
            for j in 0..kw.min(t + 1) {
                let src = (bi * l + t - j) * c;
                for ci in 0..c {
                    dk[ci * kw + j] += g[ci] * x[src + ci];
                    dx[src + ci] += g[ci] * k[ci * kw + j];
                }
            }
        }
    }
    Ok((Tensor::new(seq.shape(), dx)?, Tensor::new(kernel.shape(), dk)?))
}

// ---------------------------------------------------------------------------
// bilinear 2× upsampling
// ---------------------------------------------------------------------------

/// Per output index: `(i0, i1, frac)` so that `out = (1−frac)·x[i0] + frac·x[i1]`.
fn upsample_table(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2× upsampling with half-pixel centres and border clamping.
pub fn bilinear_upsample2x(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("bilinear_upsample2x")?;
    let th = upsample_table(h);
    let tw = upsample_table(w);
    let x = input.data();
    let mut out = vec![0.0; b * c * 4 * h * w];
    let mut tmp = vec![0.0; h * 2 * w];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in tw.iter().enumerate() {
                tmp[y * 2 * w + ox] = (1.0 - f) * src[y * w + i0] + f * src[y * w + i1];
            }
        }
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for (oy, &(i0, i1, f)) in th.iter().enumerate() {
            for ox in 0..2 * w {
                dst[oy * 2 * w + ox] = (1.0 - f) * tmp[i0 * 2 * w + ox] + f * tmp[i1 * 2 * w + ox];
            }
        }
    }
    Tensor::new([b, c, 2 * h, 2 * w], out)
}

/// Adjoint of [`bilinear_upsample2x`].
pub fn bilinear_upsample2x_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [b, c, h, w] = *input_shape else {
        return shape_err("bilinear_upsample2x_backward", "input must be rank 4");
    };
    if grad_out.shape() != [b, c, 2 * h, 2 * w] {
        return shape_err(
            "bilinear_upsample2x_backward",
            format!("grad {:?} vs input {input_shape:?}", grad_out.shape()),
        );
    }
    let th = upsample_table(h);
    let tw = upsample_table(w);
    let dy = grad_out.data();
    let mut dx = vec![0.0; b * c * h * w];
    let mut tmp = vec![0.0; h * 2 * w];
    for p in 0..b * c {
        tmp.fill(0.0);
        let g = &dy[p * 4 * h * w..][..4 * h * w];
        for (oy, &(i0, i1, f)) in th.iter().enumerate() {
            for ox in 0..2 * w {
                let v = g[oy * 2 * w + ox];
                tmp[i0 * 2 * w + ox] += (1.0 - f) * v;
                tmp[i1 * 2 * w + ox] += f * v;
            }
        }
        let d = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in tw.iter().enumerate() {
                let v = tmp[y * 2 * w + ox];
                d[y * w + i0] += (1.0 - f) * v;
                d[y * w + i1] += f * v;
            }
        }
    }
    Tensor::new(input_shape, dx)
}

// ---------------------------------------------------------------------------
// layer norm (last axis)
// ---------------------------------------------------------------------------

pub struct NormSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_fwd(input, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_fwd(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormSaved)> {
    const OP: &str = "layer_norm";
    let c = *input.shape().last().expect("tensors have rank >= 1");
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            OP,
            format!("affine params {:?}/{:?}, last axis is {c}", gamma.shape(), beta.shape()),
        );
    }
    let rows = input.len() / c;
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * c..][..c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for i in 0..c {
            let h = (row[i] - mean) * is;
            xhat[r * c + i] = h;
            y[r * c + i] = gamma.data()[i] * h + beta.data()[i];
        }
    }
    Ok((
        Tensor::new(input.shape(), y)?,
        NormSaved {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        },
    ))
}

pub fn layer_norm_backward(
    grad_out: &Tensor,
    saved: &NormSaved,
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let rows = grad_out.len() / c;
    let dy = grad_out.data();
    let xh = saved.xhat.data();
    let g = gamma.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for r in 0..rows {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            let k = r * c + i;
            let d = dy[k] * g[i];
            mean_d += d;
            mean_dx += d * xh[k];
            dg[i] += dy[k] * xh[k];
            db[i] += dy[k];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for i in 0..c {
            let k = r * c + i;
            dx[k] = saved.inv_std[r] * (dy[k] * g[i] - mean_d - xh[k] * mean_dx);
        }
    }
    (
        Tensor::new(grad_out.shape(), dx).expect("shape preserved"),
        Tensor::new([c], dg).expect("shape preserved"),
        Tensor::new([c], db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// batch norm 2d
// ---------------------------------------------------------------------------

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalisation over `[B,C,H,W]`.
///
/// Training mode normalises with the biased batch variance and returns the
/// updated running statistics `(1−m)·old + m·batch` (the running variance
/// uses the unbiased batch estimate). Eval mode uses the running statistics
/// and returns `None`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d(
    input: &Tensor,
    stats: &RunningStats,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<(Tensor, Option<RunningStats>)> {
    batch_norm2d_fwd(input, stats, gamma, beta, eps, momentum, training).map(|(y, s, _)| (y, s))
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d_fwd(
    input: &Tensor,
    stats: &RunningStats,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<(Tensor, Option<RunningStats>, NormSaved)> {
    const OP: &str = "batch_norm2d";
    let (b, c, h, w) = input.dims4(OP)?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return shape_err(OP, format!("channel count {c} does not match parameters"));
    }
    let n = b * h * w;
    if training && n == 1 {
        return invalid(OP, "training mode needs more than one value per channel (B·H·W == 1)");
    }
    let plane = h * w;
    let x = input.data();
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    if training {
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += x[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
            }
            let mean = s / n as f64;
            let mut v = 0.0;
            for bi in 0..b {
                v += x[(bi * c + ci) * plane..][..plane]
                    .iter()
                    .map(|&t| (t - mean) * (t - mean))
                    .sum::<f64>();
            }
            means[ci] = mean;
            vars[ci] = v / n as f64;
        }
    } else {
        means.copy_from_slice(&stats.mean);
        vars.copy_from_slice(&stats.var);
    }
    let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            for i in off..off + plane {
                let hv = (x[i] - means[ci]) * inv_std[ci];
                xhat[i] = hv;
                y[i] = gm * hv + bt;
            }
        }
    }
    let updated = training.then(|| {
        let unbias = n as f64 / (n as f64 - 1.0);
        RunningStats {
            mean: (0..c)
                .map(|i| (1.0 - momentum) * stats.mean[i] + momentum * means[i])
                .collect(),
            var: (0..c)
                .map(|i| (1.0 - momentum) * stats.var[i] + momentum * vars[i] * unbias)
                .collect(),
        }
    });
    Ok((
        Tensor::new(input.shape(), y)?,
        updated,
        NormSaved {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        },
    ))
}

pub fn batch_norm2d_backward(
    grad_out: &Tensor,
    saved: &NormSaved,
    gamma: &Tensor,
    training: bool,
) -> (Tensor, Tensor, Tensor) {
    let s = grad_out.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let n = (b * plane) as f64;
    let dy = grad_out.data();
    let xh = saved.xhat.data();
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            for i in off..off + plane {
                dg[ci] += dy[i] * xh[i];
                db[ci] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let scale = gamma.data()[ci] * saved.inv_std[ci];
            for i in off..off + plane {
                dx[i] = if training {
                    scale * (dy[i] - db[ci] / n - xh[i] * dg[ci] / n)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (
        Tensor::new(s, dx).expect("shape preserved"),
        Tensor::new([c], dg).expect("shape preserved"),
        Tensor::new([c], db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
    Relu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn elementwise(f: Activation, input: &Tensor) -> Tensor {
    input.map(|x| f.apply(x))
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return shape_err("softmax", format!("axis {axis} out of range for {:?}", input.shape()));
    }
    let (outer, n, inner) = axis_split(input.shape(), axis);
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).map(|k| x[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..n {
                let e = (x[base + k * inner] - m).exp();
                y[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                y[base + k * inner] /= s;
            }
        }
    }
    Tensor::new(input.shape(), y)
}

pub fn softmax_backward(grad_out: &Tensor, output: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(output.shape(), axis);
    let y = output.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n).map(|k| dy[base + k * inner] * y[base + k * inner]).sum();
            for k in 0..n {
                let j = base + k * inner;
                dx[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// token-wise linear maps
// ---------------------------------------------------------------------------

/// `y = x·Wᵀ + b` over the last axis; `weight` is `[Out, In]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "linear";
    let din = *input.shape().last().expect("rank >= 1");
    let [dout, wi] = *weight.shape() else {
        return shape_err(OP, format!("weight must be [Out,In], got {:?}", weight.shape()));
    };
    if wi != din {
        return shape_err(OP, format!("weight In={wi}, input last axis={din}"));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return shape_err(OP, format!("bias {:?}, expected [{dout}]", b.shape()));
        }
    }
    let rows = input.len() / din;
    let mut y = vec![0.0; rows * dout];
    gemm(rows, din, dout, 1.0, input.data(), din, 1, weight.data(), 1, din, 0.0, &mut y, dout);
    if let Some(b) = bias {
        for r in 0..rows {
            for (o, bv) in y[r * dout..][..dout].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Tensor::new(shape, y)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> (Tensor, Tensor, Tensor) {
    let din = *input.shape().last().expect("rank >= 1");
    let dout = weight.shape()[0];
    let rows = input.len() / din;
    let dy = grad_out.data();
    let mut dx = vec![0.0; input.len()];
    gemm(rows, dout, din, 1.0, dy, dout, 1, weight.data(), din, 1, 0.0, &mut dx, din);
    let mut dw = vec![0.0; dout * din];
    gemm(dout, rows, din, 1.0, dy, 1, dout, input.data(), din, 1, 0.0, &mut dw, din);
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        for (d, g) in db.iter_mut().zip(&dy[r * dout..][..dout]) {
            *d += g;
        }
    }
    (
        Tensor::new(input.shape(), dx).expect("shape preserved"),
        Tensor::new(weight.shape(), dw).expect("shape preserved"),
        Tensor::new([dout], db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// spatial layout helpers
// ---------------------------------------------------------------------------

/// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let (ba, ca, ha, wa) = a.dims4(OP)?;
    let (bb, cb, hb, wb) = b.dims4(OP)?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return shape_err(OP, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..ba {
        out.extend_from_slice(&a.data()[bi * ca * plane..][..ca * plane]);
        out.extend_from_slice(&b.data()[bi * cb * plane..][..cb * plane]);
    }
    Tensor::new([ba, ca + cb, ha, wa], out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = g.dims4("split_channels")?;
    let cb = c - ca;
    let plane = h * w;
    let mut ga = Vec::with_capacity(b * ca * plane);
    let mut gb = Vec::with_capacity(b * cb * plane);
    for bi in 0..b {
        let base = bi * c * plane;
        ga.extend_from_slice(&g.data()[base..][..ca * plane]);
        gb.extend_from_slice(&g.data()[base + ca * plane..][..cb * plane]);
    }
    Ok((Tensor::new([b, ca, h, w], ga)?, Tensor::new([b, cb, h, w], gb)?))
}

/// Zero-pads (or, with negative amounts, crops) the spatial extents of
/// `[B,C,H,W]`: `top/left` rows/cols are added before, `bottom/right` after.
pub fn pad_spatial(x: &Tensor, top: isize, bottom: isize, left: isize, right: isize) -> Result<Tensor> {
    const OP: &str = "pad_spatial";
    let (b, c, h, w) = x.dims4(OP)?;
    let nh = h as isize + top + bottom;
    let nw = w as isize + left + right;
    if nh < 1 || nw < 1 {
        return shape_err(OP, format!("padding produces empty extent from {:?}", x.shape()));
    }
    let (nh, nw) = (nh as usize, nw as usize);
    let mut out = vec![0.0; b * c * nh * nw];
    for p in 0..b * c {
        for oy in 0..nh {
            let iy = oy as isize - top;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..nw {
                let ix = ox as isize - left;
                if ix >= 0 && ix < w as isize {
                    out[p * nh * nw + oy * nw + ox] = x.data()[p * h * w + iy as usize * w + ix as usize];
                }
            }
        }
    }
    Tensor::new([b, c, nh, nw], out)
}

pub fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op,
            detail: format!("at flat index {i} of {:?}", t.shape()),
        });
    }
    Ok(())
}
