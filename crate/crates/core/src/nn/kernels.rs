//! Raw numeric kernels over NHWC buffers. All loops run in a fixed order so
//! results are bit-reproducible between runs.

/// `c = op(a) · op(b) (+ c if accumulate)` for row-major buffers; `a` is
/// logically `m × k`, `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // regions whose bounds were checked by the debug assertion, and the
    // caller's slice lengths cover them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    pub fn rows(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold NHWC input into `[N·Ho·Wo, k·k·C]` rows ordered `(ky, kx, c)`.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let plen = g.patch_len();
    let c = g.c_in;
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let dst = &mut cols[row + (ky * g.kernel + kx) * c..][..c];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            dst.fill(0.0);
                        } else {
                            let src = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                            dst.copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add rows back onto the NHWC input gradient.
pub fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let plen = g.patch_len();
    let c = g.c_in;
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = &cols[row + (ky * g.kernel + kx) * c..][..c];
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, weight layout `[k·k, C]`.
pub fn depthwise_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom, out: &mut [f32]) {
    if g.stride == 1 {
        return depthwise_forward_s1(x, w, bias, g, out);
    }
    let (ho, wo) = g.out_hw();
    let c = g.c_in;
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[((n * ho + oy) * wo + ox) * c..][..c];
                match bias {
                    Some(b) => o.copy_from_slice(b),
                    None => o.fill(0.0),
                }
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = &x[((n * g.h + iy as usize) * g.w + ix as usize) * c..][..c];
                        let wk = &w[(ky * g.kernel + kx) * c..][..c];
                        for ((o, &s), &k) in o.iter_mut().zip(src).zip(wk) {
                            *o += s * k;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; accumulates into `dx`, `dw`, `db`.
pub fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let (ho, wo) = g.out_hw();
    let c = g.c_in;
    if let Some(db) = db {
        for row in dout.chunks_exact(c) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if g.stride == 1 {
        return depthwise_backward_s1(x, w, dout, g, dx, dw);
    }
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &dout[((n * ho + oy) * wo + ox) * c..][..c];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xi = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        let ki = (ky * g.kernel + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            let wk = &w[ki..ki + c];
                            for ((d, &k), &o) in dx[xi..xi + c].iter_mut().zip(wk).zip(go) {
                                *d += k * o;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let src = &x[xi..xi + c];
                            for ((d, &s), &o) in dw[ki..ki + c].iter_mut().zip(src).zip(go) {
                                *d += s * o;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Each kernel tap's weights repeated across one output row, so a tap
/// applies to a whole row span as one elementwise product.
fn tap_rows(w: &[f32], taps: usize, c: usize, wo: usize) -> Vec<f32> {
    let mut t = Vec::with_capacity(taps * wo * c);
    for tap in 0..taps {
        for _ in 0..wo {
            t.extend_from_slice(&w[tap * c..(tap + 1) * c]);
        }
    }
    t
}

/// Output columns `[lo, hi)` whose input column for tap `kx` is in bounds.
fn col_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = wo.min((w + pad).saturating_sub(kx));
    (lo, hi.max(lo))
}

fn depthwise_forward_s1(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom, out: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (c, k) = (g.c_in, g.kernel);
    let row = wo * c;
    let taps = tap_rows(w, k * k, c, wo);
    for n in 0..g.n {
        for oy in 0..ho {
            let o = &mut out[(n * ho + oy) * row..][..row];
            match bias {
                Some(b) => o.chunks_exact_mut(c).for_each(|p| p.copy_from_slice(b)),
                None => o.fill(0.0),
            }
            for ky in 0..k {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = (n * g.h + iy as usize) * g.w;
                for kx in 0..k {
                    let (lo, hi) = col_span(kx, g.pad, g.w, wo);
                    if lo == hi {
                        continue;
                    }
                    let len = (hi - lo) * c;
                    let xs = &x[(xrow + lo + kx - g.pad) * c..][..len];
                    let ws = &taps[(ky * k + kx) * row..][..len];
                    for ((o, &a), &b) in o[lo * c..hi * c].iter_mut().zip(xs).zip(ws) {
                        *o += a * b;
                    }
                }
            }
        }
    }
}

fn depthwise_backward_s1(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    mut dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let (ho, wo) = g.out_hw();
    let (c, k) = (g.c_in, g.kernel);
    let row = wo * c;
    let taps = tap_rows(w, k * k, c, wo);
    let mut acc = dw.is_some().then(|| vec![0.0f32; k * k * row]);
    for n in 0..g.n {
        for oy in 0..ho {
            let go = &dout[(n * ho + oy) * row..][..row];
            for ky in 0..k {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = (n * g.h + iy as usize) * g.w;
                for kx in 0..k {
                    let (lo, hi) = col_span(kx, g.pad, g.w, wo);
                    if lo == hi {
                        continue;
                    }
                    let len = (hi - lo) * c;
                    let xi = (xrow + lo + kx - g.pad) * c;
                    let gs = &go[lo * c..hi * c];
                    let tap = (ky * k + kx) * row;
                    if let Some(dx) = dx.as_deref_mut() {
                        for ((d, &a), &b) in dx[xi..xi + len].iter_mut().zip(gs).zip(&taps[tap..tap + len]) {
                            *d += a * b;
                        }
                    }
                    if let Some(acc) = acc.as_deref_mut() {
                        for ((d, &a), &b) in acc[tap..tap + len].iter_mut().zip(&x[xi..xi + len]).zip(gs) {
                            *d += a * b;
                        }
                    }
                }
            }
        }
    }
    if let (Some(dw), Some(acc)) = (dw, acc) {
        for t in 0..k * k {
            let d = &mut dw[t * c..(t + 1) * c];
            for p in acc[t * row..(t + 1) * row].chunks_exact(c) {
                for (a, &b) in d.iter_mut().zip(p) {
                    *a += b;
                }
            }
        }
    }
}

pub const LN_EPS: f32 = 1e-6;

/// Layer norm over the last axis of `[rows, C]`. Writes the normalized
/// values and per-row reciprocal standard deviations for the backward pass.
pub fn layer_norm_forward(
    x: &[f32],
    c: usize,
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
) {
    for (r, row) in x.chunks_exact(c).enumerate() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let rs = 1.0 / (var + LN_EPS as f64).sqrt();
        rstd[r] = rs as f32;
        let base = r * c;
        for j in 0..c {
            let xh = ((row[j] as f64 - mean) * rs) as f32;
            xhat[base + j] = xh;
            out[base + j] = xh * gamma[j] + beta[j];
        }
    }
}

pub fn layer_norm_backward(
    dout: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    c: usize,
    mut dx: Option<&mut [f32]>,
    mut dgamma: Option<&mut [f32]>,
    mut dbeta: Option<&mut [f32]>,
) {
    let mut dxhat = vec![0.0f32; c];
    for (r, go) in dout.chunks_exact(c).enumerate() {
        let xh = &xhat[r * c..(r + 1) * c];
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..c {
                dg[j] += go[j] * xh[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..c {
                db[j] += go[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_d = 0.0f64;
            let mut mean_dx = 0.0f64;
            for j in 0..c {
                dxhat[j] = go[j] * gamma[j];
                mean_d += dxhat[j] as f64;
                mean_dx += (dxhat[j] * xh[j]) as f64;
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            let rs = rstd[r] as f64;
            let d = &mut dx[r * c..(r + 1) * c];
            for j in 0..c {
                d[j] += ((dxhat[j] as f64 - mean_d - xh[j] as f64 * mean_dx) * rs) as f32;
            }
        }
    }
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_K * (x + 0.044715 * x * x * x)))
}

/// `tanh` through one `exp`; absolute error near 1e-7, well below f32 noise
/// in the surrounding products.
fn tanh(u: f32) -> f32 {
    let e = (2.0 * u.clamp(-10.0, 10.0)).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub const GRN_EPS: f32 = 1e-6;

/// Per-(sample, channel) global response `‖x_c‖₂` over all spatial
/// positions and the normalized response `G_c / (mean_c G + eps)`.
pub fn grn_stats(x: &[f32], n: usize, hw: usize, c: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; n * c];
    let mut nx = vec![0.0f32; n * c];
    let mut acc = vec![0.0f64; c];
    for s in 0..n {
        acc.fill(0.0);
        for row in x[s * hw * c..(s + 1) * hw * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += (v as f64) * (v as f64);
            }
        }
        let g: Vec<f64> = acc.iter().map(|a| a.sqrt()).collect();
        let mean = g.iter().sum::<f64>() / c as f64;
        for j in 0..c {
            gx[s * c + j] = g[j] as f32;
            nx[s * c + j] = (g[j] / (mean + GRN_EPS as f64)) as f32;
        }
    }
    (gx, nx)
}

/// Nearest-neighbour upsampling of NHWC by an integer factor.
pub fn upsample_nearest(x: &[f32], n: usize, h: usize, w: usize, c: usize, f: usize, out: &mut [f32]) {
    let (ho, wo) = (h * f, w * f);
    for s in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let src = ((s * h + y / f) * w + xx / f) * c;
                let dst = ((s * ho + y) * wo + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
}

pub fn upsample_nearest_backward(
    dout: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    f: usize,
    dx: &mut [f32],
) {
    let (ho, wo) = (h * f, w * f);
    for s in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((s * h + y / f) * w + xx / f) * c;
                let src = ((s * ho + y) * wo + xx) * c;
                for (d, v) in dx[dst..dst + c].iter_mut().zip(&dout[src..src + c]) {
                    *d += v;
                }
            }
        }
    }
}

/// Index map for depth-to-space: token `(gy, gx)` with feature vector
/// ordered `(py, px, c)` becomes the `p × p` pixel block at `(gy·p, gx·p)`.
/// Returns, for every output element, the source element index.
pub fn depth_to_space_index(n: usize, gh: usize, gw: usize, p: usize, c: usize) -> Vec<u32> {
    let (h, w) = (gh * p, gw * p);
    let mut idx = vec![0u32; n * h * w * c];
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (gy, py, gx, px) = (y / p, y % p, x / p, x % p);
                let src_base = ((s * gh + gy) * gw + gx) * p * p * c + (py * p + px) * c;
                let dst_base = ((s * h + y) * w + x) * c;
                for ch in 0..c {
                    idx[dst_base + ch] = (src_base + ch) as u32;
                }
            }
        }
    }
    idx
}
