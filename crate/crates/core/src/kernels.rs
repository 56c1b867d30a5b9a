//! Raw numeric kernels on flat row-major buffers.
//!
//! Everything here is single-threaded and reduces in a fixed order, so results
//! are bit-reproducible for identical inputs.

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (a_rs, a_cs): (isize, isize),
    b: &[f64],
    (b_rs, b_cs): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (c_rs, c_cs): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index
    // in [0, m) x [0, k) and [0, k) x [0, n); checked by the debug asserts.
    debug_assert!(reach(m, k, a_rs, a_cs) <= a.len());
    debug_assert!(reach(k, n, b_rs, b_cs) <= b.len());
    debug_assert!(reach(m, n, c_rs, c_cs) <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            c_rs,
            c_cs,
        );
    }
}

fn reach(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major `a(r×k) · b(k×c)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    if k == 0 {
        return out;
    }
    gemm(
        r,
        k,
        c,
        1.0,
        a,
        (k as isize, 1),
        b,
        (c as isize, 1),
        0.0,
        &mut out,
        (c as isize, 1),
    );
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output columns `x` whose input column `x·stride + j − pad` lies inside the
/// image.
fn valid_cols(g: &ConvGeom, j: usize, ow: usize) -> std::ops::Range<usize> {
    let lo = (g.pad.saturating_sub(j)).div_ceil(g.stride);
    let hi = if g.w + g.pad > j {
        ((g.w + g.pad - j - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Adjoint of the unfolding: scatter-add columns `off..off + H'·W'` back into
/// one image gradient.
fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, off: usize, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ld + off..row * ld + off + p];
                let xs = valid_cols(g, j, ow);
                if xs.is_empty() {
                    continue;
                }
                let x0 = xs.start * g.stride + j - g.pad;
                for y in 0..oh {
                    let iy = (y * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[y * ow + xs.start..y * ow + xs.end];
                    for (n, v) in s.iter().enumerate() {
                        dst[x0 + n * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Unfold the whole batch into a patch × (B·H'·W') matrix.
pub(crate) fn im2col_batch(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_stride = g.c_in * g.h * g.w;
    let mut cols = Vec::with_capacity(g.patch() * g.batch * oh * ow);
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let xs = valid_cols(g, j, ow);
                for b in 0..g.batch {
                    let plane = &input[b * in_stride + c * g.h * g.w..b * in_stride + (c + 1) * g.h * g.w];
                    for y in 0..oh {
                        let iy = (y * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h || xs.is_empty() {
                            cols.resize(cols.len() + ow, 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        cols.resize(cols.len() + xs.start, 0.0);
                        let x0 = xs.start * g.stride + j - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[x0..x0 + xs.len()]);
                        } else {
                            cols.extend((0..xs.len()).map(|n| src[x0 + n * g.stride]));
                        }
                        cols.resize(cols.len() + ow - xs.end, 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// Forward convolution; also returns the unfolded input for reuse in the
/// weight gradient.
pub(crate) fn conv2d_forward_cols(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (patch, p) = (g.patch(), g.positions());
    let ld = g.batch * p;
    let cols = im2col_batch(g, input);
    let mut tmp = vec![0.0; g.k * ld];
    gemm(
        g.k,
        patch,
        ld,
        1.0,
        weight,
        (patch as isize, 1),
        &cols,
        (ld as isize, 1),
        0.0,
        &mut tmp,
        (ld as isize, 1),
    );
    let mut out = Vec::with_capacity(g.batch * g.k * p);
    for b in 0..g.batch {
        for k in 0..g.k {
            out.extend(tmp[k * ld + b * p..k * ld + (b + 1) * p].iter().map(|v| v + bias[k]));
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// `cols`, when given, must be the unfolded `input` from the forward pass.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    cols: Option<&[f64]>,
    weight: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (patch, p) = (g.patch(), g.positions());
    let ld = g.batch * p;
    let in_stride = g.c_in * g.h * g.w;
    let (need_in, need_w, need_b) = need;
    // grad_out reordered to K × (B·P)
    let mut gy = Vec::with_capacity(g.k * ld);
    for k in 0..g.k {
        for b in 0..g.batch {
            gy.extend_from_slice(&grad_out[(b * g.k + k) * p..(b * g.k + k + 1) * p]);
        }
    }
    let g_b = need_b.then(|| gy.chunks(ld).map(|r| r.iter().sum::<f64>()).collect());
    let g_w = need_w.then(|| {
        let owned;
        let cols = match cols {
            Some(c) => c,
            None => {
                owned = im2col_batch(g, input);
                &owned
            }
        };
        let mut gw = vec![0.0; weight.len()];
        gemm(
            g.k,
            ld,
            patch,
            1.0,
            &gy,
            (ld as isize, 1),
            cols,
            (1, ld as isize),
            0.0,
            &mut gw,
            (patch as isize, 1),
        );
        gw
    });
    let g_in = need_in.then(|| {
        let mut gcols = vec![0.0; patch * ld];
        gemm(
            patch,
            g.k,
            ld,
            1.0,
            weight,
            (1, patch as isize),
            &gy,
            (ld as isize, 1),
            0.0,
            &mut gcols,
            (ld as isize, 1),
        );
        let mut gi = vec![0.0; input.len()];
        for b in 0..g.batch {
            col2im(g, &gcols, ld, b * p, &mut gi[b * in_stride..(b + 1) * in_stride]);
        }
        gi
    });
    ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    }
}

/// 2×2 max pooling with stride 2 over a B×C×H×W buffer. Odd trailing rows and
/// columns are dropped. Returns the pooled values and the flat source index of
/// each maximum (first occurrence wins on ties).
pub(crate) fn max_pool2x2(input: &[f64], bc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(bc * oh * ow);
    let mut arg = Vec::with_capacity(bc * oh * ow);
    for plane in 0..bc {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) struct BnForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization with batch statistics over (B, spatial).
/// `var` is the biased batch variance.
pub(crate) fn batch_norm_train(
    x: &[f64],
    b: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> BnForward {
    let n = (b * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            let o = (bi * c + ch) * s;
            acc += x[o..o + s].iter().sum::<f64>();
        }
        let m = acc / n;
        let mut acc2 = 0.0;
        for bi in 0..b {
            let o = (bi * c + ch) * s;
            acc2 += x[o..o + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = acc2 / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * s;
            for i in o..o + s {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns (grad_x, grad_gamma, grad_beta) for [`batch_norm_train`].
pub(crate) fn batch_norm_train_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    b: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (b * s) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * s;
            for i in o..o + s {
                g_beta[ch] += g[i];
                g_gamma[ch] += g[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![0.0; g.len()];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * s;
            let scale = gamma[ch] * inv_std[ch] / n;
            for i in o..o + s {
                gx[i] = scale * (n * g[i] - g_beta[ch] - xhat[i] * g_gamma[ch]);
            }
        }
    }
    (gx, g_gamma, g_beta)
}
