//! Raw forward/backward kernels on flat row-major buffers.
//!
//! The tape owns shape bookkeeping; these functions assume their callers
//! already validated extents.

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is `m×k` after the optional transpose, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n extents
    // of the three slices, whose lengths were checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
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
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
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

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfold one `[C,H,W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.c_in {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.c_in {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst_row[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is `[N,C,H,W]`, `w` is `[Co,C,kh,kw]`.
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * c_out * plane];
    let mut cols = vec![0.0; g.rows() * plane];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let o = &mut out[s * c_out * plane..(s + 1) * c_out * plane];
        gemm(c_out, g.rows(), plane, w, false, &cols, false, o, false);
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    c_out: usize,
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c_in * g.h * g.w;
    let rows = g.rows();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut db = want_db.then(|| vec![0.0; c_out]);
    let mut cols = vec![0.0; rows * plane];
    for s in 0..n {
        let d = &dout[s * c_out * plane..(s + 1) * c_out * plane];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in d.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            gemm(c_out, plane, rows, d, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, c_out, plane, w, true, d, false, &mut cols, false);
            col2im(&cols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling over `[N·C, H, W]` planes. Returns output and the flat input
/// index of each window's first (row-major) maximum.
pub fn max_pool2d_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = vec![0.0; planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                        // strict comparison keeps the first maximum on ties
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * ho + oi) * wo + oj;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Row-wise numerically stable softmax over groups of `n` contiguous values
/// separated by `inner` (the axis stride).
pub fn softmax_strided(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                y[at(j)] /= z;
            }
        }
    }
    y
}
