//! Numeric building blocks shared by the graph ops and the preprocessing code.

/// Row-major GEMM: `c = op(a)·op(b) + beta·c`, with `op(a)` of shape `m×k`
/// and `op(b)` of shape `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the full extents implied by (m, k, n) and the
    // strides computed above, and `c` does not alias `a` or `b`.
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
pub(crate) struct ConvGeom {
    pub cin: usize,
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

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `cin×h×w` image into a `(cin·kh·kw) × (oh·ow)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a patch matrix back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution (cross-correlation, zero padding).
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let k = g.patch();
    let mut out = vec![0.0; batch * cout * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * ohw]
    };
    for b in 0..batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(ohw).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, k, ohw, weight, false, xb, false, ob, beta);
        } else {
            im2col(xb, g, &mut cols);
            gemm(cout, k, ohw, weight, false, &cols, false, ob, beta);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ohw = g.out_h() * g.out_w();
    let k = g.patch();
    let plane = g.cin * g.h * g.w;
    let mut gx = vec![0.0; batch * plane];
    let mut gw = vec![0.0; cout * k];
    let mut gb = vec![0.0; cout];
    let mut cols = vec![0.0; k * ohw];
    let mut dcols = vec![0.0; k * ohw];
    for b in 0..batch {
        let xb = &x[b * plane..(b + 1) * plane];
        let gy = &grad_out[b * cout * ohw..(b + 1) * cout * ohw];
        for (co, chunk) in gy.chunks(ohw).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        if g.is_pointwise() {
            gemm(cout, ohw, k, gy, false, xb, true, &mut gw, 1.0);
            gemm(k, cout, ohw, weight, true, gy, false, &mut gx[b * plane..(b + 1) * plane], 0.0);
        } else {
            im2col(xb, g, &mut cols);
            gemm(cout, ohw, k, gy, false, &cols, true, &mut gw, 1.0);
            gemm(k, cout, ohw, weight, true, gy, false, &mut dcols, 0.0);
            col2im(&dcols, g, &mut gx[b * plane..(b + 1) * plane]);
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
/// Weight layout is `cin × cout × 2 × 2`.
pub(crate) fn upconv2_forward(
    x: &[f64],
    (batch, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; batch * cout * oh * ow];
    let mut taps = vec![0.0; cout * 4 * hw];
    for b in 0..batch {
        let xb = &x[b * cin * hw..(b + 1) * cin * hw];
        gemm(cout * 4, cin, hw, weight, true, xb, false, &mut taps, 0.0);
        let ob = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        for co in 0..cout {
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let src = &taps[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        ob[(co * oh + 2 * i + dy) * ow + 2 * j + dx] = src[i * w + j] + bias[co];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upconv2_backward(
    x: &[f64],
    (batch, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; batch * cin * hw];
    let mut gw = vec![0.0; cin * cout * 4];
    let mut gb = vec![0.0; cout];
    let mut taps = vec![0.0; cout * 4 * hw];
    for b in 0..batch {
        let gy = &grad_out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        for co in 0..cout {
            gb[co] += gy[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let dst = &mut taps[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = gy[(co * oh + 2 * i + dy) * ow + 2 * j + dx];
                    }
                }
            }
        }
        let xb = &x[b * cin * hw..(b + 1) * cin * hw];
        gemm(cin, hw, cout * 4, xb, false, &taps, true, &mut gw, 1.0);
        gemm(cin, cout * 4, hw, weight, false, &taps, false, &mut gx[b * cin * hw..(b + 1) * cin * hw], 0.0);
    }
    (gx, gw, gb)
}

/// 2×2 max pooling over `planes` independent `h×w` planes. Ties resolve to the
/// first element in raster order.
pub(crate) fn maxpool2_argmax(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + dy) * w + 2 * j + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Per-axis sampling taps for bilinear resizing with half-pixel centers.
#[derive(Clone, Debug)]
pub(crate) struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn linear_taps(src: usize, dst: usize) -> LinearTaps {
    let scale = src as f64 / dst as f64;
    let mut taps = LinearTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { pos - lo as f64 });
    }
    taps
}

/// Bilinear resize of `planes` stacked `sh×sw` planes to `dh×dw`.
pub(crate) fn bilinear_resize(
    x: &[f64],
    planes: usize,
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
) -> Vec<f64> {
    if (sh, sw) == (dh, dw) {
        return x.to_vec();
    }
    let ty = linear_taps(sh, dh);
    let tx = linear_taps(sw, dw);
    let mut out = vec![0.0; planes * dh * dw];
    for p in 0..planes {
        let src = &x[p * sh * sw..(p + 1) * sh * sw];
        let dst = &mut out[p * dh * dw..(p + 1) * dh * dw];
        for i in 0..dh {
            let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
            for j in 0..dw {
                let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
                let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
                dst[i * dw + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub(crate) fn bilinear_resize_adjoint(
    g: &[f64],
    planes: usize,
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
) -> Vec<f64> {
    if (sh, sw) == (dh, dw) {
        return g.to_vec();
    }
    let ty = linear_taps(sh, dh);
    let tx = linear_taps(sw, dw);
    let mut out = vec![0.0; planes * sh * sw];
    for p in 0..planes {
        let gp = &g[p * dh * dw..(p + 1) * dh * dw];
        let dst = &mut out[p * sh * sw..(p + 1) * sh * sw];
        for i in 0..dh {
            let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
            for j in 0..dw {
                let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                let v = gp[i * dw + j];
                dst[y0 * sw + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * sw + x1] += v * (1.0 - fy) * fx;
                dst[y1 * sw + x0] += v * fy * (1.0 - fx);
                dst[y1 * sw + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Nearest-neighbour resize (source index `floor(i·src/dst)`).
pub(crate) fn nearest_resize(
    x: &[f64],
    planes: usize,
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; planes * dh * dw];
    for p in 0..planes {
        for i in 0..dh {
            let si = i * sh / dh;
            for j in 0..dw {
                let sj = j * sw / dw;
                out[(p * dh + i) * dw + j] = x[(p * sh + si) * sw + sj];
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
