//! Differentiable operations recorded on a [`Graph`].

use crate::autograd::{BnObservation, Graph, Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

impl Graph {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.op(
            &[a, b],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.op(
            &[a, b],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scaled(-1.0))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.op(
            &[a, b],
            value,
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1], |g, y| g * y)),
                    Some(g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.op(&[a], value, Box::new(move |g, _, _| vec![Some(g.scaled(s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.op(&[a], value, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.op(
            &[a],
            value,
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.op(
            &[a],
            value,
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.op(
            &[a],
            value,
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()).unwrap())]),
        ))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (b, _, h, w) = self.value(parts[0]).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err!(
                    "concat: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[b, total, h, w], data)?;
        Ok(self.op(
            parts,
            value,
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut out: Vec<Vec<f64>> =
                    channels.iter().map(|&c| Vec::with_capacity(b * c * hw)).collect();
                for bi in 0..b {
                    let mut off = bi * total * hw;
                    for (slot, &c) in out.iter_mut().zip(&channels) {
                        slot.extend_from_slice(&gd[off..off + c * hw]);
                        off += c * hw;
                    }
                }
                out.into_iter()
                    .zip(&channels)
                    .map(|(d, &c)| Some(Tensor::from_vec(&[b, c, h, w], d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// 2-D convolution, weight `cout×cin×kh×kw`, optional bias `cout`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(shape_err!(
                "conv2d: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(weight)
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(shape_err!("conv2d: kernel {kh}x{kw} does not fit input {h}x{w}"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} for {cout} outputs", self.shape(bv)));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            b,
            &geom,
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            cout,
        );
        let value = Tensor::from_vec(&[b, cout, geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.op(
            &parents,
            value,
            Box::new(move |g, p, _| {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(p[0].data(), b, &geom, p[1].data(), cout, g.data());
                let mut grads = vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gw).unwrap()),
                ];
                if has_bias {
                    grads.push(Some(Tensor::from_vec(&[cout], gb).unwrap()));
                }
                grads
            }),
        ))
    }

    /// 2× transposed convolution, weight `cin×cout×2×2`, bias `cout`.
    pub fn upconv2(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (b, cin, h, w) = dims;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != 2 || kw != 2 || self.shape(bias) != [cout] {
            return Err(shape_err!(
                "upconv: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(weight),
                self.shape(bias)
            ));
        }
        let out = kernels::upconv2_forward(
            self.value(x).data(),
            dims,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
        );
        let value = Tensor::from_vec(&[b, cout, 2 * h, 2 * w], out)?;
        Ok(self.op(
            &[x, weight, bias],
            value,
            Box::new(move |g, p, _| {
                let (gx, gw, gb) =
                    kernels::upconv2_backward(p[0].data(), dims, p[1].data(), cout, g.data());
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gw).unwrap()),
                    Some(Tensor::from_vec(&[cout], gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2: odd spatial size {h}x{w}"));
        }
        let idx = kernels::maxpool2_argmax(self.value(x).data(), b * c, h, w);
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(&[b, c, h / 2, w / 2], data)?;
        let n = b * c * h * w;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut gx = vec![0.0; n];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Batch normalization over `(batch, h, w)` per channel. Parameters are
    /// `{prefix}.weight` / `{prefix}.bias`; running statistics live in the
    /// buffers `{prefix}.running_mean` / `{prefix}.running_var`.
    pub fn batch_norm(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let gamma = self.param(store, &format!("{prefix}.weight"))?;
        let beta = self.param(store, &format!("{prefix}.bias"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch_norm {prefix}: {c} channels vs {:?}", self.shape(gamma)));
        }
        let hw = h * w;
        let count = b * hw;
        let xs = self.value(x).data();
        let (mean, var) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => {
                let rm = store
                    .buffer(&format!("{prefix}.running_mean"))
                    .ok_or_else(|| Error::UnknownParam(format!("{prefix}.running_mean")))?;
                let rv = store
                    .buffer(&format!("{prefix}.running_var"))
                    .ok_or_else(|| Error::UnknownParam(format!("{prefix}.running_var")))?;
                (rm.data().to_vec(), rv.data().to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in base..base + hw {
                    out[k] = gd[ci] * (xs[k] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        let train = self.mode() == Mode::Train;
        if train {
            self.record_bn(BnObservation {
                prefix: prefix.to_string(),
                mean: mean.clone(),
                var,
                count,
            });
        }
        Ok(self.op(
            &[x, gamma, beta],
            value,
            Box::new(move |g, p, _| {
                let gy = g.data();
                let xs = p[0].data();
                let gamma = p[1].data();
                let mut gx = vec![0.0; xs.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ci in 0..c {
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in base..base + hw {
                            sum_g += gy[k];
                            sum_gx += gy[k] * (xs[k] - m) * is;
                        }
                    }
                    gbeta[ci] = sum_g;
                    ggamma[ci] = sum_gx;
                    let n = count as f64;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for k in base..base + hw {
                            gx[k] = if train {
                                let xhat = (xs[k] - m) * is;
                                gamma[ci] * is / n * (n * gy[k] - sum_g - xhat * sum_gx)
                            } else {
                                gamma[ci] * is * gy[k]
                            };
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(&[c], ggamma).unwrap()),
                    Some(Tensor::from_vec(&[c], gbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Bilinear resize of a rank-4 tensor to `h×w` (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, (dh, dw): (usize, usize)) -> Result<Var> {
        let (b, c, sh, sw) = self.value(x).dims4()?;
        if (sh, sw) == (dh, dw) {
            return Ok(x);
        }
        let data = kernels::bilinear_resize(self.value(x).data(), b * c, (sh, sw), (dh, dw));
        let value = Tensor::from_vec(&[b, c, dh, dw], data)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let gx = kernels::bilinear_resize_adjoint(g.data(), b * c, (sh, sw), (dh, dw));
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Repeat a `1×C×H×W` tensor `batch` times.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if b != 1 {
            return Err(shape_err!("expand_batch: leading dim must be 1, got {b}"));
        }
        if batch == 1 {
            return Ok(x);
        }
        let src = self.value(x).data();
        let data = src.iter().copied().cycle().take(batch * src.len()).collect();
        let value = Tensor::from_vec(&[batch, c, h, w], data)?;
        let plane = c * h * w;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut gx = vec![0.0; plane];
                for chunk in g.data().chunks(plane) {
                    for (a, v) in gx.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Repeat a `B×1×H×W` tensor across `channels` channels.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if c != 1 {
            return Err(shape_err!("broadcast_channels: expected 1 channel, got {c}"));
        }
        if channels == 1 {
            return Ok(x);
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * channels * hw);
        for bi in 0..b {
            for _ in 0..channels {
                data.extend_from_slice(&src[bi * hw..(bi + 1) * hw]);
            }
        }
        let value = Tensor::from_vec(&[b, channels, h, w], data)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![0.0; b * hw];
                for bi in 0..b {
                    for ci in 0..channels {
                        let src = &gd[(bi * channels + ci) * hw..(bi * channels + ci + 1) * hw];
                        for (a, v) in gx[bi * hw..(bi + 1) * hw].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// `B×d×h×w` feature map to `B×(h·w)×d` token rows (raster order).
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, d, h, w) = self.value(x).dims4()?;
        let t = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; b * t * d];
        for bi in 0..b {
            for di in 0..d {
                for ti in 0..t {
                    data[(bi * t + ti) * d + di] = src[(bi * d + di) * t + ti];
                }
            }
        }
        let value = Tensor::from_vec(&[b, t, d], data)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for di in 0..d {
                        for ti in 0..t {
                            gx[(bi * d + di) * t + ti] = gd[(bi * t + ti) * d + di];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Affine map over the last axis: `x[..., d] · weightᵀ + bias`, weight `o×d`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err!("linear: scalar input"))?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != d || self.shape(bias) != [ws[0]] {
            return Err(shape_err!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                self.shape(bias)
            ));
        }
        let o = ws[0];
        let rows = self.value(x).len() / d;
        let mut out = vec![0.0; rows * o];
        for chunk in out.chunks_mut(o) {
            chunk.copy_from_slice(self.value(bias).data());
        }
        kernels::gemm(rows, d, o, self.value(x).data(), false, self.value(weight).data(), true, &mut out, 1.0);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = o;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.op(
            &[x, weight, bias],
            value,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![0.0; rows * d];
                kernels::gemm(rows, o, d, gd, false, p[1].data(), false, &mut gx, 0.0);
                let mut gw = vec![0.0; o * d];
                kernels::gemm(o, rows, d, gd, true, p[0].data(), false, &mut gw, 0.0);
                let mut gb = vec![0.0; o];
                for chunk in gd.chunks(o) {
                    for (a, v) in gb.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gw).unwrap()),
                    Some(Tensor::from_vec(p[2].shape(), gb).unwrap()),
                ]
            }),
        ))
    }

    /// `B×T×1` token scalars laid out on a `gh×gw` grid, nearest-upsampled by
    /// `stride` to `B×1×(gh·stride)×(gw·stride)`.
    pub fn tokens_to_map(&mut self, x: Var, (gh, gw): (usize, usize), stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != gh * gw || shape[2] != 1 {
            return Err(shape_err!("tokens_to_map: {:?} for a {gh}x{gw} grid", shape));
        }
        let b = shape[0];
        let (h, w) = (gh * stride, gw * stride);
        let src = self.value(x).data();
        let mut data = vec![0.0; b * h * w];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    data[(bi * h + y) * w + xx] = src[bi * gh * gw + (y / stride) * gw + xx / stride];
                }
            }
        }
        let value = Tensor::from_vec(&[b, 1, h, w], data)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![0.0; b * gh * gw];
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[bi * gh * gw + (y / stride) * gw + xx / stride] +=
                                gd[(bi * h + y) * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }
}
