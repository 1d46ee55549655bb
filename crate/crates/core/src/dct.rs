//! Full-frame orthonormal 2-D DCT-II and the learnable frequency-domain
//! feature branch of the vector field.
//!
//! The transform is applied separably with dense cosine matrices:
//! `Y = C_H · X · C_Wᵀ` per channel, where
//! `C_N[k][n] = α_k · cos(π (2n + 1) k / 2N)`, `α_0 = √(1/N)`, `α_k = √(2/N)`.
//! Because `C_N` is orthogonal, the inverse is `X = C_Hᵀ · Y · C_W`.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::kernels::gemm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Orthonormal DCT-II matrix of order `n`, row-major `n×n`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m[k * n + i] =
                alpha * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

/// `out = left · plane · rightᵀ` (or the transposed variant for the inverse)
/// applied to every `h×w` plane of `x`.
fn separable(x: &[f64], planes: usize, h: usize, w: usize, ch: &[f64], cw: &[f64], inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        // tmp = C_H · X   (forward)   or   C_Hᵀ · Y   (inverse)
        gemm(h, h, w, ch, inverse, src, false, &mut tmp, 0.0);
        // out = tmp · C_Wᵀ (forward)  or   tmp · C_W  (inverse)
        gemm(h, w, w, &tmp, false, cw, !inverse, &mut out[p * h * w..(p + 1) * h * w], 0.0);
    }
    out
}

fn planes_of(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err!("dct needs at least 2 dims, got {:?}", s));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(shape_err!("dct on empty plane {:?}", s));
    }
    Ok((x.len() / (h * w), h, w))
}

/// Per-plane orthonormal 2-D DCT-II over the last two axes.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = planes_of(x)?;
    let out = separable(x.data(), planes, h, w, &dct_matrix(h), &dct_matrix(w), false);
    Tensor::from_vec(x.shape(), out)
}

/// Inverse of [`dct2`].
pub fn idct2(c: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = planes_of(c)?;
    let out = separable(c.data(), planes, h, w, &dct_matrix(h), &dct_matrix(w), true);
    Tensor::from_vec(c.shape(), out)
}

impl Graph {
    /// Differentiable per-plane [`dct2`] of a rank-4 tensor.
    pub fn dct2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let ch = Arc::new(dct_matrix(h));
        let cw = Arc::new(dct_matrix(w));
        let planes = self.value(x).len() / (h * w);
        let data = separable(self.value(x).data(), planes, h, w, &ch, &cw, false);
        let value = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.op(
            &[x],
            value,
            Box::new(move |g, p, _| {
                // The operator is orthogonal, so its adjoint is the inverse.
                let gx = separable(g.data(), planes, h, w, &ch, &cw, true);
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }
}

/// Frequency-domain branch: DCT of each image channel followed by a learnable
/// 1×1 projection (`field.dctproj.weight`: `F×3×1×1`, `field.dctproj.bias`: `F`).
pub fn dct_feature(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let coeffs = g.dct2(x)?;
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.conv2d(coeffs, w, Some(b), 1, 0)
}

pub fn init_params(store: &mut ParamStore, prefix: &str, in_channels: usize, out_channels: usize) {
    // Zero init keeps the initial field driven by the spatial trunk only.
    store.insert(
        format!("{prefix}.weight"),
        Tensor::zeros(&[out_channels, in_channels, 1, 1]),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
}
