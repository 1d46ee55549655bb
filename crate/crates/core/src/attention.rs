//! Spatial self-attention gating for the vector field.
//!
//! The trunk output is encoded into query/key/value token maps by three large
//! strided convolutions, attended with a single softmax head, then projected to
//! one scalar per token and squashed into `(0, 1)` gating weights that are
//! upsampled back onto the pixel grid.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{uniform_init, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Channels of the feature map being attended (`F`).
    pub in_channels: usize,
    /// Head dimension `d`.
    pub head_dim: usize,
    /// Side of the square Q/K/V kernels.
    pub kernel: usize,
    /// Token stride `s`: one token per `s×s` pixel cell.
    pub stride: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            in_channels: 1,
            head_dim: 64,
            kernel: 7,
            stride: 8,
        }
    }
}

/// Query, key and value token matrices, each `B×T×d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Token grid `(H/s, W/s)`.
    pub grid: (usize, usize),
}

pub fn init_params(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) {
    let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
    for name in ["q", "k", "v"] {
        store.insert(
            format!("{prefix}.{name}.weight"),
            uniform_init(rng, &[cfg.head_dim, cfg.in_channels, cfg.kernel, cfg.kernel], fan_in, 3f64.sqrt()),
        );
        store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(&[cfg.head_dim]));
    }
    store.insert(
        format!("{prefix}.proj.weight"),
        uniform_init(rng, &[1, cfg.head_dim], cfg.head_dim, 1.0),
    );
    store.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[1]));
}

/// Three `k×k` convolutions with stride `s` (same padding) producing Q, K, V.
pub fn qkv_project(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    f: Var,
) -> Result<AttentionMaps> {
    let (_, _, h, w) = g.value(f).dims4()?;
    if cfg.stride == 0 || h % cfg.stride != 0 || w % cfg.stride != 0 {
        return Err(shape_err!(
            "attention: {h}x{w} is not divisible by token stride {}",
            cfg.stride
        ));
    }
    let pad = cfg.kernel / 2;
    let mut maps = Vec::with_capacity(3);
    for name in ["q", "k", "v"] {
        let wt = g.param(store, &format!("{prefix}.{name}.weight"))?;
        let b = g.param(store, &format!("{prefix}.{name}.bias"))?;
        let m = g.conv2d(f, wt, Some(b), cfg.stride, pad)?;
        maps.push(g.map_to_tokens(m)?);
    }
    Ok(AttentionMaps {
        q: maps[0],
        k: maps[1],
        v: maps[2],
        grid: (h / cfg.stride, w / cfg.stride),
    })
}

/// Row-wise softmax of `QKᵀ/√d` applied to `V`, for `B×T×d` inputs.
/// Returns the output and the `B×T×T` attention probabilities.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s {
        return Err(shape_err!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; b * t * t];
    let mut out = vec![0.0; b * t * d];
    for bi in 0..b {
        let qb = &q.data()[bi * t * d..(bi + 1) * t * d];
        let kb = &k.data()[bi * t * d..(bi + 1) * t * d];
        let vb = &v.data()[bi * t * d..(bi + 1) * t * d];
        let pb = &mut probs[bi * t * t..(bi + 1) * t * t];
        crate::kernels::gemm(t, d, t, qb, false, kb, true, pb, 0.0);
        for row in pb.chunks_mut(t) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        crate::kernels::gemm(t, t, d, pb, false, vb, false, &mut out[bi * t * d..(bi + 1) * t * d], 0.0);
    }
    Ok((
        Tensor::from_vec(&[b, t, d], out)?,
        Tensor::from_vec(&[b, t, t], probs)?,
    ))
}

impl Graph {
    /// Differentiable single-head scaled dot-product attention.
    pub fn self_attention(&mut self, maps: &AttentionMaps) -> Result<Var> {
        let (out, probs) = attend(self.value(maps.q), self.value(maps.k), self.value(maps.v))?;
        let s = out.shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let scale = 1.0 / (d as f64).sqrt();
        Ok(self.op(
            &[maps.q, maps.k, maps.v],
            out,
            Box::new(move |g, p, _| {
                use crate::kernels::gemm;
                let (q, k, v) = (p[0].data(), p[1].data(), p[2].data());
                let gd = g.data();
                let mut gq = vec![0.0; b * t * d];
                let mut gk = vec![0.0; b * t * d];
                let mut gv = vec![0.0; b * t * d];
                let mut dp = vec![0.0; t * t];
                for bi in 0..b {
                    let r = bi * t * d..(bi + 1) * t * d;
                    let pb = &probs.data()[bi * t * t..(bi + 1) * t * t];
                    // dV = Pᵀ dO
                    gemm(t, t, d, pb, true, &gd[r.clone()], false, &mut gv[r.clone()], 0.0);
                    // dP = dO Vᵀ
                    gemm(t, d, t, &gd[r.clone()], false, &v[r.clone()], true, &mut dp, 0.0);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d scale
                    for (prow, drow) in pb.chunks(t).zip(dp.chunks_mut(t)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    gemm(t, t, d, &dp, false, &k[r.clone()], false, &mut gq[r.clone()], 0.0);
                    gemm(t, t, d, &dp, true, &q[r.clone()], false, &mut gk[r.clone()], 0.0);
                }
                vec![
                    Some(Tensor::from_vec(&[b, t, d], gq).unwrap()),
                    Some(Tensor::from_vec(&[b, t, d], gk).unwrap()),
                    Some(Tensor::from_vec(&[b, t, d], gv).unwrap()),
                ]
            }),
        ))
    }
}

/// Project each attended token to a scalar, squash with a sigmoid, and
/// nearest-upsample onto a `B×F×H×W` map (identical across the `F` channels).
pub fn attention_weights_to_map(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    att: Var,
    grid: (usize, usize),
    stride: usize,
    channels: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.proj.weight"))?;
    let b = g.param(store, &format!("{prefix}.proj.bias"))?;
    let logits = g.linear(att, w, b)?;
    let weights = g.sigmoid(logits);
    let map = g.tokens_to_map(weights, grid, stride)?;
    g.broadcast_channels(map, channels)
}

/// Full gating path: Q/K/V projection, attention, and weight map.
pub fn gating_weights(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    f: Var,
) -> Result<Var> {
    let maps = qkv_project(g, store, prefix, cfg, f)?;
    let att = g.self_attention(&maps)?;
    attention_weights_to_map(g, store, prefix, att, maps.grid, cfg.stride, cfg.in_channels)
}
