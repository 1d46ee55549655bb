//! Boundary-weighted segmentation loss and the flow-matching regression loss.
//!
//! Pixel weights emphasise a band around mask edges:
//! `W = 1 + gain · |AvgPool_{k×k}(g) − g|` (stride 1, zero padding counted in
//! the average). Both weighted terms are computed per image and averaged over
//! the batch.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_WINDOW: usize = 31;
pub const DEFAULT_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weight_window: usize,
    pub weight_gain: f64,
    pub lambda_fm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weight_window: DEFAULT_WINDOW,
            weight_gain: DEFAULT_GAIN,
            lambda_fm: 1.0,
        }
    }
}

/// Edge-emphasis weights for a `B×1×H×W` binary mask.
pub fn boundary_weights(g: &Tensor, window: usize, gain: f64) -> Result<Tensor> {
    let (b, c, h, w) = g.dims4()?;
    if c != 1 || window == 0 || window % 2 == 0 {
        return Err(shape_err!(
            "boundary_weights: need a 1-channel mask and an odd window, got {:?} / {window}",
            g.shape()
        ));
    }
    let r = window / 2;
    let area = (window * window) as f64;
    let mut out = vec![0.0; g.len()];
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for bi in 0..b {
        let plane = &g.data()[bi * h * w..(bi + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x];
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                out[bi * h * w + y * w + x] = 1.0 + gain * (s / area - plane[y * w + x]).abs();
            }
        }
    }
    Tensor::from_vec(g.shape(), out)
}

fn per_image(p: &Tensor, g: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    if p.shape() != g.shape() || p.shape() != w.shape() || p.is_empty() {
        return Err(shape_err!(
            "loss inputs: p {:?}, g {:?}, w {:?}",
            p.shape(),
            g.shape(),
            w.shape()
        ));
    }
    let b = if p.ndim() == 4 { p.shape()[0] } else { 1 };
    Ok((b, p.len() / b))
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `Σ w·BCE(p, g) / Σ w` per image, averaged over the batch.
pub fn weighted_bce(p: &Tensor, g: &Tensor, w: &Tensor) -> Result<f64> {
    let (b, n) = per_image(p, g, w)?;
    let mut total = 0.0;
    for bi in 0..b {
        let r = bi * n..(bi + 1) * n;
        let (mut num, mut den) = (0.0, 0.0);
        for ((&pv, &gv), &wv) in p.data()[r.clone()].iter().zip(&g.data()[r.clone()]).zip(&w.data()[r]) {
            let pc = clamp_p(pv);
            num += wv * (-gv * pc.ln() - (1.0 - gv) * (1.0 - pc).ln());
            den += wv;
        }
        total += num / den;
    }
    Ok(total / b as f64)
}

/// `1 − (Σ w·p·g + 1) / (Σ w·(p + g − p·g) + 1)` per image, averaged over the batch.
pub fn weighted_iou(p: &Tensor, g: &Tensor, w: &Tensor) -> Result<f64> {
    let (b, n) = per_image(p, g, w)?;
    let mut total = 0.0;
    for bi in 0..b {
        let (inter, union) = iou_terms(p, g, w, bi * n..(bi + 1) * n);
        total += 1.0 - inter / union;
    }
    Ok(total / b as f64)
}

fn iou_terms(p: &Tensor, g: &Tensor, w: &Tensor, r: std::ops::Range<usize>) -> (f64, f64) {
    let (mut inter, mut union) = (1.0, 1.0);
    for ((&pv, &gv), &wv) in p.data()[r.clone()].iter().zip(&g.data()[r.clone()]).zip(&w.data()[r]) {
        inter += wv * pv * gv;
        union += wv * (pv + gv - pv * gv);
    }
    (inter, union)
}

/// Weighted IoU + weighted BCE with shared boundary weights.
pub fn segmentation_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let w = boundary_weights(g, cfg.weight_window, cfg.weight_gain)?;
    Ok(weighted_iou(p, g, &w)? + weighted_bce(p, g, &w)?)
}

/// Mean squared error between a predicted velocity and the straight-line
/// target `x1 − x0`.
pub fn fm_regression_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    if v_pred.shape() != x0.shape() || x0.shape() != x1.shape() {
        return Err(shape_err!(
            "fm loss: {:?}, {:?}, {:?}",
            v_pred.shape(),
            x0.shape(),
            x1.shape()
        ));
    }
    let n = v_pred.len() as f64;
    Ok(v_pred
        .data()
        .iter()
        .zip(x0.data().iter().zip(x1.data()))
        .map(|(v, (a, b))| (v - (b - a)).powi(2))
        .sum::<f64>()
        / n)
}

/// Target state for the straight-line path: `logit(clamp(g, lo, 1 − lo))`.
pub fn logit_target(g: &Tensor, lo: f64) -> Tensor {
    g.map(|v| {
        let c = v.clamp(lo, 1.0 - lo);
        (c / (1.0 - c)).ln()
    })
}

pub const TARGET_CLAMP: f64 = 0.05;

impl Graph {
    /// Differentiable [`weighted_bce`] with respect to `p`.
    pub fn weighted_bce(&mut self, p: Var, g: &Tensor, w: &Tensor) -> Result<Var> {
        let value = weighted_bce(self.value(p), g, w)?;
        let (b, n) = per_image(self.value(p), g, w)?;
        let (g, w) = (g.clone(), w.clone());
        Ok(self.op(
            &[p],
            Tensor::scalar(value),
            Box::new(move |grad, parents, _| {
                let p = parents[0];
                let mut out = vec![0.0; p.len()];
                for bi in 0..b {
                    let r = bi * n..(bi + 1) * n;
                    let den: f64 = w.data()[r.clone()].iter().sum();
                    let scale = grad.item() / (den * b as f64);
                    for i in r {
                        let pv = p.data()[i];
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            continue;
                        }
                        let gv = g.data()[i];
                        out[i] = scale * w.data()[i] * (-gv / pv + (1.0 - gv) / (1.0 - pv));
                    }
                }
                vec![Some(Tensor::from_vec(p.shape(), out).unwrap())]
            }),
        ))
    }

    /// Differentiable [`weighted_iou`] with respect to `p`.
    pub fn weighted_iou(&mut self, p: Var, g: &Tensor, w: &Tensor) -> Result<Var> {
        let value = weighted_iou(self.value(p), g, w)?;
        let (b, n) = per_image(self.value(p), g, w)?;
        let (g, w) = (g.clone(), w.clone());
        Ok(self.op(
            &[p],
            Tensor::scalar(value),
            Box::new(move |grad, parents, _| {
                let p = parents[0];
                let mut out = vec![0.0; p.len()];
                for bi in 0..b {
                    let r = bi * n..(bi + 1) * n;
                    let (inter, union) = iou_terms(p, &g, &w, r.clone());
                    let scale = grad.item() / b as f64;
                    for i in r {
                        let (gv, wv) = (g.data()[i], w.data()[i]);
                        out[i] = -scale * wv * (gv * union - inter * (1.0 - gv)) / (union * union);
                    }
                }
                vec![Some(Tensor::from_vec(p.shape(), out).unwrap())]
            }),
        ))
    }

    /// Differentiable [`segmentation_loss`] with respect to `p`.
    pub fn segmentation_loss(&mut self, p: Var, g: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let w = boundary_weights(g, cfg.weight_window, cfg.weight_gain)?;
        let iou = self.weighted_iou(p, g, &w)?;
        let bce = self.weighted_bce(p, g, &w)?;
        self.add(iou, bce)
    }

    /// Mean squared error of `v` against a constant target.
    pub fn mse(&mut self, v: Var, target: &Tensor) -> Result<Var> {
        if self.shape(v) != target.shape() {
            return Err(shape_err!("mse: {:?} vs {:?}", self.shape(v), target.shape()));
        }
        let n = target.len() as f64;
        let value = self
            .value(v)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let target = target.clone();
        Ok(self.op(
            &[v],
            Tensor::scalar(value),
            Box::new(move |grad, parents, _| {
                let s = 2.0 * grad.item() / n;
                vec![Some(parents[0].zip_map(&target, |a, b| s * (a - b)))]
            }),
        ))
    }
}
