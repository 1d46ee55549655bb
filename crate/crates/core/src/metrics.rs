//! Segmentation quality measures: Dice, IoU, MAE, weighted F-measure,
//! structure measure (S-measure) and enhanced-alignment measure (E-measure).
//!
//! Inputs are row-major `h×w` planes: a soft prediction in `[0, 1]` and a
//! ground truth that is treated as binary (`≥ 0.5` is foreground). Dice and
//! IoU binarize the prediction with `p > 0.5` (a tie counts as background).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image_io;
use crate::kernels;

const EPS: f64 = f64::EPSILON;
/// Number of prediction thresholds swept by [`e_measure_max`].
pub const E_THRESHOLDS: usize = 256;
pub const S_ALPHA: f64 = 0.5;
pub const F_BETA2: f64 = 1.0;

fn check(p: &[f64], g: &[f64], h: usize, w: usize) -> Result<()> {
    if p.len() != g.len() || p.len() != h * w {
        return Err(shape_err!(
            "metric inputs: prediction {} and ground truth {} for {h}x{w}",
            p.len(),
            g.len()
        ));
    }
    Ok(())
}

#[inline]
fn fg(v: f64) -> bool {
    v >= 0.5
}

#[inline]
fn pred_fg(v: f64) -> bool {
    v > 0.5
}

fn overlap(p: &[f64], g: &[f64]) -> Result<(usize, usize, usize)> {
    if p.len() != g.len() {
        return Err(shape_err!("metric inputs: {} vs {}", p.len(), g.len()));
    }
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&a, &b) in p.iter().zip(g) {
        let (a, b) = (pred_fg(a), fg(b));
        inter += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    Ok((inter, np, ng))
}

/// `2|P∩G| / (|P| + |G|)`, with `0/0 = 1`.
pub fn dice(p: &[f64], g: &[f64]) -> Result<f64> {
    let (inter, np, ng) = overlap(p, g)?;
    Ok(if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// `|P∩G| / |P∪G|`, with `0/0 = 1`.
pub fn iou(p: &[f64], g: &[f64]) -> Result<f64> {
    let (inter, np, ng) = overlap(p, g)?;
    let union = np + ng - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mae(p: &[f64], g: &[f64]) -> Result<f64> {
    if p.len() != g.len() || p.is_empty() {
        return Err(shape_err!("metric inputs: {} vs {}", p.len(), g.len()));
    }
    let gb = g.iter().map(|&v| if fg(v) { 1.0 } else { 0.0 });
    Ok(p.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Exact Euclidean distance to the nearest foreground pixel and that pixel's
/// index. Ties resolve to the smallest `(row, col)`. Foreground pixels map to
/// themselves at distance 0. Returns `None` when there is no foreground.
pub fn nearest_foreground(mask: &[bool], h: usize, w: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    // Per column: nearest foreground row (smaller row wins ties).
    let mut col_near: Vec<Option<usize>> = vec![None; h * w];
    for c in 0..w {
        let mut above: Vec<Option<usize>> = vec![None; h];
        let mut last = None;
        for r in 0..h {
            if mask[r * w + c] {
                last = Some(r);
            }
            above[r] = last;
        }
        let mut next = None;
        for r in (0..h).rev() {
            if mask[r * w + c] {
                next = Some(r);
            }
            col_near[r * w + c] = match (above[r], next) {
                (Some(a), Some(b)) => Some(if r - a <= b - r { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut index = vec![0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for c2 in 0..w {
                let Some(r2) = col_near[r * w + c2] else { continue };
                let d2 = r.abs_diff(r2).pow(2) + c.abs_diff(c2).pow(2);
                let cand = (d2, r2, c2);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
            let (d2, r2, c2) = best.expect("foreground exists");
            dist[r * w + c] = (d2 as f64).sqrt();
            index[r * w + c] = r2 * w + c2;
        }
    }
    Some((dist, index))
}

/// 7×7 Gaussian with σ = 5, normalized to unit sum.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Weighted F-measure (β² = 1) with distance-dependent pixel importance.
/// An all-background ground truth scores 1 when the prediction is also
/// all-background (no pixel `> 0.5`) and 0 otherwise.
pub fn weighted_fmeasure(p: &[f64], g: &[f64], h: usize, w: usize) -> Result<f64> {
    check(p, g, h, w)?;
    let gt: Vec<bool> = g.iter().map(|&v| fg(v)).collect();
    let Some((dist, nearest)) = nearest_foreground(&gt, h, w) else {
        return Ok(if p.iter().any(|&v| pred_fg(v)) { 0.0 } else { 1.0 });
    };
    let err: Vec<f64> = p
        .iter()
        .zip(&gt)
        .map(|(&a, &b)| (a - if b { 1.0 } else { 0.0 }).abs())
        .collect();
    // Background pixels inherit the error of their nearest foreground pixel.
    let et: Vec<f64> = (0..h * w)
        .map(|i| if gt[i] { err[i] } else { err[nearest[i]] })
        .collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                let sy = y as isize + i as isize - 3;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for (j, kv) in row.iter().enumerate() {
                    let sx = x as isize + j as isize - 3;
                    if sx >= 0 && sx < w as isize {
                        acc += kv * et[sy as usize * w + sx as usize];
                    }
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let (mut fg_count, mut fg_ew, mut bg_ew) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        let min_e = if gt[i] && ea[i] < err[i] { ea[i] } else { err[i] };
        if gt[i] {
            fg_count += 1.0;
            fg_ew += min_e;
        } else {
            let importance = 2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp();
            bg_ew += min_e * importance;
        }
    }
    let tp = fg_count - fg_ew;
    let recall = 1.0 - fg_ew / fg_count;
    let precision = tp / (tp + bg_ew + EPS);
    Ok((1.0 + F_BETA2) * recall * precision / (recall + F_BETA2 * precision + EPS))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let denom = (n.max(2) - 1) as f64;
    let mx = p.iter().sum::<f64>() / nf;
    let my = g.iter().sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        sx += (a - mx) * (a - mx);
        sy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `α·S_object + (1 − α)·S_region` with α = 0.5.
/// All-background ground truth gives `1 − mean(p)`; all-foreground gives
/// `mean(p)`.
pub fn s_measure(p: &[f64], g: &[f64], h: usize, w: usize) -> Result<f64> {
    check(p, g, h, w)?;
    let gb: Vec<f64> = g.iter().map(|&v| if fg(v) { 1.0 } else { 0.0 }).collect();
    let n = (h * w) as f64;
    let y = gb.iter().sum::<f64>() / n;
    let mean_p = p.iter().sum::<f64>() / n;
    if y == 0.0 {
        return Ok(1.0 - mean_p);
    }
    if y == 1.0 {
        return Ok(mean_p);
    }
    // Object-aware term.
    let fg_score = object_similarity(p.iter().zip(&gb).filter(|(_, &b)| b == 1.0).map(|(&a, _)| a));
    let bg_score =
        object_similarity(p.iter().zip(&gb).filter(|(_, &b)| b == 0.0).map(|(&a, _)| 1.0 - a));
    let object = y * fg_score + (1.0 - y) * bg_score;

    // Region-aware term: split at the (1-based, half-even rounded) centroid.
    let (mut sr, mut sc, mut cnt) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if gb[r * w + c] == 1.0 {
                sr += r as f64;
                sc += c as f64;
                cnt += 1.0;
            }
        }
    }
    let cx = (sc / cnt).round_ties_even() as usize + 1;
    let cy = (sr / cnt).round_ties_even() as usize + 1;
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut qp = Vec::new();
        let mut qg = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                qp.push(p[r * w + c]);
                qg.push(gb[r * w + c]);
            }
        }
        (qp, qg)
    };
    let area = n;
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let parts = [
        (w1, quad(0, cy, 0, cx)),
        (w2, quad(0, cy, cx, w)),
        (w3, quad(cy, h, 0, cx)),
        (w4, quad(cy, h, cx, w)),
    ];
    let region: f64 = parts
        .iter()
        .map(|(wt, (qp, qg))| if qp.is_empty() { 0.0 } else { wt * region_ssim(qp, qg) })
        .sum();
    Ok((S_ALPHA * object + (1.0 - S_ALPHA) * region).max(0.0))
}

/// Enhanced-alignment measure of the binarization `p ≥ threshold`.
pub fn e_measure(p: &[f64], g: &[f64], h: usize, w: usize, threshold: f64) -> Result<f64> {
    check(p, g, h, w)?;
    let n = h * w;
    let (mut tp, mut fp, mut gt_fg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        let (a, b) = (a >= threshold, fg(b));
        tp += usize::from(a && b);
        fp += usize::from(a && !b);
        gt_fg += usize::from(b);
    }
    let pred_fg = tp + fp;
    let pred_bg = n - pred_fg;
    let enhanced = if gt_fg == 0 {
        pred_bg as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let fn_ = gt_fg - tp;
        let tn = n - gt_fg - fp;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        [
            (tp, 1.0 - mp, 1.0 - mg),
            (fp, 1.0 - mp, -mg),
            (fn_, -mp, 1.0 - mg),
            (tn, -mp, -mg),
        ]
        .iter()
        .map(|&(count, a, b)| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            count as f64 * (align + 1.0).powi(2) / 4.0
        })
        .sum()
    };
    Ok(enhanced / n as f64)
}

/// Maximum [`e_measure`] over the thresholds `k/255`, `k = 0..=255`.
pub fn e_measure_max(p: &[f64], g: &[f64], h: usize, w: usize) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for k in 0..E_THRESHOLDS {
        best = best.max(e_measure(p, g, h, w, k as f64 / 255.0)?);
    }
    Ok(best)
}

/// All six measures for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub fbw: f64,
    pub sm: f64,
    pub em: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(p: &[f64], g: &[f64], h: usize, w: usize) -> Result<Self> {
        check(p, g, h, w)?;
        Ok(ImageMetrics {
            dice: dice(p, g)?,
            iou: iou(p, g)?,
            fbw: weighted_fmeasure(p, g, h, w)?,
            sm: s_measure(p, g, h, w)?,
            em: e_measure_max(p, g, h, w)?,
            mae: mae(p, g)?,
        })
    }

    fn mean(rows: &[&ImageMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        ImageMetrics {
            dice: avg(|r| r.dice),
            iou: avg(|r| r.iou),
            fbw: avg(|r| r.fbw),
            sm: avg(|r| r.sm),
            em: avg(|r| r.em),
            mae: avg(|r| r.mae),
        }
    }
}

/// One CSV/JSON row: `dataset,basename,dice,iou,fbw,sm,em,mae`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub basename: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub rows: Vec<ReportRow>,
    pub mean: ImageMetrics,
}

impl DatasetReport {
    pub fn new(dataset: impl Into<String>, rows: Vec<(String, ImageMetrics)>) -> Self {
        let dataset = dataset.into();
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .map(|(basename, metrics)| ReportRow {
                dataset: dataset.clone(),
                basename,
                metrics,
            })
            .collect();
        let mean = ImageMetrics::mean(&rows.iter().map(|r| &r.metrics).collect::<Vec<_>>());
        DatasetReport { dataset, rows, mean }
    }

    pub fn m_dice(&self) -> f64 {
        self.mean.dice
    }
}

/// Per-dataset metrics with per-image rows retained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetReport>,
}

impl MetricsReport {
    /// Flattened rows, each dataset followed by its `MEAN` row.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut out = Vec::new();
        for ds in &self.datasets {
            out.extend(ds.rows.iter().cloned());
            out.push(ReportRow {
                dataset: ds.dataset.clone(),
                basename: "MEAN".into(),
                metrics: ds.mean.clone(),
            });
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dataset", "basename", "dice", "iou", "fbw", "sm", "em", "mae"])?;
        for r in self.rows() {
            let m = &r.metrics;
            w.write_record([
                r.dataset.clone(),
                r.basename.clone(),
                format!("{:.6}", m.dice),
                format!("{:.6}", m.iou),
                format!("{:.6}", m.fbw),
                format!("{:.6}", m.sm),
                format!("{:.6}", m.em),
                format!("{:.6}", m.mae),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.rows())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Score every prediction image in `preds` against the same-stem ground
/// truth in `gts`. Predictions of a different size are bilinearly resized to
/// the ground-truth size.
pub fn evaluate_dataset(preds: &Path, gts: &Path, dataset: &str) -> Result<DatasetReport> {
    let p = list_by_stem(preds)?;
    let g = list_by_stem(gts)?;
    let mut orphans: Vec<String> = p
        .keys()
        .filter(|k| !g.contains_key(*k))
        .map(|k| format!("{}: {k}", preds.display()))
        .chain(g.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{}: {k}", gts.display())))
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::Orphans {
            dir: preds.to_path_buf(),
            orphans,
        });
    }
    let mut rows = Vec::with_capacity(g.len());
    for (stem, gt_path) in &g {
        let (gt, h, w) = image_io::load_gray(gt_path)?;
        let (pred, ph, pw) = image_io::load_gray(&p[stem])?;
        let pred = kernels::bilinear_resize(&pred, 1, (ph, pw), (h, w));
        let name = gt_path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        rows.push((name, ImageMetrics::compute(&pred, &gt, h, w)?));
    }
    Ok(DatasetReport::new(dataset, rows))
}
