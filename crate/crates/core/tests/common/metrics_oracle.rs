//! Definition-level oracles for the six segmentation measures, written
//! from the published formulations independently of the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: usize = 16;
pub const W: usize = 16;

pub const EPS: f64 = f64::EPSILON;

fn binary(g: &[f64]) -> Vec<bool> {
    g.iter().map(|&v| v >= 0.5).collect()
}

pub fn dice(p: &[f64], g: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let a = if p[i] > 0.5 { 1.0 } else { 0.0 };
        let b = if g[i] >= 0.5 { 1.0 } else { 0.0 };
        inter += a * b;
        sp += a;
        sg += b;
    }
    if sp + sg == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + sg)
    }
}

pub fn iou(p: &[f64], g: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..p.len() {
        let (a, b) = (p[i] > 0.5, g[i] >= 0.5);
        if a && b {
            inter += 1.0;
        }
        if a || b {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub fn mae(p: &[f64], g: &[f64]) -> f64 {
    let gb = binary(g);
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - if gb[i] { 1.0 } else { 0.0 }).abs();
    }
    s / p.len() as f64
}

/// Weighted F-measure: dependency via nearest-foreground error
/// propagation, a 7×7 σ=5 Gaussian (zero padding), and the
/// distance-based importance `2 − exp(ln(0.5)/5 · d)` on background.
pub fn wfm(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let gt = binary(g);
    if !gt.iter().any(|&b| b) {
        return if p.iter().any(|&v| v > 0.5) { 0.0 } else { 1.0 };
    }
    // Brute-force nearest foreground, ties to the smallest (row, col).
    let mut dst = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = (usize::MAX, 0, 0);
            for r2 in 0..h {
                for c2 in 0..w {
                    if gt[r2 * w + c2] {
                        let d2 = (r as isize - r2 as isize).pow(2) as usize + (c as isize - c2 as isize).pow(2) as usize;
                        if (d2, r2, c2) < best {
                            best = (d2, r2, c2);
                        }
                    }
                }
            }
            dst[r * w + c] = (best.0 as f64).sqrt();
            idx[r * w + c] = best.1 * w + best.2;
        }
    }
    let e: Vec<f64> = (0..h * w).map(|i| (p[i] - if gt[i] { 1.0 } else { 0.0 }).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| e[idx[i]]).collect();
    let mut k = [[0.0f64; 7]; 7];
    let mut ks = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            ks += *v;
        }
    }
    let mut ea = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for dy in -3..=3isize {
                for dx in -3..=3isize {
                    let (y, x) = (r + dy, c + dx);
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        acc += k[(dy + 3) as usize][(dx + 3) as usize] / ks * et[y as usize * w + x as usize];
                    }
                }
            }
            ea[r as usize * w + c as usize] = acc;
        }
    }
    let mut min_e_ea = e.clone();
    for i in 0..h * w {
        if gt[i] && ea[i] < e[i] {
            min_e_ea[i] = ea[i];
        }
    }
    let b: Vec<f64> = (0..h * w)
        .map(|i| if gt[i] { 1.0 } else { 2.0 - ((0.5f64).ln() / 5.0 * dst[i]).exp() })
        .collect();
    let ew: Vec<f64> = (0..h * w).map(|i| min_e_ea[i] * b[i]).collect();
    let n_fg = gt.iter().filter(|&&x| x).count() as f64;
    let ew_fg: f64 = (0..h * w).filter(|&i| gt[i]).map(|i| ew[i]).sum();
    let ew_bg: f64 = (0..h * w).filter(|&i| !gt[i]).map(|i| ew[i]).sum();
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (EPS + tpw + ew_bg);
    2.0 * r * pr / (EPS + r + pr)
}

fn s_object(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let x = vals.iter().sum::<f64>() / n;
    let sd = if vals.len() > 1 {
        (vals.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sd + EPS)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|b| (b - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let gt: Vec<f64> = g.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let y = gt.iter().sum::<f64>() / (h * w) as f64;
    if y == 0.0 {
        return 1.0 - p.iter().sum::<f64>() / (h * w) as f64;
    }
    if y == 1.0 {
        return p.iter().sum::<f64>() / (h * w) as f64;
    }
    let fg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 1.0).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 0.0).map(|i| 1.0 - p[i]).collect();
    let object = y * s_object(&fg) + (1.0 - y) * s_object(&bg);

    // 1-based centroid: rounded mean of foreground coordinates, plus one.
    let pts: Vec<(usize, usize)> = (0..h * w).filter(|&i| gt[i] == 1.0).map(|i| (i / w, i % w)).collect();
    let my = pts.iter().map(|p| p.0 as f64).sum::<f64>() / pts.len() as f64;
    let mx = pts.iter().map(|p| p.1 as f64).sum::<f64>() / pts.len() as f64;
    let cy = my.round_ties_even() as usize + 1;
    let cx = mx.round_ties_even() as usize + 1;
    let area = (h * w) as f64;
    let block = |rs: std::ops::Range<usize>, cs: std::ops::Range<usize>| {
        let mut bp = vec![];
        let mut bg = vec![];
        for r in rs {
            for c in cs.clone() {
                bp.push(p[r * w + c]);
                bg.push(gt[r * w + c]);
            }
        }
        (bp, bg)
    };
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let mut region = 0.0;
    for (wt, (bp, bg)) in [
        (w1, block(0..cy, 0..cx)),
        (w2, block(0..cy, cx..w)),
        (w3, block(cy..h, 0..cx)),
        (w4, block(cy..h, cx..w)),
    ] {
        if !bp.is_empty() {
            region += wt * ssim(&bp, &bg);
        }
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Per-pixel enhanced-alignment matrix, averaged over all pixels.
pub fn e_measure(p: &[f64], g: &[f64], h: usize, w: usize, th: f64) -> f64 {
    let n = h * w;
    let fm: Vec<f64> = p.iter().map(|&v| if v >= th { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = g.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let sg: f64 = gt.iter().sum();
    let enhanced: Vec<f64> = if sg == 0.0 {
        fm.iter().map(|f| 1.0 - f).collect()
    } else if sg == n as f64 {
        fm.clone()
    } else {
        let mf = fm.iter().sum::<f64>() / n as f64;
        let mg = sg / n as f64;
        (0..n)
            .map(|i| {
                let (a, b) = (fm[i] - mf, gt[i] - mg);
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n as f64
}

pub fn e_max(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    (0..=255).map(|k| e_measure(p, g, h, w, k as f64 / 255.0)).fold(f64::MIN, f64::max)
}

/// Random soft prediction and binary GT. Shapes alternate between a blob,
/// pixel noise and a few degenerate masks.
pub fn random_case(rng: &mut ChaCha8Rng, i: usize) -> (Vec<f64>, Vec<f64>) {
    let g: Vec<f64> = match i % 10 {
        0 => vec![0.0; H * W],
        1 => vec![1.0; H * W],
        2..=4 => (0..H * W).map(|_| f64::from(rng.random_bool(0.3))).collect(),
        _ => {
            let (cy, cx) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
            let (ry, rx) = (rng.random_range(1.5..6.0), rng.random_range(1.5..6.0));
            (0..H * W)
                .map(|k| {
                    let (y, x) = ((k / W) as f64, (k % W) as f64);
                    f64::from(((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0)
                })
                .collect()
        }
    };
    let p: Vec<f64> = match i % 7 {
        // Quantized to 8-bit levels, as predictions read from PNGs are.
        0 => (0..H * W).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect(),
        1 => g.iter().map(|&v| (0.7 * v + 0.3 * rng.random::<f64>()).clamp(0.0, 1.0)).collect(),
        2 => vec![0.0; H * W],
        _ => (0..H * W).map(|_| rng.random::<f64>()).collect(),
    };
    (p, g)
}
