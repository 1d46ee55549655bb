//! Static figures: per-step trajectory grids and method comparison panels.
//!
//! Panels are separated by [`SEPARATOR`]-colored gutters so a figure's
//! layout can be recovered from its pixels alone.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::image_io::{self, to_u8};
use crate::kernels::sigmoid;
use crate::ode::Trajectory;

pub const SEPARATOR: Rgb<u8> = Rgb([255, 0, 255]);
pub const GUTTER: u32 = 2;

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([0, 255, 0]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 255]);

// 3×5 glyphs, one 3-bit row per nibble from the top.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        't' => [0b010, 0b111, 0b010, 0b010, 0b011],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; 5],
    }
}

fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 4).saturating_sub(1) * scale
}

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, scale: u32, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let gx = x0 + i as u32 * 4 * scale;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3u32 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (x, y) = (gx + col * scale + dx, y0 + row as u32 * scale + dy);
                            if x < img.width() && y < img.height() {
                                img.put_pixel(x, y, color);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.put_pixel(x, y, color);
        }
    }
}

fn caption(n: usize, t: f64) -> String {
    format!("n={n} t={t:.2}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GridLayout {
    pub panels: usize,
    pub panel_width: u32,
    pub panel_height: u32,
    pub caption_height: u32,
}

/// One horizontal strip with a panel per state: `sigmoid(z)` of the first
/// batch item in grayscale, captioned `n=<step> t=<time>` underneath.
pub fn emit_step_grid(traj: &Trajectory, out: &Path) -> Result<GridLayout> {
    if traj.states.len() < 2 {
        return Err(Error::Invalid("n_steps ≥ 1 required: a grid needs at least two states".into()));
    }
    let (_, _, h, w) = traj.states[0].z.dims4()?;
    let scale = (w as u32 / 64).max(1);
    let captions: Vec<String> = traj.states.iter().enumerate().map(|(n, s)| caption(n, s.t)).collect();
    let text_w = captions.iter().map(|c| text_width(c, scale)).max().unwrap_or(0);
    let panel_w = (w as u32).max(text_w + 2 * scale);
    let caption_h = 7 * scale;
    let panel_h = h as u32 + caption_h;
    let n = traj.states.len() as u32;
    let mut img = RgbImage::new(n * panel_w + (n - 1) * GUTTER, panel_h);
    for (i, (state, text)) in traj.states.iter().zip(&captions).enumerate() {
        let x0 = i as u32 * (panel_w + GUTTER);
        if i > 0 {
            fill(&mut img, x0 - GUTTER, 0, GUTTER, panel_h, SEPARATOR);
        }
        let ox = x0 + (panel_w - w as u32) / 2;
        for y in 0..h {
            for x in 0..w {
                let v = to_u8(sigmoid(state.z.data()[y * w + x]));
                img.put_pixel(ox + x as u32, y as u32, Rgb([v, v, v]));
            }
        }
        draw_text(&mut img, text, x0 + scale, h as u32 + scale, scale, Rgb([255, 255, 255]));
    }
    save(&img, out)?;
    Ok(GridLayout {
        panels: traj.states.len(),
        panel_width: panel_w,
        panel_height: panel_h,
        caption_height: caption_h,
    })
}

fn save(img: &RgbImage, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OverlayCounts {
    pub name: String,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComparisonLayout {
    /// Figure rows; a figure without methods still has the input/GT row.
    pub rows: usize,
    pub columns: usize,
    pub overlays: Vec<OverlayCounts>,
}

fn load_mask(path: &Path, threshold: impl Fn(f64) -> bool) -> Result<(Vec<bool>, usize, usize)> {
    let (m, h, w) = image_io::load_gray(path)?;
    Ok((m.into_iter().map(threshold).collect(), h, w))
}

/// One row per method: `input | GT | overlay`, where the overlay paints
/// true positives green, false positives red and false negatives blue over
/// the input. Predictions count as foreground above 0.5, GT at 0.5 or more.
pub fn emit_comparison(rows: &[(String, PathBuf)], gt: &Path, image: &Path, out: &Path) -> Result<ComparisonLayout> {
    let (img, ih, iw) = image_io::load_rgb(image)?;
    let (gt_mask, h, w) = load_mask(gt, |v| v >= 0.5)?;
    if (ih, iw) != (h, w) {
        return Err(shape_err!("image {} is {ih}x{iw} but GT is {h}x{w}", image.display()));
    }
    let mut preds = Vec::with_capacity(rows.len());
    for (name, path) in rows {
        let (p, ph, pw) = load_mask(path, |v| v > 0.5)?;
        if (ph, pw) != (h, w) {
            return Err(shape_err!("mask for {name} ({}) is {ph}x{pw} but GT is {h}x{w}", path.display()));
        }
        preds.push(p);
    }
    let columns = if rows.is_empty() { 2 } else { 3 };
    let n_rows = rows.len().max(1) as u32;
    let (w32, h32) = (w as u32, h as u32);
    let mut fig = RgbImage::new(columns as u32 * w32 + (columns as u32 - 1) * GUTTER, n_rows * h32 + (n_rows - 1) * GUTTER);
    let input_px = |i: usize| Rgb([to_u8(img[i]), to_u8(img[h * w + i]), to_u8(img[2 * h * w + i])]);
    let mut overlays = Vec::with_capacity(rows.len());
    for r in 0..n_rows {
        let y0 = r * (h32 + GUTTER);
        if r > 0 {
            let fw = fig.width();
            fill(&mut fig, 0, y0 - GUTTER, fw, GUTTER, SEPARATOR);
        }
        for c in 1..columns as u32 {
            fill(&mut fig, c * (w32 + GUTTER) - GUTTER, y0, GUTTER, h32, SEPARATOR);
        }
        let mut counts = rows.get(r as usize).map(|(name, _)| OverlayCounts {
            name: name.clone(),
            true_positive: 0,
            false_positive: 0,
            false_negative: 0,
        });
        for i in 0..h * w {
            let (x, y) = ((i % w) as u32, y0 + (i / w) as u32);
            fig.put_pixel(x, y, input_px(i));
            let g = if gt_mask[i] { 255 } else { 0 };
            fig.put_pixel(w32 + GUTTER + x, y, Rgb([g, g, g]));
            if let Some(counts) = counts.as_mut() {
                let p = preds[r as usize][i];
                let color = match (p, gt_mask[i]) {
                    (true, true) => {
                        counts.true_positive += 1;
                        TRUE_POSITIVE
                    }
                    (true, false) => {
                        counts.false_positive += 1;
                        FALSE_POSITIVE
                    }
                    (false, true) => {
                        counts.false_negative += 1;
                        FALSE_NEGATIVE
                    }
                    (false, false) => input_px(i),
                };
                fig.put_pixel(2 * (w32 + GUTTER) + x, y, color);
            }
        }
        overlays.extend(counts);
    }
    save(&fig, out)?;
    Ok(ComparisonLayout {
        rows: n_rows as usize,
        columns,
        overlays,
    })
}

/// Count panels of a horizontal strip by scanning its top row for
/// [`SEPARATOR`] gutters.
pub fn count_panels(img: &RgbImage) -> usize {
    let mut panels = 0;
    let mut inside = false;
    for x in 0..img.width() {
        let sep = *img.get_pixel(x, 0) == SEPARATOR;
        if !sep && !inside {
            panels += 1;
        }
        inside = !sep;
    }
    panels
}
