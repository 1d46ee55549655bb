//! Thin wrappers over the `image` crate using planar `f64` buffers in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Planar RGB (`3×H×W`) scaled to `[0, 1]`, plus `(h, w)`.
pub fn load_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Single-channel image scaled to `[0, 1]`, plus `(h, w)`.
pub fn load_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| f64::from(p[0]) / 255.0).collect(), h, w))
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray(path: &Path, plane: &[f64], w: usize, h: usize) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(plane[y as usize * w + x as usize])])
    });
    img.save(path)?;
    Ok(())
}

/// Save planar RGB data (`3×H×W`).
pub fn save_rgb(path: &Path, planar: &[f64], w: usize, h: usize) -> Result<()> {
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([
            to_u8(planar[i]),
            to_u8(planar[h * w + i]),
            to_u8(planar[2 * h * w + i]),
        ])
    });
    img.save(path)?;
    Ok(())
}
