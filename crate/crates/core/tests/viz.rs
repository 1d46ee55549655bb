use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use polypflow_core::ode::{euler_integrate, Trajectory};
use polypflow_core::viz::{
    count_panels, emit_comparison, emit_step_grid, FALSE_NEGATIVE, FALSE_POSITIVE, GUTTER, SEPARATOR, TRUE_POSITIVE,
};
use polypflow_core::Tensor;

fn constant_field_trajectory(n: usize, size: usize) -> Trajectory {
    euler_integrate(|_, z| Ok(Tensor::full(z.shape(), 4.0)), &Tensor::full(&[1, 1, size, size], -2.0), n).unwrap()
}

#[test]
fn ten_steps_give_eleven_panels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("steps.png");
    let layout = emit_step_grid(&constant_field_trajectory(10, 32), &out).unwrap();
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!(layout.panels, 11);
    assert_eq!(count_panels(&img), 11);
    assert_eq!(img.width(), 11 * layout.panel_width + 10 * GUTTER);
    assert_eq!(img.height(), layout.panel_height);
}

#[test]
fn constant_field_panels_brighten_monotonically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ramp.png");
    let layout = emit_step_grid(&constant_field_trajectory(5, 16), &out).unwrap();
    let img = image::open(&out).unwrap().to_rgb8();
    let mut previous = 0u8;
    for i in 0..6u32 {
        let x0 = i * (layout.panel_width + GUTTER) + (layout.panel_width - 16) / 2;
        let v = img.get_pixel(x0 + 8, 8)[0];
        // z_n = −2 + 4n/5, rendered as round(255·sigmoid(z_n)).
        let z = -2.0 + 4.0 * i as f64 / 5.0;
        let want = (255.0 / (1.0 + (-z).exp())).round() as u8;
        assert_eq!(v, want, "panel {i}");
        assert!(i == 0 || v > previous);
        previous = v;
        let panel: Vec<u8> = (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).map(|(x, y)| img.get_pixel(x0 + x, y)[0]).collect();
        assert!(panel.iter().all(|&p| p == v), "panel {i} is uniform");
    }
}

#[test]
fn initial_state_alone_cannot_be_drawn() {
    let traj = Trajectory {
        states: constant_field_trajectory(1, 8).states[..1].to_vec(),
        velocities: vec![],
    };
    let err = emit_step_grid(&traj, Path::new("never.png")).unwrap_err();
    assert!(err.to_string().contains("n_steps ≥ 1"), "{err}");
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    image: PathBuf,
    gt: PathBuf,
}

/// 12×10 input with a GT square at columns 2..6, rows 3..7.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let image = root.join("img.png");
    RgbImage::from_fn(12, 10, |x, y| Rgb([(x * 20) as u8, (y * 20) as u8, 90])).save(&image).unwrap();
    let gt = root.join("gt.png");
    square(2..6, 3..7).save(&gt).unwrap();
    Fixture { _dir: dir, root, image, gt }
}

fn square(xs: std::ops::Range<u32>, ys: std::ops::Range<u32>) -> GrayImage {
    GrayImage::from_fn(12, 10, |x, y| Luma([if xs.contains(&x) && ys.contains(&y) { 255 } else { 0 }]))
}

fn save_mask(f: &Fixture, name: &str, mask: GrayImage) -> (String, PathBuf) {
    let path = f.root.join(format!("{name}.png"));
    mask.save(&path).unwrap();
    (name.to_string(), path)
}

#[test]
fn identical_to_gt_row_overlaps_perfectly() {
    let f = fixture();
    let rows = vec![save_mask(&f, "perfect", square(2..6, 3..7))];
    let out = f.root.join("cmp.png");
    let layout = emit_comparison(&rows, &f.gt, &f.image, &out).unwrap();
    let o = &layout.overlays[0];
    assert_eq!((o.true_positive, o.false_positive, o.false_negative), (16, 0, 0));
    let img = image::open(&out).unwrap().to_rgb8();
    let ox = 2 * (12 + GUTTER);
    assert_eq!(*img.get_pixel(ox + 3, 4), TRUE_POSITIVE);
    assert_eq!(*img.get_pixel(ox, 0), Rgb([0, 0, 90]), "background shows the input");
}

#[test]
fn three_methods_give_three_rows_with_colored_errors() {
    let f = fixture();
    let rows = vec![
        save_mask(&f, "a", square(2..6, 3..7)),
        save_mask(&f, "b", square(4..8, 3..7)),
        save_mask(&f, "c", square(0..0, 0..0)),
    ];
    let out = f.root.join("cmp3.png");
    let layout = emit_comparison(&rows, &f.gt, &f.image, &out).unwrap();
    assert_eq!((layout.rows, layout.columns), (3, 3));
    let counts: Vec<(usize, usize, usize)> =
        layout.overlays.iter().map(|o| (o.true_positive, o.false_positive, o.false_negative)).collect();
    assert_eq!(counts, [(16, 0, 0), (8, 8, 8), (0, 0, 16)]);

    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!((img.width(), img.height()), (3 * 12 + 2 * GUTTER, 3 * 10 + 2 * GUTTER));
    let (ox, row_b, row_c) = (2 * (12 + GUTTER), 10 + GUTTER, 2 * (10 + GUTTER));
    assert_eq!(*img.get_pixel(ox + 2, row_b + 3), FALSE_NEGATIVE);
    assert_eq!(*img.get_pixel(ox + 7, row_b + 3), FALSE_POSITIVE);
    assert_eq!(*img.get_pixel(ox + 5, row_b + 3), TRUE_POSITIVE);
    assert_eq!(*img.get_pixel(ox + 2, row_c + 3), FALSE_NEGATIVE);
    assert_eq!(*img.get_pixel(0, 10), SEPARATOR);
}

#[test]
fn no_methods_gives_input_and_gt_only() {
    let f = fixture();
    let out = f.root.join("bare.png");
    let layout = emit_comparison(&[], &f.gt, &f.image, &out).unwrap();
    assert_eq!((layout.rows, layout.columns), (1, 2));
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!((img.width(), img.height()), (2 * 12 + GUTTER, 10));
    assert_eq!(count_panels(&img), 2);
}

#[test]
fn mismatched_mask_size_is_an_error() {
    let f = fixture();
    let bad = f.root.join("small.png");
    GrayImage::new(6, 5).save(&bad).unwrap();
    let err = emit_comparison(&[("small".into(), bad)], &f.gt, &f.image, &f.root.join("x.png")).unwrap_err();
    assert!(err.to_string().contains("6x5") || err.to_string().contains("5x6"), "{err}");
    assert!(!f.root.join("x.png").exists());
}
