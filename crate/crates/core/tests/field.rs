mod common;

use std::f64::consts::PI;

use common::naive::{self, A4};
use common::random_tensor;
use polypflow_core::attention::AttentionConfig;
use polypflow_core::autograd::{Graph, Mode};
use polypflow_core::config::TrainConfig;
use polypflow_core::field::{FieldConfig, VectorField, MASK};
use polypflow_core::gradcheck::{self, GradCheckOptions, Group};
use polypflow_core::model::PolypFlow;
use polypflow_core::params::ParamStore;
use polypflow_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 16;

fn config(use_attention: bool, use_dct: bool) -> FieldConfig {
    FieldConfig {
        widths: [4, 8, 16, 32],
        mask_size: (8, 8),
        attention: AttentionConfig {
            in_channels: 1,
            head_dim: 3,
            kernel: 7,
            stride: 8,
        },
        use_attention,
        use_dct,
    }
}

/// A field whose every parameter, including the zero-initialized mask,
/// DCT projection and biases, is drawn at random.
fn field(seed: u64) -> (VectorField, ParamStore) {
    let f = VectorField::new(config(true, true)).unwrap();
    let mut store = ParamStore::new();
    f.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    for (i, name) in store.param_names().into_iter().enumerate() {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let t = if name.contains(".bn") && name.ends_with("weight") {
            random_tensor(&shape, seed * 100 + i as u64, 0.5, 1.5)
        } else if name.contains(".bn") || name.ends_with("bias") || name == MASK || name.contains("dctproj") {
            random_tensor(&shape, seed * 100 + i as u64, -0.5, 0.5)
        } else {
            store.get(&name).unwrap().clone()
        };
        store.set(&name, t).unwrap();
    }
    (f, store)
}

fn inputs(seed: u64) -> (Tensor, Tensor) {
    (random_tensor(&[2, 1, N, N], seed, -2.0, 2.0), random_tensor(&[2, 3, N, N], seed + 1, 0.0, 1.0))
}

/// 8 → 16 bilinear upsampling with half-pixel centers: each output pixel is
/// a 3:1 blend of its parent and the nearer neighbour, clamped at edges.
fn upsample2(src: &[f64], n: usize) -> Vec<f64> {
    let taps = |i: usize| -> [(usize, f64); 2] {
        let k = i / 2;
        if i % 2 == 0 {
            [(k.saturating_sub(1), 0.25), (k, 0.75)]
        } else {
            [(k, 0.75), ((k + 1).min(n - 1), 0.25)]
        }
    };
    let mut out = vec![0.0; 4 * n * n];
    for y in 0..2 * n {
        for x in 0..2 * n {
            for (sy, wy) in taps(y) {
                for (sx, wx) in taps(x) {
                    out[y * 2 * n + x] += wy * wx * src[sy * n + sx];
                }
            }
        }
    }
    out
}

fn dct_plane(x: &[f64], n: usize) -> Vec<f64> {
    let a = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += x[i * n + j]
                        * (PI * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos()
                        * (PI * (2 * j + 1) as f64 * v as f64 / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = a(u) * a(v) * s;
        }
    }
    out
}

struct Parts {
    trunk: A4,
    freq: A4,
    gate: A4,
}

fn oracle(store: &ParamStore, z: &Tensor, x: &Tensor, t: f64) -> Parts {
    let b = 2;
    let mask = upsample2(store.get(MASK).unwrap().data(), 8);
    let (za, xa) = (A4::from(z), A4::from(x));
    let mut input = A4::zeros(b, 6, N, N);
    for bi in 0..b {
        for y in 0..N {
            for xx in 0..N {
                input.set(bi, 0, y, xx, za.at(bi, 0, y, xx));
                for c in 0..3 {
                    input.set(bi, 1 + c, y, xx, xa.at(bi, c, y, xx));
                }
                input.set(bi, 4, y, xx, mask[y * N + xx]);
                input.set(bi, 5, y, xx, t);
            }
        }
    }
    let (_, _, trunk) = naive::unet(store, "field.trunk", &input, true);

    let w = store.get("field.dctproj.weight").unwrap();
    let pb = store.get("field.dctproj.bias").unwrap().data()[0];
    let mut freq = A4::zeros(b, 1, N, N);
    for bi in 0..b {
        let coeffs: Vec<Vec<f64>> =
            (0..3).map(|c| dct_plane(&x.data()[(bi * 3 + c) * N * N..(bi * 3 + c + 1) * N * N], N)).collect();
        for i in 0..N * N {
            let v = pb + (0..3).map(|c| w.data()[c] * coeffs[c][i]).sum::<f64>();
            freq.set(bi, 0, i / N, i % N, v);
        }
    }

    let conv = |name: &str| {
        let w = store.get(&format!("field.attn.{name}.weight")).unwrap();
        let bias = store.get(&format!("field.attn.{name}.bias")).unwrap();
        naive::conv2d(&trunk, w, bias.data(), 8, 3)
    };
    let (q, k, v) = (conv("q"), conv("k"), conv("v"));
    let (d, tokens) = (3, 4);
    let pw = store.get("field.attn.proj.weight").unwrap().data().to_vec();
    let pbias = store.get("field.attn.proj.bias").unwrap().data()[0];
    let mut gate = A4::zeros(b, 1, N, N);
    for bi in 0..b {
        let tok = |m: &A4, i: usize, c: usize| m.at(bi, c, i / 2, i % 2);
        for i in 0..tokens {
            let scores: Vec<f64> = (0..tokens)
                .map(|j| (0..d).map(|c| tok(&q, i, c) * tok(&k, j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let zsum: f64 = e.iter().sum();
            let att: Vec<f64> = (0..d).map(|c| (0..tokens).map(|j| e[j] / zsum * tok(&v, j, c)).sum()).collect();
            let a = naive::sigmoid(pbias + (0..d).map(|c| pw[c] * att[c]).sum::<f64>());
            for y in 0..8 {
                for xx in 0..8 {
                    gate.set(bi, 0, (i / 2) * 8 + y, (i % 2) * 8 + xx, a);
                }
            }
        }
    }
    Parts { trunk, freq, gate }
}

fn velocity(f: &VectorField, store: &ParamStore, z: &Tensor, x: &Tensor, t: f64) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
    let v = f.velocity(&mut g, store, zv, xv, t).unwrap();
    g.value(v).clone()
}

#[test]
fn velocity_matches_composition_oracle_for_every_toggle() {
    let (f, store) = field(1);
    let (z, x) = inputs(2);
    let parts = oracle(&store, &z, &x, 0.35);
    assert!(parts.gate.v.iter().any(|&a| (a - parts.gate.v[0]).abs() > 1e-6), "gate varies across tokens");
    for (att, dct) in [(true, true), (true, false), (false, true), (false, false)] {
        let got = velocity(&f.toggle_components(att, dct), &store, &z, &x, 0.35);
        for i in 0..got.len() {
            let s = parts.trunk.v[i] + if dct { parts.freq.v[i] } else { 0.0 };
            let want = if att { parts.gate.v[i] * s } else { s };
            assert!((got.data()[i] - want).abs() < 1e-10, "att={att} dct={dct} at {i}");
        }
    }
}

#[test]
fn zero_trunk_head_and_projection_annihilate() {
    let (f, mut store) = field(3);
    store.zero_prefix("field.trunk.head");
    store.zero_prefix("field.dctproj");
    let (z, x) = inputs(4);
    assert!(velocity(&f, &store, &z, &x, 0.7).data().iter().all(|&v| v == 0.0));
}

#[test]
fn disabled_gate_is_bitwise_the_ungated_sum() {
    let (f, store) = field(5);
    let (z, x) = inputs(6);
    let ungated = velocity(&f.toggle_components(false, true), &store, &z, &x, 0.1);
    let mut g = Graph::new(Mode::Eval);
    let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
    let u = f.trunk_output(&mut g, &store, zv, xv, 0.1).unwrap();
    let p = polypflow_core::dct::dct_feature(&mut g, &store, "field.dctproj", xv).unwrap();
    let s = g.add(u, p).unwrap();
    assert_eq!(&ungated, g.value(s));
}

#[test]
fn learnable_mask_influences_the_velocity() {
    let (f, store) = field(7);
    let (z, x) = inputs(8);
    let mut g = Graph::new(Mode::Train);
    let (zv, xv) = (g.constant(z), g.constant(x));
    let v = f.velocity(&mut g, &store, zv, xv, 0.4).unwrap();
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let dm = &grads.params()[MASK];
    assert!(dm.max_abs() > 0.0);
}

#[test]
fn field_gradients_match_finite_differences() {
    let report = gradcheck::grad_check(&[Group::Field], Some(1e-3), &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let report = gradcheck::grad_check(&[Group::EndToEnd, Group::Frozen], Some(1e-3), &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
}

fn tiny_model(seed: u64) -> PolypFlow {
    let mut cfg = TrainConfig::tiny(32);
    cfg.seed = seed;
    PolypFlow::new(cfg).unwrap()
}

#[test]
fn initial_state_is_the_eval_backbone() {
    let model = tiny_model(9);
    let x = random_tensor(&[2, 3, 32, 32], 10, 0.0, 1.0);
    let s0 = model.initial_state(&x).unwrap();
    assert_eq!(s0.t, 0.0);
    let (_, _, logits) = naive::unet(&model.params, "backbone", &A4::from(&x), true);
    assert!(s0.z.data().iter().zip(&logits.v).all(|(a, b)| (a - b).abs() < 1e-10));

    let mut zeroed = model.clone();
    zeroed.params.zero_prefix("backbone.head");
    assert_eq!(zeroed.initial_state(&x).unwrap().z.max_abs(), 0.0);
}

#[test]
fn zero_model_predicts_background() {
    let mut model = tiny_model(11);
    model.params.zero_prefix("");
    let x = random_tensor(&[1, 3, 32, 32], 12, 0.0, 1.0);
    let p = model.predict(&x, 5).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
    let traj = model.trajectory(&x, 5).unwrap();
    let mask = polypflow_core::model::binary_mask(&traj, (32, 32)).unwrap();
    assert!(mask.iter().all(|&v| v == 0.0), "p = 0.5 is not foreground");
}

#[test]
fn prediction_is_deterministic_and_batch_independent() {
    let model = tiny_model(13);
    let a = random_tensor(&[1, 3, 32, 32], 14, 0.0, 1.0);
    let b = random_tensor(&[1, 3, 32, 32], 15, 0.0, 1.0);
    let pa = model.predict(&a, 4).unwrap();
    assert_eq!(pa, model.predict(&a, 4).unwrap());
    let both = Tensor::stack(&[&a, &b]).unwrap();
    let pboth = model.predict(&both, 4).unwrap();
    assert!(pboth.batch_item(0).unwrap().max_abs_diff(&pa) < 1e-12, "eval BN uses running stats");
}

#[test]
fn trajectory_length_and_file_export() {
    let model = tiny_model(16);
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    let pixels: Vec<u8> = (0..48 * 40 * 3).map(|i| (i * 37 % 251) as u8).collect();
    image::RgbImage::from_raw(48, 40, pixels).unwrap().save(&img).unwrap();
    let out = model.infer_file(&img, 10, &dir.path().join("out")).unwrap();
    assert_eq!(out.trajectory.states.len(), 11);
    assert_eq!(out.index.len(), 11);
    let pngs = std::fs::read_dir(&out.trajectory_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 11);
    let mask = image::open(&out.mask_path).unwrap();
    assert_eq!((mask.width(), mask.height()), (48, 40), "mask at the original resolution");
}

#[test]
fn missing_image_is_an_error_naming_the_path() {
    let model = tiny_model(17);
    let err = model.infer_file(std::path::Path::new("/nonexistent/x.png"), 3, std::env::temp_dir().as_path());
    assert!(err.unwrap_err().to_string().contains("/nonexistent/x.png"));
}
