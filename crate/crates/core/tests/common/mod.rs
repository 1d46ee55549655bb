#![allow(dead_code)]

use polypflow_core::data::Sample;
use polypflow_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic "polyp" frames: a reddish disk (or ellipse) on a textured
/// pinkish background, with the disk as ground truth.
pub fn disk_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = size as f64;
            let cx = rng.random_range(0.3 * s..0.7 * s);
            let cy = rng.random_range(0.3 * s..0.7 * s);
            let rx = rng.random_range(0.15 * s..0.3 * s);
            let ry = rng.random_range(0.15 * s..0.3 * s);
            let mut image = vec![0.0; 3 * size * size];
            let mut mask = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                    let inside = d <= 1.0;
                    mask[y * size + x] = f64::from(u8::from(inside));
                    let base = if inside { [0.75, 0.35, 0.3] } else { [0.55, 0.45, 0.45] };
                    for (c, b) in base.iter().enumerate() {
                        let noise: f64 = rng.random_range(-0.05..0.05);
                        image[(c * size + y) * size + x] = (b + noise).clamp(0.0, 1.0);
                    }
                }
            }
            Sample {
                name: format!("disk_{i:02}"),
                image: Tensor::from_vec(&[3, size, size], image).unwrap(),
                mask: Tensor::from_vec(&[1, size, size], mask).unwrap(),
            }
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Straight-loop reference implementations of the network primitives over
/// `B×C×H×W` arrays.
pub mod metrics_oracle;

pub mod naive {
    use polypflow_core::Tensor;

    #[derive(Clone, Debug)]
    pub struct A4 {
        pub b: usize,
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub v: Vec<f64>,
    }

    impl A4 {
        pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
            A4 { b, c, h, w, v: vec![0.0; b * c * h * w] }
        }
        pub fn from(t: &Tensor) -> Self {
            let (b, c, h, w) = t.dims4().unwrap();
            A4 { b, c, h, w, v: t.data().to_vec() }
        }
        pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
            self.v[((b * self.c + c) * self.h + y) * self.w + x]
        }
        pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, val: f64) {
            let i = ((b * self.c + c) * self.h + y) * self.w + x;
            self.v[i] = val;
        }
        pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
            A4 { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
        }
    }

    /// Cross-correlation with zero padding; weight `cout×cin×k×k`.
    pub fn conv2d(x: &A4, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> A4 {
        let (cout, cin, kh, kw) = w.dims4().unwrap();
        assert_eq!(cin, x.c);
        let oh = (x.h + 2 * pad - kh) / stride + 1;
        let ow = (x.w + 2 * pad - kw) / stride + 1;
        let mut out = A4::zeros(x.b, cout, oh, ow);
        for b in 0..x.b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < x.h && (xx as usize) < x.w {
                                        acc += w.at4(co, ci, ky, kx) * x.at(b, ci, y as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    /// Stride-2 2×2 transposed convolution; weight `cin×cout×2×2`.
    pub fn upconv2(x: &A4, w: &Tensor, bias: &[f64]) -> A4 {
        let (cin, cout, _, _) = w.dims4().unwrap();
        let mut out = A4::zeros(x.b, cout, 2 * x.h, 2 * x.w);
        for b in 0..x.b {
            for co in 0..cout {
                for y in 0..2 * x.h {
                    for xx in 0..2 * x.w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            acc += x.at(b, ci, y / 2, xx / 2) * w.at4(ci, co, y % 2, xx % 2);
                        }
                        out.set(b, co, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    pub fn maxpool2(x: &A4) -> A4 {
        let mut out = A4::zeros(x.b, x.c, x.h / 2, x.w / 2);
        for b in 0..x.b {
            for c in 0..x.c {
                for y in 0..x.h / 2 {
                    for xx in 0..x.w / 2 {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|&(dy, dx)| x.at(b, c, 2 * y + dy, 2 * xx + dx))
                            .fold(f64::NEG_INFINITY, f64::max);
                        out.set(b, c, y, xx, m);
                    }
                }
            }
        }
        out
    }

    /// Batch normalization with either batch statistics (biased variance)
    /// or the given running statistics.
    pub fn batch_norm(x: &A4, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> A4 {
        let mut out = x.clone();
        let n = (x.b * x.h * x.w) as f64;
        for c in 0..x.c {
            let (mean, var) = match stats {
                Some((m, v)) => (m[c], v[c]),
                None => {
                    let mut s = 0.0;
                    for b in 0..x.b {
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                s += x.at(b, c, y, xx);
                            }
                        }
                    }
                    let m = s / n;
                    let mut ss = 0.0;
                    for b in 0..x.b {
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                ss += (x.at(b, c, y, xx) - m).powi(2);
                            }
                        }
                    }
                    (m, ss / n)
                }
            };
            for b in 0..x.b {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = (x.at(b, c, y, xx) - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
                        out.set(b, c, y, xx, v);
                    }
                }
            }
        }
        out
    }

    pub fn relu(x: &A4) -> A4 {
        x.map(|v| v.max(0.0))
    }

    pub fn concat(a: &A4, b: &A4) -> A4 {
        let mut out = A4::zeros(a.b, a.c + b.c, a.h, a.w);
        for bi in 0..a.b {
            for y in 0..a.h {
                for x in 0..a.w {
                    for c in 0..a.c {
                        out.set(bi, c, y, x, a.at(bi, c, y, x));
                    }
                    for c in 0..b.c {
                        out.set(bi, a.c + c, y, x, b.at(bi, c, y, x));
                    }
                }
            }
        }
        out
    }

    pub fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// U-Net forward pass with parameters named as in the checkpoint.
    pub fn unet(store: &polypflow_core::params::ParamStore, prefix: &str, x: &A4, eval: bool) -> (Vec<A4>, Vec<A4>, A4) {
        let p = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap_or_else(|| panic!("{prefix}.{n}")).clone();
        let cbr = |x: &A4, conv: &str, bn: &str| {
            let y = conv2d(x, &p(&format!("{conv}.weight")), p(&format!("{conv}.bias")).data(), 1, 1);
            let stats = eval.then(|| {
                (
                    store.buffer(&format!("{prefix}.{bn}.running_mean")).unwrap().data().to_vec(),
                    store.buffer(&format!("{prefix}.{bn}.running_var")).unwrap().data().to_vec(),
                )
            });
            let y = batch_norm(
                &y,
                p(&format!("{bn}.weight")).data(),
                p(&format!("{bn}.bias")).data(),
                stats.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice())),
            );
            relu(&y)
        };
        let e1 = cbr(x, "enc1.conv", "enc1.bn");
        let e2 = cbr(&maxpool2(&e1), "enc2.conv", "enc2.bn");
        let e3 = cbr(&maxpool2(&e2), "enc3.conv", "enc3.bn");
        let e4 = cbr(&maxpool2(&e3), "enc4.conv", "enc4.bn");
        let enc = vec![e1, e2, e3, e4];
        let mut cur = enc[3].clone();
        let mut dec = vec![];
        for l in [3usize, 2, 1] {
            let up = upconv2(&cur, &p(&format!("dec{l}.up.weight")), p(&format!("dec{l}.up.bias")).data());
            let cat = concat(&up, &enc[l - 1]);
            let y = cbr(&cat, &format!("dec{l}.conv1"), &format!("dec{l}.bn1"));
            cur = cbr(&y, &format!("dec{l}.conv2"), &format!("dec{l}.bn2"));
            dec.push(cur.clone());
        }
        // Head: explicit per-pixel dot product over channels.
        let (hw, hb) = (p("head.weight"), p("head.bias"));
        let mut logits = A4::zeros(cur.b, 1, cur.h, cur.w);
        for b in 0..cur.b {
            for y in 0..cur.h {
                for x in 0..cur.w {
                    let mut acc = hb.data()[0];
                    for c in 0..cur.c {
                        acc += hw.at4(0, c, 0, 0) * cur.at(b, c, y, x);
                    }
                    logits.set(b, 0, y, x, acc);
                }
            }
        }
        (enc, dec, logits)
    }
}
