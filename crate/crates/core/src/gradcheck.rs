//! Finite-difference verification of the analytic gradients.
//!
//! Each group builds a scalar function of named tensors on a tiny
//! configuration (16×16 inputs, at most 8 channels), differentiates it on the
//! tape, and compares a random sample of coordinates of every tensor against
//! central differences. A tensor's error is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`
//! over its sampled coordinates, with the floor raised to `1e-6` times the
//! largest tensor gradient norm of the group; a group reports the worst
//! tensor.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionConfig};
use crate::autograd::{Graph, Mode, Var};
use crate::config::TrainConfig;
use crate::dct;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, VectorField, MASK};
use crate::losses::LossConfig;
use crate::model::{PolypFlow, BACKBONE};
use crate::ode;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unet::{Backbone, UNet, UNetConfig};

const SIZE: usize = 16;
const WIDTHS: [usize; 4] = [2, 4, 6, 8];
/// Relative to the largest sampled gradient norm of the group.
pub const NOISE_FLOOR: f64 = 1e-6;
/// Disagreement between the `ε` and `ε/2` central differences above which a
/// coordinate is treated as straddling a kink.
pub const KINK_RTOL: f64 = 1e-4;
/// Largest tolerated fraction of skipped coordinates per group.
pub const MAX_SKIPPED: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Losses,
    Backbone,
    Dct,
    Attention,
    Field,
    /// Backbone → two unrolled Euler steps → segmentation loss.
    EndToEnd,
    /// The end-to-end graph with the backbone frozen: every backbone
    /// gradient must be exactly zero.
    Frozen,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Losses,
        Group::Backbone,
        Group::Dct,
        Group::Attention,
        Group::Field,
        Group::EndToEnd,
        Group::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Losses => "losses",
            Group::Backbone => "backbone",
            Group::Dct => "dct",
            Group::Attention => "attention",
            Group::Field => "field",
            Group::EndToEnd => "end_to_end",
            Group::Frozen => "frozen",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Group::EndToEnd => 1e-2,
            Group::Frozen => 0.0,
            _ => 1e-3,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown gradient-check group `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Batch-norm mode of every evaluated graph.
    pub bn_mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_tensor: 4,
            seed: 0,
            bn_mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: Group,
    pub tensors: usize,
    pub coords: usize,
    /// Coordinates excluded because a kink lies within the stencil.
    pub skipped: usize,
    /// Worst relative error; for [`Group::Frozen`] the largest absolute
    /// gradient entry of the frozen parameters.
    pub max_error: f64,
    pub worst_tensor: String,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<10} {} tensors={:<3} coords={:<4} skipped={:<3} max_error={:.3e} (tol {:.0e}) worst={}",
                g.group.name(),
                if g.passed { "PASS" } else { "FAIL" },
                g.tensors,
                g.coords,
                g.skipped,
                g.max_error,
                g.tolerance,
                g.worst_tensor
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Scalar function of the tensors in a store.
type Objective<'a> = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a>;

struct Problem<'a> {
    store: ParamStore,
    objective: Objective<'a>,
}

fn evaluate(problem: &Problem, store: &ParamStore, mode: Mode) -> Result<f64> {
    let mut g = Graph::new(mode);
    let out = (problem.objective)(&mut g, store)?;
    Ok(g.value(out).item())
}

fn compare(problem: &Problem, group: Group, tol: f64, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GroupReport> {
    let mut g = Graph::new(opts.bn_mode);
    let out = (problem.objective)(&mut g, &problem.store)?;
    let analytic = g.backward(out)?.params();
    let mut store = problem.store.clone();
    let mut sampled = Vec::with_capacity(analytic.len());
    let (mut coords, mut skipped) = (0, 0);
    let coord_floor = (NOISE_FLOOR * analytic.values().map(Tensor::max_abs).fold(0.0, f64::max)).max(1e-8);
    for (name, grad) in &analytic {
        let n = grad.len();
        let picks = sample(rng, n, opts.coords_per_tensor.min(n));
        let mut pairs = Vec::with_capacity(picks.len());
        for i in picks.iter() {
            let orig = store.get(name).expect("param").data()[i];
            let mut central = |h: f64| -> Result<f64> {
                store.get_mut(name).expect("param").data_mut()[i] = orig + h;
                let up = evaluate(problem, &store, opts.bn_mode)?;
                store.get_mut(name).expect("param").data_mut()[i] = orig - h;
                let down = evaluate(problem, &store, opts.bn_mode)?;
                store.get_mut(name).expect("param").data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let wide = central(opts.eps)?;
            let narrow = central(opts.eps / 2.0)?;
            coords += 1;
            // A ReLU or max-pool switch inside the stencil makes the two
            // step sizes disagree; such a coordinate says nothing about the
            // derivative and is left out.
            if (wide - narrow).abs() > KINK_RTOL * wide.abs().max(narrow.abs()).max(coord_floor) {
                skipped += 1;
                continue;
            }
            pairs.push((grad.data()[i], wide));
        }
        sampled.push((name.clone(), pairs));
    }
    // Tensors whose true gradient vanishes (a conv bias feeding batch-norm)
    // compare rounding noise against rounding noise; the floor measures them
    // against the scale of the group instead.
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let scale = sampled
        .iter()
        .map(|(_, p)| norm(&mut p.iter().map(|x| x.0)))
        .fold(0.0, f64::max);
    let floor = (NOISE_FLOOR * scale).max(1e-8);
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for (name, pairs) in &sampled {
        let diff = norm(&mut pairs.iter().map(|(a, n)| a - n));
        let a = norm(&mut pairs.iter().map(|x| x.0));
        let n = norm(&mut pairs.iter().map(|x| x.1));
        let rel = diff / a.max(n).max(floor);
        if rel >= worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    Ok(GroupReport {
        group,
        tensors: analytic.len(),
        coords,
        max_error: worst,
        worst_tensor: worst_name,
        skipped,
        tolerance: tol,
        passed: worst < tol && (skipped as f64) <= MAX_SKIPPED * coords as f64,
    })
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        image_size: SIZE,
        widths: WIDTHS,
        head_dim: 4,
        ..TrainConfig::default()
    }
}

/// Tiny model with the zero-initialized DCT projection and mask replaced by
/// random values, so every branch carries gradient.
fn tiny_model(rng: &mut ChaCha8Rng) -> Result<PolypFlow> {
    let mut model = PolypFlow::new(TrainConfig {
        seed: rng.random(),
        ..tiny_config()
    })?;
    let proj = model.params.get("field.dctproj.weight").expect("dctproj").shape().to_vec();
    model.params.set("field.dctproj.weight", uniform(rng, &proj, -0.3, 0.3))?;
    model.params.set(MASK, uniform(rng, &[1, SIZE, SIZE], -0.5, 0.5))?;
    Ok(model)
}

fn problem(group: Group, rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let mut store = ParamStore::new();
    let objective: Objective = match group {
        Group::Losses => {
            store.insert("p", uniform(rng, &[2, 1, 8, 8], 0.05, 0.95));
            let mask = uniform(rng, &[2, 1, 8, 8], 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let target = uniform(rng, &[2, 1, 8, 8], -2.0, 2.0);
            let cfg = LossConfig::default();
            Box::new(move |g, s| {
                let p = g.param(s, "p")?;
                let seg = g.segmentation_loss(p, &mask, &cfg)?;
                let mse = g.mse(p, &target)?;
                g.add(seg, mse)
            })
        }
        Group::Backbone => {
            let net = UNet::new(BACKBONE, UNetConfig::new(3, WIDTHS)?);
            net.init_params(&mut store, rng);
            let x = uniform(rng, &[1, 3, SIZE, SIZE], 0.0, 1.0);
            let r = uniform(rng, &[1, 1, SIZE, SIZE], -1.0, 1.0);
            Box::new(move |g, s| {
                let xv = g.constant(x.clone());
                let out = net.forward(g, s, xv)?;
                weighted_sum(g, out, &r)
            })
        }
        Group::Dct => {
            dct::init_params(&mut store, "dctproj", 3, 2);
            store.set("dctproj.weight", uniform(rng, &[2, 3, 1, 1], -1.0, 1.0))?;
            store.insert("input", uniform(rng, &[1, 3, SIZE, SIZE], 0.0, 1.0));
            let r = uniform(rng, &[1, 2, SIZE, SIZE], -1.0, 1.0);
            Box::new(move |g, s| {
                let x = g.param(s, "input")?;
                let out = dct::dct_feature(g, s, "dctproj", x)?;
                weighted_sum(g, out, &r)
            })
        }
        Group::Attention => {
            let cfg = AttentionConfig {
                in_channels: 1,
                head_dim: 4,
                kernel: 7,
                stride: 8,
            };
            attention::init_params(&mut store, "attn", &cfg, rng);
            store.insert("input", uniform(rng, &[1, 1, SIZE, SIZE], -1.0, 1.0));
            let r = uniform(rng, &[1, 1, SIZE, SIZE], -1.0, 1.0);
            Box::new(move |g, s| {
                let f = g.param(s, "input")?;
                let out = attention::gating_weights(g, s, "attn", &cfg, f)?;
                weighted_sum(g, out, &r)
            })
        }
        Group::Field => {
            let model = tiny_model(rng)?;
            let field = VectorField::new(FieldConfig { ..model.config.field() })?;
            store = model.params.clone();
            store.insert("state", uniform(rng, &[1, 1, SIZE, SIZE], -2.0, 2.0));
            let x = uniform(rng, &[1, 3, SIZE, SIZE], 0.0, 1.0);
            let r = uniform(rng, &[1, 1, SIZE, SIZE], -1.0, 1.0);
            let t = 0.3;
            Box::new(move |g, s| {
                let z = g.param(s, "state")?;
                let xv = g.constant(x.clone());
                let v = field.velocity(g, s, z, xv, t)?;
                weighted_sum(g, v, &r)
            })
        }
        Group::EndToEnd | Group::Frozen => {
            let model = tiny_model(rng)?;
            store = model.params.clone();
            let x = uniform(rng, &[2, 3, SIZE, SIZE], 0.0, 1.0);
            let mask = uniform(rng, &[2, 1, SIZE, SIZE], 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let loss_cfg = model.config.loss();
            let frozen = group == Group::Frozen;
            Box::new(move |g, s| {
                if frozen {
                    g.freeze(&[BACKBONE]);
                }
                let xv = g.constant(x.clone());
                let z0 = model.backbone.forward(g, s, xv)?;
                let states = ode::euler_unrolled(g, z0, 2, |g, z, t| model.field.velocity(g, s, z, xv, t))?;
                let p = g.sigmoid(states[2]);
                g.segmentation_loss(p, &mask, &loss_cfg)
            })
        }
    };
    Ok(Problem { store, objective })
}

fn frozen_report(problem: &Problem, mode: Mode) -> Result<GroupReport> {
    let mut g = Graph::new(mode);
    let out = (problem.objective)(&mut g, &problem.store)?;
    let grads = g.backward(out)?.params();
    let frozen: Vec<(&String, &Tensor)> = grads.iter().filter(|(k, _)| k.starts_with(BACKBONE)).collect();
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for (name, t) in &frozen {
        if t.max_abs() > worst || worst_name.is_empty() {
            worst = worst.max(t.max_abs());
            worst_name = name.to_string();
        }
    }
    let live = grads
        .iter()
        .filter(|(k, _)| !k.starts_with(BACKBONE))
        .any(|(_, t)| t.max_abs() > 0.0);
    Ok(GroupReport {
        group: Group::Frozen,
        tensors: frozen.len(),
        coords: frozen.iter().map(|(_, t)| t.len()).sum(),
        skipped: 0,
        max_error: worst,
        worst_tensor: worst_name,
        tolerance: 0.0,
        passed: worst == 0.0 && !frozen.is_empty() && live,
    })
}

/// Run the selected groups. `tolerance` overrides every group's default
/// (1e-3, or 1e-2 end-to-end); the frozen group always demands exact zeros.
pub fn grad_check(groups: &[Group], tolerance: Option<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut out = Vec::with_capacity(groups.len());
    for &group in groups {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(group as u64);
        let problem = problem(group, &mut rng)?;
        let report = if group == Group::Frozen {
            frozen_report(&problem, opts.bn_mode)?
        } else {
            let tol = tolerance.unwrap_or(group.default_tolerance());
            compare(&problem, group, tol, opts, &mut rng)?
        };
        out.push(report);
    }
    Ok(GradCheckReport { groups: out })
}
