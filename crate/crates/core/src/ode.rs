//! Fixed-step explicit Euler integration over `t ∈ [0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::FlowState;
use crate::kernels::sigmoid;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 10;

/// States at `t_n = n/N` for `n = 0..=N` plus the `N` velocities used.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    pub velocities: Vec<Tensor>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn final_state(&self) -> &FlowState {
        self.states.last().expect("a trajectory has at least one state")
    }

    /// `sigmoid(z)` of every state.
    pub fn probabilities(&self) -> Vec<Tensor> {
        self.states.iter().map(|s| s.z.map(sigmoid)).collect()
    }
}

fn check_steps(n_steps: usize) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps ≥ 1 required".into()));
    }
    Ok(1.0 / n_steps as f64)
}

/// Integrate `dz/dt = field(t, z)` from `x0` with `n_steps` uniform steps,
/// keeping every intermediate state.
pub fn euler_integrate<F>(mut field: F, x0: &Tensor, n_steps: usize) -> Result<Trajectory>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let dt = check_steps(n_steps)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut velocities = Vec::with_capacity(n_steps);
    states.push(FlowState {
        z: x0.clone(),
        t: 0.0,
    });
    for n in 0..n_steps {
        let t = n as f64 / n_steps as f64;
        let z = &states[n].z;
        let v = field(t, z)?;
        if v.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "field returned {:?} for state {:?}",
                v.shape(),
                z.shape()
            )));
        }
        let next = z.zip_map(&v, |a, b| a + b * dt);
        if !next.is_finite() {
            return Err(Error::NonFinite { step: n + 1 });
        }
        states.push(FlowState {
            z: next,
            t: (n + 1) as f64 / n_steps as f64,
        });
        velocities.push(v);
    }
    Ok(Trajectory { states, velocities })
}

/// Unrolled Euler integration recorded on a graph, so a loss on the final
/// state back-propagates through every step. Returns all `N + 1` states.
pub fn euler_unrolled<F>(g: &mut Graph, z0: Var, n_steps: usize, mut field: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Graph, Var, f64) -> Result<Var>,
{
    let dt = check_steps(n_steps)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0);
    for n in 0..n_steps {
        let z = states[n];
        let v = field(g, z, n as f64 / n_steps as f64)?;
        let step = g.scale(v, dt);
        let next = g.add(z, step)?;
        if !g.value(next).is_finite() {
            return Err(Error::NonFinite { step: n + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Entry of the trajectory index written next to the per-step images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepIndexEntry {
    pub step: usize,
    pub t: f64,
    pub file: String,
}

/// Write `step_XX.png` (sigmoid of each state, first batch item) plus
/// `index.json` into `dir`.
pub fn export_trajectory(traj: &Trajectory, dir: &Path) -> Result<Vec<StepIndexEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(traj.states.len());
    for (n, (state, prob)) in traj.states.iter().zip(traj.probabilities()).enumerate() {
        let file = format!("step_{n:02}.png");
        let (_, _, h, w) = prob.dims4()?;
        let plane = &prob.data()[..h * w];
        crate::image_io::save_gray(&dir.join(&file), plane, w, h)?;
        index.push(StepIndexEntry {
            step: n,
            t: state.t,
            file,
        });
    }
    let json = serde_json::to_string_pretty(&index)?;
    let path = dir.join("index.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_an_error() {
        let x0 = Tensor::zeros(&[1]);
        assert!(euler_integrate(|_, z| Ok(z.clone()), &x0, 0).is_err());
    }

    #[test]
    fn non_finite_step_is_reported() {
        let x0 = Tensor::ones(&[1]);
        let err = euler_integrate(
            |t, z| Ok(if t > 0.25 { z.map(|_| f64::INFINITY) } else { z.clone() }),
            &x0,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3 }), "{err}");
    }

    #[test]
    fn times_are_uniform() {
        let traj = euler_integrate(|_, z| Ok(z.map(|_| 0.0)), &Tensor::zeros(&[1]), 4).unwrap();
        let ts: Vec<f64> = traj.states.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
