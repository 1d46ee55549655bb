//! The assembled model: a coarse U-Net whose logits seed an Euler-integrated
//! refinement flow.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::config::TrainConfig;
use crate::error::{shape_err, Result};
use crate::field::{FlowState, VectorField};
use crate::image_io;
use crate::kernels;
use crate::ode::{self, StepIndexEntry, Trajectory};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unet::{Backbone, UNet, UNetConfig};

pub const BACKBONE: &str = "backbone";

#[derive(Clone, Debug)]
pub struct PolypFlow {
    pub config: TrainConfig,
    pub backbone: UNet,
    pub field: VectorField,
    pub params: ParamStore,
}

impl PolypFlow {
    /// Freshly initialized model drawn from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut model = Self::uninitialized(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        model.backbone.init_params(&mut model.params, &mut rng);
        model.field.init_params(&mut model.params, &mut rng);
        Ok(model)
    }

    /// Architecture only, with an empty parameter store.
    pub fn uninitialized(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = UNet::new(BACKBONE, UNetConfig::new(3, config.widths)?);
        let field = VectorField::new(config.field())?;
        Ok(PolypFlow {
            config,
            backbone,
            field,
            params: ParamStore::new(),
        })
    }

    /// Same parameters with the gate and/or DCT prior switched.
    pub fn with_components(&self, use_attention: bool, use_dct: bool) -> Self {
        let mut out = self.clone();
        out.field = self.field.toggle_components(use_attention, use_dct);
        out.config.use_attention = use_attention;
        out.config.use_dct = use_dct;
        out
    }

    pub fn coarse_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.backbone.forward(g, &self.params, x)
    }

    pub fn velocity(&self, g: &mut Graph, z: Var, x: Var, t: f64) -> Result<Var> {
        self.field.velocity(g, &self.params, z, x, t)
    }

    fn eval_graph() -> Graph {
        let mut g = Graph::new(Mode::Eval);
        g.freeze(&[""]);
        g
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(shape_err!("expected B×3×H×W images, got {:?}", images.shape()));
        }
        let d = self.backbone.size_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(shape_err!("image size {h}x{w} is not divisible by {d}"));
        }
        Ok(())
    }

    /// `z_0`: coarse backbone logits (eval mode), `t = 0`.
    pub fn initial_state(&self, images: &Tensor) -> Result<FlowState> {
        self.check_images(images)?;
        let mut g = Self::eval_graph();
        let x = g.constant(images.clone());
        let z = self.coarse_logits(&mut g, x)?;
        Ok(FlowState {
            z: g.value(z).clone(),
            t: 0.0,
        })
    }

    /// Eval-mode trajectory from the coarse prediction.
    pub fn trajectory(&self, images: &Tensor, n_steps: usize) -> Result<Trajectory> {
        let z0 = self.initial_state(images)?;
        ode::euler_integrate(
            |t, z| {
                let mut g = Self::eval_graph();
                let x = g.constant(images.clone());
                let zv = g.constant(z.clone());
                let v = self.velocity(&mut g, zv, x, t)?;
                Ok(g.value(v).clone())
            },
            &z0.z,
            n_steps,
        )
    }

    /// Final probabilities `sigmoid(z_N)`.
    pub fn predict(&self, images: &Tensor, n_steps: usize) -> Result<Tensor> {
        let traj = self.trajectory(images, n_steps)?;
        Ok(traj.final_state().z.map(kernels::sigmoid))
    }

    /// Run inference on an image file: the image is resized to the model
    /// resolution, the binary mask (`p > 0.5`) is written at the original
    /// size to `out_dir/mask.png` and the trajectory to `out_dir/trajectory/`.
    pub fn infer_file(&self, image: &Path, n_steps: usize, out_dir: &Path) -> Result<InferOutput> {
        let (traj, (h, w)) = self.trajectory_for_file(image, n_steps)?;
        std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
        let mask = binary_mask(&traj, (h, w))?;
        let mask_path = out_dir.join("mask.png");
        image_io::save_gray(&mask_path, &mask, w, h)?;
        let traj_dir = out_dir.join("trajectory");
        let index = ode::export_trajectory(&traj, &traj_dir)?;
        Ok(InferOutput {
            mask_path,
            trajectory_dir: traj_dir,
            index,
            trajectory: traj,
        })
    }

    /// Load and resize an image file to the model resolution, returning the
    /// trajectory and the original `(h, w)`.
    pub fn trajectory_for_file(&self, image: &Path, n_steps: usize) -> Result<(Trajectory, (usize, usize))> {
        let (img, h, w) = image_io::load_rgb(image)?;
        let s = self.config.image_size;
        let resized = kernels::bilinear_resize(&img, 3, (h, w), (s, s));
        let x = Tensor::from_vec(&[1, 3, s, s], resized)?;
        Ok((self.trajectory(&x, n_steps)?, (h, w)))
    }
}

/// Threshold `sigmoid(z_N)` of the first batch item at 0.5 (ties count as
/// background), resized to `size` with nearest-neighbor sampling.
pub fn binary_mask(traj: &Trajectory, size: (usize, usize)) -> Result<Vec<f64>> {
    let z = &traj.final_state().z;
    let (_, _, h, w) = z.dims4()?;
    let plane: Vec<f64> = z.data()[..h * w]
        .iter()
        .map(|&v| if kernels::sigmoid(v) > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(kernels::nearest_resize(&plane, 1, (h, w), size))
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub mask_path: PathBuf,
    pub trajectory_dir: PathBuf,
    pub index: Vec<StepIndexEntry>,
    pub trajectory: Trajectory,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_predicts_background() {
        let mut model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
        model.params.zero_prefix("");
        let x = Tensor::full(&[1, 3, 16, 16], 0.3);
        let traj = model.trajectory(&x, 3).unwrap();
        assert_eq!(traj.states.len(), 4);
        assert!(traj.final_state().z.data().iter().all(|&z| z == 0.0));
        assert!(binary_mask(&traj, (16, 16)).unwrap().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn component_toggles_share_parameters() {
        let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
        let off = model.with_components(false, false);
        assert_eq!(off.params, model.params);
        assert!(!off.field.config.use_attention && !off.field.config.use_dct);
    }
}
