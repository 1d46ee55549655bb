//! The learned velocity `v_θ(t, z_t, X)`.
//!
//! ```text
//! U = UNet(z_t ⊕ X ⊕ m ⊕ t·1)          (6 input channels)
//! S = U + Proj(DCT(X))                 (dropped when use_dct = false)
//! A = σ(Proj(SelfAttention(QKV(U))))   (all-ones when use_attention = false)
//! v = A ⊙ S
//! ```
//!
//! `m` is a single learnable `1×S×S` map shared across samples, bilinearly
//! resized to the working resolution.

use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionConfig};
use crate::autograd::{Graph, Var};
use crate::dct;
use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unet::{Backbone, UNet, UNetConfig};

pub const PREFIX: &str = "field";
pub const MASK: &str = "field.mask";
/// `z` (1) + image (3) + mask (1) + time (1).
pub const TRUNK_INPUTS: usize = 6;

/// Refinement state `z_t` (logit domain) at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z: Tensor,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldConfig {
    pub widths: [usize; 4],
    /// Native side length of the learnable mask `m`.
    pub mask_size: (usize, usize),
    pub attention: AttentionConfig,
    pub use_attention: bool,
    pub use_dct: bool,
}

#[derive(Clone, Debug)]
pub struct VectorField {
    pub config: FieldConfig,
    trunk: UNet,
}

impl VectorField {
    pub fn new(config: FieldConfig) -> Result<Self> {
        let trunk = UNet::new(format!("{PREFIX}.trunk"), UNetConfig::new(TRUNK_INPUTS, config.widths)?);
        Ok(VectorField { config, trunk })
    }

    pub fn trunk(&self) -> &UNet {
        &self.trunk
    }

    /// Same parameters, with the attention gate and/or DCT prior switched.
    pub fn toggle_components(&self, use_attention: bool, use_dct: bool) -> Self {
        let mut out = self.clone();
        out.config.use_attention = use_attention;
        out.config.use_dct = use_dct;
        out
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.trunk.init_params(store, rng);
        let (h, w) = self.config.mask_size;
        store.insert(MASK, Tensor::zeros(&[1, h, w]));
        attention::init_params(store, &format!("{PREFIX}.attn"), &self.config.attention, rng);
        dct::init_params(store, &format!("{PREFIX}.dctproj"), 3, self.config.attention.in_channels);
    }

    fn check(&self, g: &Graph, z: Var, x: Var) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = g.value(z).dims4()?;
        let (xb, xc, xh, xw) = g.value(x).dims4()?;
        if c != 1 || xc != 3 || (b, h, w) != (xb, xh, xw) {
            return Err(shape_err!(
                "field: state {:?} and image {:?} are incompatible",
                g.shape(z),
                g.shape(x)
            ));
        }
        let s = self.config.attention.stride;
        if h % 8 != 0 || w % 8 != 0 || (self.config.use_attention && (h % s != 0 || w % s != 0)) {
            return Err(shape_err!("field: {h}x{w} must be divisible by 8 and the token stride {s}"));
        }
        Ok((b, h, w))
    }

    /// The trunk branch `UNet(z ⊕ X ⊕ m ⊕ t)`.
    pub fn trunk_output(&self, g: &mut Graph, store: &ParamStore, z: Var, x: Var, t: f64) -> Result<Var> {
        let (b, h, w) = self.check(g, z, x)?;
        let (mh, mw) = self.config.mask_size;
        let m = g.param(store, MASK)?;
        let m = g.reshape(m, &[1, 1, mh, mw])?;
        let m = g.resize_bilinear(m, (h, w))?;
        let m = g.expand_batch(m, b)?;
        let time = g.constant(Tensor::full(&[b, 1, h, w], t));
        let input = g.concat_channels(&[z, x, m, time])?;
        self.trunk.forward(g, store, input)
    }

    /// Evaluate `v_θ(t, z, X)` for a batch; output has the shape of `z`.
    pub fn velocity(&self, g: &mut Graph, store: &ParamStore, z: Var, x: Var, t: f64) -> Result<Var> {
        let trunk = self.trunk_output(g, store, z, x, t)?;
        let sum = if self.config.use_dct {
            let freq = dct::dct_feature(g, store, &format!("{PREFIX}.dctproj"), x)?;
            g.add(trunk, freq)?
        } else {
            trunk
        };
        if !self.config.use_attention {
            return Ok(sum);
        }
        let gate = attention::gating_weights(g, store, &format!("{PREFIX}.attn"), &self.config.attention, trunk)?;
        g.mul(gate, sum)
    }
}
