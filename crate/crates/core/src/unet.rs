//! Four-level U-Net encoder/decoder with skip connections and a 1×1 head.
//!
//! Encoder: `E1 = ReLU(BN(Conv(x)))`, `E_l = ReLU(BN(Conv(MaxPool(E_{l−1}))))`.
//! Decoder: `D_l = ConvB(Cat(UpConv(D_{l+1}), E_l))` with `D_4 = E4`, where
//! `ConvB` is two 3×3 conv/BN/ReLU layers and `UpConv` a 2×2 stride-2
//! transposed convolution. The head is a 1×1 convolution to one logit channel.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{uniform_init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel widths `c1..c4`, strictly increasing.
    pub widths: [usize; 4],
}

impl UNetConfig {
    pub fn new(in_channels: usize, widths: [usize; 4]) -> Result<Self> {
        if in_channels == 0 || widths[0] == 0 || widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(crate::error::Error::Invalid(format!(
                "U-Net widths must be positive and strictly increasing, got {widths:?}"
            )));
        }
        Ok(UNetConfig {
            in_channels,
            widths,
        })
    }
}

/// Encoder outputs `E1..E4` at strides 1, 2, 4, 8.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub levels: [Var; 4],
}

/// Decoder outputs `D3, D2, D1` (index 0 is `D1`, at full resolution).
#[derive(Clone, Copy, Debug)]
pub struct DecoderFeatures {
    pub levels: [Var; 3],
}

impl DecoderFeatures {
    pub fn d1(&self) -> Var {
        self.levels[0]
    }
}

/// A segmentation trunk mapping `B×Cin×H×W` inputs to `B×1×H×W` logits.
pub trait Backbone {
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng);
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var>;
    /// Required divisor of the spatial input size.
    fn size_divisor(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub prefix: String,
    pub config: UNetConfig,
}

fn conv_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
    let fan_in = cin * k * k;
    store.insert(format!("{name}.weight"), uniform_init(rng, &[cout, cin, k, k], fan_in, gain));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn bn_params(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.weight"), Tensor::ones(&[c]));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{name}.running_var"), Tensor::ones(&[c]));
}

const RELU_GAIN: f64 = 2.449_489_742_783_178; // √6

impl UNet {
    pub fn new(prefix: impl Into<String>, config: UNetConfig) -> Self {
        UNet {
            prefix: prefix.into(),
            config,
        }
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    fn conv_bn_relu(&self, g: &mut Graph, store: &ParamStore, conv: &str, bn: &str, x: Var) -> Result<Var> {
        let w = g.param(store, &self.name(&format!("{conv}.weight")))?;
        let b = g.param(store, &self.name(&format!("{conv}.bias")))?;
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        let y = g.batch_norm(store, &self.name(bn), y)?;
        Ok(g.relu(y))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderFeatures> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(shape_err!(
                "{}: expected {} input channels, got {c}",
                self.prefix,
                self.config.in_channels
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(shape_err!("{}: spatial size {h}x{w} is not divisible by 8", self.prefix));
        }
        let mut levels = Vec::with_capacity(4);
        let mut cur = x;
        for l in 1..=4 {
            if l > 1 {
                cur = g.maxpool2(cur)?;
            }
            cur = self.conv_bn_relu(g, store, &format!("enc{l}.conv"), &format!("enc{l}.bn"), cur)?;
            levels.push(cur);
        }
        Ok(EncoderFeatures {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, feats: &EncoderFeatures) -> Result<DecoderFeatures> {
        let mut cur = feats.levels[3];
        let mut out = [cur; 3];
        for l in (1..=3).rev() {
            let skip = feats.levels[l - 1];
            let uw = g.param(store, &self.name(&format!("dec{l}.up.weight")))?;
            let ub = g.param(store, &self.name(&format!("dec{l}.up.bias")))?;
            let up = g.upconv2(cur, uw, ub)?;
            if g.shape(up)[2..] != g.shape(skip)[2..] {
                return Err(shape_err!(
                    "{}.dec{l}: upsampled {:?} does not match skip {:?}",
                    self.prefix,
                    g.shape(up),
                    g.shape(skip)
                ));
            }
            let cat = g.concat_channels(&[up, skip])?;
            let y = self.conv_bn_relu(g, store, &format!("dec{l}.conv1"), &format!("dec{l}.bn1"), cat)?;
            cur = self.conv_bn_relu(g, store, &format!("dec{l}.conv2"), &format!("dec{l}.bn2"), y)?;
            out[l - 1] = cur;
        }
        Ok(DecoderFeatures { levels: out })
    }

    pub fn head(&self, g: &mut Graph, store: &ParamStore, d1: Var) -> Result<Var> {
        let w = g.param(store, &self.name("head.weight"))?;
        let b = g.param(store, &self.name("head.bias"))?;
        g.conv2d(d1, w, Some(b), 1, 0)
    }
}

impl Backbone for UNet {
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let [c1, c2, c3, c4] = self.config.widths;
        let widths = [c1, c2, c3, c4];
        let mut cin = self.config.in_channels;
        for (l, &c) in widths.iter().enumerate() {
            conv_params(store, rng, &self.name(&format!("enc{}.conv", l + 1)), c, cin, 3, RELU_GAIN);
            bn_params(store, &self.name(&format!("enc{}.bn", l + 1)), c);
            cin = c;
        }
        for l in (1..=3).rev() {
            let (below, here) = (widths[l], widths[l - 1]);
            let up = self.name(&format!("dec{l}.up"));
            store.insert(
                format!("{up}.weight"),
                uniform_init(rng, &[below, here, 2, 2], below * 4, RELU_GAIN),
            );
            store.insert(format!("{up}.bias"), Tensor::zeros(&[here]));
            conv_params(store, rng, &self.name(&format!("dec{l}.conv1")), here, 2 * here, 3, RELU_GAIN);
            bn_params(store, &self.name(&format!("dec{l}.bn1")), here);
            conv_params(store, rng, &self.name(&format!("dec{l}.conv2")), here, here, 3, RELU_GAIN);
            bn_params(store, &self.name(&format!("dec{l}.bn2")), here);
        }
        conv_params(store, rng, &self.name("head"), 1, c1, 1, 1.0);
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let enc = self.encode(g, store, x)?;
        let dec = self.decode(g, store, &enc)?;
        self.head(g, store, dec.d1())
    }

    fn size_divisor(&self) -> usize {
        8
    }
}
