//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comment
//! train.lr = 1e-4
//! model.widths = 64,128,256,512
//! loss.lambda_fm = 1.0
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::losses::LossConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train the field by flow-matching regression only; the segmentation
    /// loss then supervises the coarse backbone instead of the trajectory.
    pub detach_trajectory: bool,
    /// Number of training images scored for `probe_mdice` each epoch.
    pub probe_size: usize,

    pub image_size: usize,
    pub widths: [usize; 4],
    pub head_dim: usize,
    pub attn_kernel: usize,
    pub token_stride: usize,
    pub use_attention: bool,
    pub use_dct: bool,

    pub n_steps: usize,
    /// Standard deviation of optional Gaussian noise added to `z_0` during
    /// training (0 disables it).
    pub init_noise: f64,

    pub lambda_fm: f64,
    pub weight_window: usize,
    pub weight_gain: f64,

    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split_seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            detach_trajectory: false,
            probe_size: 8,
            image_size: 352,
            widths: [64, 128, 256, 512],
            head_dim: 64,
            attn_kernel: 7,
            token_stride: 8,
            use_attention: true,
            use_dct: true,
            n_steps: 10,
            init_noise: 0.0,
            lambda_fm: 1.0,
            weight_window: 31,
            weight_gain: 5.0,
            data_root: None,
            manifest: None,
            split_seed: 0,
            augment: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.seed",
    "train.detach_trajectory",
    "train.probe_size",
    "model.image_size",
    "model.widths",
    "model.head_dim",
    "model.attn_kernel",
    "model.token_stride",
    "field.use_attention",
    "field.use_dct",
    "ode.n_steps",
    "ode.init_noise",
    "loss.lambda_fm",
    "loss.weight_window",
    "loss.weight_gain",
    "data.root",
    "data.manifest",
    "data.split_seed",
    "data.augment",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::Config(format!("{key} must be positive")));
    }
    Ok(v)
}

impl TrainConfig {
    /// Test-scale model: widths (4, 8, 16, 32), head dimension 4.
    pub fn tiny(image_size: usize) -> Self {
        TrainConfig {
            image_size,
            widths: [4, 8, 16, 32],
            head_dim: 4,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "train.epochs" => self.epochs = positive(key, parse(key, value)?)?,
            "train.batch_size" => self.batch_size = positive(key, parse(key, value)?)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.detach_trajectory" => self.detach_trajectory = parse(key, value)?,
            "train.probe_size" => self.probe_size = parse(key, value)?,
            "model.image_size" => self.image_size = positive(key, parse(key, value)?)?,
            "model.widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four widths")))?;
            }
            "model.head_dim" => self.head_dim = positive(key, parse(key, value)?)?,
            "model.attn_kernel" => self.attn_kernel = positive(key, parse(key, value)?)?,
            "model.token_stride" => self.token_stride = positive(key, parse(key, value)?)?,
            "field.use_attention" => self.use_attention = parse(key, value)?,
            "field.use_dct" => self.use_dct = parse(key, value)?,
            "ode.n_steps" => self.n_steps = positive(key, parse(key, value)?)?,
            "ode.init_noise" => self.init_noise = parse(key, value)?,
            "loss.lambda_fm" => self.lambda_fm = parse(key, value)?,
            "loss.weight_window" => self.weight_window = positive(key, parse(key, value)?)?,
            "loss.weight_gain" => self.weight_gain = parse(key, value)?,
            "data.root" => self.data_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.split_seed" => self.split_seed = parse(key, value)?,
            "data.augment" => self.augment = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda_fm >= 0.0) {
            return Err(Error::Config("lr, weight_decay and lambda_fm must be non-negative".into()));
        }
        if self.image_size % 8 != 0 || self.image_size % self.token_stride != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} must be divisible by 8 and by model.token_stride {}",
                self.image_size, self.token_stride
            )));
        }
        if self.weight_window % 2 == 0 {
            return Err(Error::Config("loss.weight_window must be odd".into()));
        }
        if self.widths.windows(2).any(|p| p[1] <= p[0]) || self.widths[0] == 0 {
            return Err(Error::Config("model.widths must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let w = self.widths;
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.lr = {:?}", self.lr);
        let _ = writeln!(s, "train.weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.detach_trajectory = {}", self.detach_trajectory);
        let _ = writeln!(s, "train.probe_size = {}", self.probe_size);
        let _ = writeln!(s, "model.image_size = {}", self.image_size);
        let _ = writeln!(s, "model.widths = {},{},{},{}", w[0], w[1], w[2], w[3]);
        let _ = writeln!(s, "model.head_dim = {}", self.head_dim);
        let _ = writeln!(s, "model.attn_kernel = {}", self.attn_kernel);
        let _ = writeln!(s, "model.token_stride = {}", self.token_stride);
        let _ = writeln!(s, "field.use_attention = {}", self.use_attention);
        let _ = writeln!(s, "field.use_dct = {}", self.use_dct);
        let _ = writeln!(s, "ode.n_steps = {}", self.n_steps);
        let _ = writeln!(s, "ode.init_noise = {:?}", self.init_noise);
        let _ = writeln!(s, "loss.lambda_fm = {:?}", self.lambda_fm);
        let _ = writeln!(s, "loss.weight_window = {}", self.weight_window);
        let _ = writeln!(s, "loss.weight_gain = {:?}", self.weight_gain);
        let _ = writeln!(s, "data.root = {}", path(&self.data_root));
        let _ = writeln!(s, "data.manifest = {}", path(&self.manifest));
        let _ = writeln!(s, "data.split_seed = {}", self.split_seed);
        let _ = writeln!(s, "data.augment = {}", self.augment);
        s
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            weight_window: self.weight_window,
            weight_gain: self.weight_gain,
            lambda_fm: self.lambda_fm,
        }
    }

    pub fn field(&self) -> FieldConfig {
        FieldConfig {
            widths: self.widths,
            mask_size: (self.image_size, self.image_size),
            attention: AttentionConfig {
                in_channels: 1,
                head_dim: self.head_dim,
                kernel: self.attn_kernel,
                stride: self.token_stride,
            },
            use_attention: self.use_attention,
            use_dct: self.use_dct,
        }
    }
}
