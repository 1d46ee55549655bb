//! Training loop: backpropagation through the unrolled solver plus the
//! flow-matching regression term, AdamW updates, batch-norm running
//! statistics, per-epoch logging and checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnObservation, Graph, Mode, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Sample, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics;
use crate::model::PolypFlow;
use crate::ode;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// Random access to preprocessed training samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }
    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Decodes and preprocesses records on demand.
pub struct RecordSource {
    pub records: Vec<SampleRecord>,
    pub size: usize,
}

impl SampleSource for RecordSource {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn get(&self, index: usize) -> Result<Sample> {
        data::preprocess(&self.records[index], self.size)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_seg: f64,
    pub loss_fm: f64,
    pub probe_mdice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub seg: f64,
    pub fm: f64,
    pub total: f64,
}

/// Fold the batch statistics observed during one step into the running
/// buffers. Layers evaluated several times in a step (the field trunk runs
/// once per Euler step) contribute the average of their observations.
pub fn update_running_stats(store: &mut ParamStore, observations: &[BnObservation], momentum: f64) -> Result<()> {
    let mut grouped: BTreeMap<&str, Vec<&BnObservation>> = BTreeMap::new();
    for obs in observations {
        grouped.entry(obs.prefix.as_str()).or_default().push(obs);
    }
    for (prefix, list) in grouped {
        let c = list[0].mean.len();
        let k = list.len() as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for obs in &list {
            let unbias = if obs.count > 1 {
                obs.count as f64 / (obs.count - 1) as f64
            } else {
                1.0
            };
            for i in 0..c {
                mean[i] += obs.mean[i] / k;
                var[i] += obs.var[i] * unbias / k;
            }
        }
        for (name, new) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{prefix}.{name}");
            let buf = store.buffer_mut(&key).ok_or_else(|| Error::UnknownParam(key.clone()))?;
            for (b, n) in buf.data_mut().iter_mut().zip(new) {
                *b = (1.0 - momentum) * *b + momentum * n;
            }
        }
    }
    Ok(())
}

pub struct Trainer {
    pub model: PolypFlow,
    pub optim: AdamW,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: PolypFlow) -> Self {
        let optim = AdamW::new(model.config.lr, model.config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(1);
        Trainer {
            model,
            optim,
            step: 0,
            rng,
        }
    }

    fn loss_config(&self) -> LossConfig {
        self.model.config.loss()
    }

    /// Record the training objective on `g`; returns `(seg, fm)` nodes.
    /// The FM node is absent when `lambda_fm = 0`.
    pub fn objective(&mut self, g: &mut Graph, images: &Tensor, masks: &Tensor) -> Result<(Var, Option<Var>)> {
        let cfg = self.model.config.clone();
        let x = g.constant(images.clone());
        let mut z0 = self.model.coarse_logits(g, x)?;
        if cfg.init_noise > 0.0 {
            let normal = Normal::new(0.0, cfg.init_noise).map_err(|e| Error::Config(e.to_string()))?;
            let noise: Vec<f64> = (0..g.value(z0).len()).map(|_| normal.sample(&mut self.rng)).collect();
            let noise = g.constant(Tensor::from_vec(g.shape(z0), noise)?);
            z0 = g.add(z0, noise)?;
        }
        let loss_cfg = self.loss_config();
        let seg = if cfg.detach_trajectory {
            let p = g.sigmoid(z0);
            g.segmentation_loss(p, masks, &loss_cfg)?
        } else {
            let model = &self.model;
            let states = ode::euler_unrolled(g, z0, cfg.n_steps, |g, z, t| model.velocity(g, z, x, t))?;
            let p = g.sigmoid(*states.last().expect("n_steps ≥ 1"));
            g.segmentation_loss(p, masks, &loss_cfg)?
        };
        let fm = if cfg.lambda_fm > 0.0 {
            let start = g.value(z0).clone();
            let target = losses::logit_target(masks, losses::TARGET_CLAMP);
            let t: f64 = self.rng.random();
            let xt = start.zip_map(&target, |a, b| (1.0 - t) * a + t * b);
            let velocity_target = target.zip_map(&start, |b, a| b - a);
            let zt = g.constant(xt);
            let v = self.model.velocity(g, zt, x, t)?;
            Some(g.mse(v, &velocity_target)?)
        } else {
            None
        };
        Ok((seg, fm))
    }

    /// One optimizer step on a batch. Parameters are left untouched when the
    /// loss is not finite.
    pub fn train_step(&mut self, images: &Tensor, masks: &Tensor) -> Result<StepLosses> {
        let mut g = Graph::new(Mode::Train);
        let (seg, fm) = self.objective(&mut g, images, masks)?;
        let seg_value = g.value(seg).item();
        let (total, fm_value) = match fm {
            Some(fm) => {
                let weighted = g.scale(fm, self.model.config.lambda_fm);
                (g.add(seg, weighted)?, g.value(fm).item())
            }
            None => (seg, 0.0),
        };
        let losses = StepLosses {
            seg: seg_value,
            fm: fm_value,
            total: g.value(total).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { step: self.step + 1 });
        }
        let grads = g.backward(total)?.params();
        let mut next = self.model.params.clone();
        let mut optim = self.optim.clone();
        optim.step(&mut next, &grads)?;
        update_running_stats(&mut next, g.bn_observations(), BN_MOMENTUM)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { step: self.step + 1 });
        }
        self.model.params = next;
        self.optim = optim;
        self.step += 1;
        Ok(losses)
    }

    /// Mean Dice of eval-mode predictions (`p > 0.5`) on `samples`.
    pub fn probe_mdice(&self, samples: &[Sample]) -> Result<f64> {
        probe_mdice(&self.model, samples)
    }
}

/// Mean Dice of the model's eval-mode predictions on `samples`.
pub fn probe_mdice(model: &PolypFlow, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = data::make_batch(&refs)?;
        let p = model.predict(&images, model.config.n_steps)?;
        for b in 0..chunk.len() {
            total += metrics::dice(p.batch_item(b)?.data(), masks.batch_item(b)?.data())?;
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `train_log.csv` and checkpoints go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Keep `checkpoints/epoch_XXXX.safetensors` for every epoch in addition
    /// to `last.safetensors`.
    pub keep_epoch_checkpoints: bool,
}

pub struct TrainReport {
    pub model: PolypFlow,
    pub optim: AdamW,
    pub log: Vec<LogRow>,
    pub step_losses: Vec<StepLosses>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

fn open_log(dir: &Path) -> Result<csv::Writer<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Train a freshly initialized model from `config` on `data`.
pub fn train(config: TrainConfig, data: &dyn SampleSource, opts: &TrainOptions) -> Result<TrainReport> {
    train_from(PolypFlow::new(config)?, data, opts)
}

/// Train `model` (whose config supplies every hyperparameter) on `data`.
pub fn train_from(model: PolypFlow, data: &dyn SampleSource, opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let cfg = model.config.clone();
    let probe: Vec<Sample> = (0..cfg.probe_size.min(data.len()))
        .map(|i| data.get(i))
        .collect::<Result<_>>()?;
    let mut trainer = Trainer::new(model);
    let mut log_writer = opts.out_dir.as_deref().map(open_log).transpose()?;
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good = String::from("<none>");

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut trainer.rng);
        let (mut seg_sum, mut fm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut samples = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
            if cfg.augment {
                samples = samples.iter().map(|s| data::augment(s, &mut trainer.rng)).collect();
            }
            let refs: Vec<&Sample> = samples.iter().collect();
            let (images, masks) = data::make_batch(&refs)?;
            // `NonFinite` may come from the solver, whose step index is an
            // Euler step; report the optimizer step instead.
            let losses = trainer.train_step(&images, &masks).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    step: trainer.step + 1,
                    epoch,
                    last_good: last_good.clone(),
                },
                other => other,
            })?;
            seg_sum += losses.seg;
            fm_sum += losses.fm;
            steps += 1;
            step_losses.push(losses);
        }
        let row = LogRow {
            step: trainer.step,
            epoch,
            loss_seg: seg_sum / steps as f64,
            loss_fm: fm_sum / steps as f64,
            probe_mdice: trainer.probe_mdice(&probe)?,
        };
        if let Some(w) = log_writer.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        log.push(row);
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint::from_model(&trainer.model, Some(&trainer.optim), epoch);
            if opts.keep_epoch_checkpoints {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"));
                ck.save(&path)?;
                checkpoints.push(path);
            }
            let path = dir.join(LAST_CHECKPOINT);
            ck.save(&path)?;
            last_good = path.display().to_string();
        }
    }
    Ok(TrainReport {
        model: trainer.model,
        optim: trainer.optim,
        log,
        step_losses,
        checkpoints,
    })
}
