//! Component and step-count ablations.

use std::path::Path;

use serde::Serialize;

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::metrics::{DatasetReport, ImageMetrics};
use crate::model::PolypFlow;
use crate::train::{self, SampleSource, TrainOptions};

pub const DEFAULT_STEP_GRID: [usize; 5] = [1, 5, 8, 10, 15];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AblationConfig {
    pub label: String,
    pub use_attention: bool,
    pub use_dct: bool,
    pub n_steps: usize,
}

impl AblationConfig {
    /// The four component rows, from the bare backbone field to the full one.
    pub fn components(n_steps: usize) -> Vec<Self> {
        [
            ("Backbone", false, false),
            ("SA + Backbone", true, false),
            ("DCT + Backbone", false, true),
            ("SA + DCT + Backbone", true, true),
        ]
        .into_iter()
        .map(|(label, use_attention, use_dct)| AblationConfig {
            label: label.into(),
            use_attention,
            use_dct,
            n_steps,
        })
        .collect()
    }

    /// The full field evaluated with each step count.
    pub fn steps(steps: &[usize]) -> Vec<Self> {
        steps
            .iter()
            .map(|&n| AblationConfig {
                label: format!("N={n}"),
                use_attention: true,
                use_dct: true,
                n_steps: n,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Evaluate each configuration with the given model's parameters,
    /// switching components off at inference time.
    Reuse,
    /// Train a fresh model per configuration from the base config.
    Retrain,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetMean {
    pub dataset: String,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub config: AblationConfig,
    pub results: Vec<DatasetMean>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One line per (configuration, dataset).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "label", "use_attention", "use_dct", "n_steps", "dataset", "images", "dice", "iou", "fbw", "sm", "em", "mae",
        ])?;
        for row in &self.rows {
            for r in &row.results {
                let c = &row.config;
                let m = &r.metrics;
                w.write_record([
                    c.label.clone(),
                    c.use_attention.to_string(),
                    c.use_dct.to_string(),
                    c.n_steps.to_string(),
                    r.dataset.clone(),
                    r.images.to_string(),
                    m.dice.to_string(),
                    m.iou.to_string(),
                    m.fbw.to_string(),
                    m.sm.to_string(),
                    m.em.to_string(),
                    m.mae.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-image metrics of `model` on `samples` with `n_steps` Euler steps.
pub fn evaluate_model(model: &PolypFlow, samples: &[Sample], n_steps: usize, name: &str) -> Result<DatasetReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(model.config.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = data::make_batch(&refs)?;
        let p = model.predict(&images, n_steps)?;
        for (b, s) in chunk.iter().enumerate() {
            let (_, h, w) = (s.mask.shape()[0], s.mask.shape()[1], s.mask.shape()[2]);
            let m = ImageMetrics::compute(p.batch_item(b)?.data(), s.mask.data(), h, w)?;
            rows.push((s.name.clone(), m));
        }
    }
    Ok(DatasetReport::new(name, rows))
}

/// Evaluate every configuration of `grid` on every evaluation set. An empty
/// grid yields an empty report.
pub fn ablate(
    base: &PolypFlow,
    grid: &[AblationConfig],
    eval_sets: &[EvalSet],
    mode: AblationMode,
    train_data: Option<&dyn SampleSource>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let model = match mode {
            AblationMode::Reuse => base.with_components(cfg.use_attention, cfg.use_dct),
            AblationMode::Retrain => {
                let data = train_data
                    .ok_or_else(|| Error::Invalid("retrain ablation needs training data".into()))?;
                let mut config = base.config.clone();
                config.use_attention = cfg.use_attention;
                config.use_dct = cfg.use_dct;
                config.n_steps = cfg.n_steps;
                train::train(config, data, &TrainOptions::default())?.model
            }
        };
        let results = eval_sets
            .iter()
            .map(|set| {
                let report = evaluate_model(&model, &set.samples, cfg.n_steps, &set.name)?;
                Ok(DatasetMean {
                    dataset: set.name.clone(),
                    images: report.rows.len(),
                    metrics: report.mean,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            config: cfg.clone(),
            results,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn grids_have_table_shape() {
        let c = AblationConfig::components(10);
        assert_eq!(c.len(), 4);
        assert_eq!((c[0].use_attention, c[0].use_dct), (false, false));
        assert_eq!((c[3].use_attention, c[3].use_dct), (true, true));
        let s = AblationConfig::steps(&DEFAULT_STEP_GRID);
        assert_eq!(s.iter().map(|c| c.n_steps).collect::<Vec<_>>(), vec![1, 5, 8, 10, 15]);
    }

    #[test]
    fn empty_grid_is_an_empty_report() {
        let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
        let report = ablate(&model, &[], &[], AblationMode::Retrain, None).unwrap();
        assert!(report.rows.is_empty());
    }
}
