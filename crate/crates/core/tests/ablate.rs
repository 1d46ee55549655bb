mod common;

use common::disk_samples;
use polypflow_core::ablate::{ablate, evaluate_model, AblationConfig, AblationMode, EvalSet, DEFAULT_STEP_GRID};
use polypflow_core::config::TrainConfig;
use polypflow_core::model::PolypFlow;
use polypflow_core::Tensor;

fn model() -> PolypFlow {
    let mut cfg = TrainConfig::tiny(16);
    cfg.batch_size = 4;
    PolypFlow::new(cfg).unwrap()
}

fn eval_sets() -> Vec<EvalSet> {
    vec![
        EvalSet {
            name: "seen".into(),
            samples: disk_samples(3, 16, 1),
        },
        EvalSet {
            name: "unseen".into(),
            samples: disk_samples(2, 16, 2),
        },
    ]
}

#[test]
fn component_grid_has_four_labelled_rows() {
    let report = ablate(&model(), &AblationConfig::components(3), &eval_sets(), AblationMode::Reuse, None).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.config.label.as_str()).collect();
    assert_eq!(labels, ["Backbone", "SA + Backbone", "DCT + Backbone", "SA + DCT + Backbone"]);
    for row in &report.rows {
        let sets: Vec<(&str, usize)> = row.results.iter().map(|r| (r.dataset.as_str(), r.images)).collect();
        assert_eq!(sets, [("seen", 3), ("unseen", 2)]);
    }

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    report.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 2);
    assert!(text.starts_with("label,use_attention,use_dct,n_steps,dataset,images,dice,iou,fbw,sm,em,mae\n"));
    let json = dir.path().join("ablation.json");
    report.write_json(&json).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn step_grid_has_five_rows() {
    let report = ablate(&model(), &AblationConfig::steps(&DEFAULT_STEP_GRID), &eval_sets(), AblationMode::Reuse, None).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.config.n_steps).collect::<Vec<_>>(), [1, 5, 8, 10, 15]);
    assert!(report.rows.iter().all(|r| r.config.use_attention && r.config.use_dct));
}

#[test]
fn empty_grid_is_an_empty_report() {
    let report = ablate(&model(), &[], &eval_sets(), AblationMode::Retrain, None).unwrap();
    assert!(report.rows.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    report.write_csv(&csv).unwrap();
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 1);
}

#[test]
fn row_means_equal_direct_evaluation() {
    let m = model();
    let sets = eval_sets();
    let report = ablate(&m, &AblationConfig::components(2)[1..2], &sets, AblationMode::Reuse, None).unwrap();
    let direct = evaluate_model(&m.with_components(true, false), &sets[0].samples, 2, "seen").unwrap();
    assert_eq!(report.rows[0].results[0].metrics, direct.mean);
}

/// With the gate projection saturated, `A` is exactly 1.0 in every pixel and
/// the gated field must equal the ungated one bit for bit.
#[test]
fn saturated_gate_equals_the_attention_off_path() {
    let mut m = model();
    m.params.zero_prefix("field.attn.proj.weight");
    m.params.set("field.attn.proj.bias", Tensor::full(&[1], 40.0)).unwrap();
    let x = Tensor::stack(&disk_samples(2, 16, 3).iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    for dct in [false, true] {
        let gated = m.with_components(true, dct).trajectory(&x, 4).unwrap();
        let plain = m.with_components(false, dct).trajectory(&x, 4).unwrap();
        assert_eq!(gated, plain, "dct={dct}");
    }
}

#[test]
fn retrain_mode_trains_one_model_per_row() {
    let mut m = model();
    m.config.epochs = 1;
    m.config.n_steps = 1;
    let data = disk_samples(2, 16, 4);
    let grid = AblationConfig::components(1);
    let report = ablate(&m, &grid[..2], &eval_sets(), AblationMode::Retrain, Some(&data)).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.results.iter().all(|d| d.metrics.dice.is_finite())));
    let err = ablate(&m, &grid, &eval_sets(), AblationMode::Retrain, None).unwrap_err();
    assert!(err.to_string().contains("training data"), "{err}");
}
