mod common;

use common::{disk_samples, random_tensor};
use polypflow_core::checkpoint::{load_model, Checkpoint, SCHEMA_VERSION};
use polypflow_core::config::TrainConfig;
use polypflow_core::model::PolypFlow;
use polypflow_core::train::{train, TrainOptions, LAST_CHECKPOINT};
use polypflow_core::Error;
use safetensors::SafeTensors;

fn trained() -> (PolypFlow, polypflow_core::optim::AdamW) {
    let mut cfg = TrainConfig::tiny(16);
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.n_steps = 2;
    let report = train(cfg, &disk_samples(2, 16, 1), &TrainOptions::default()).unwrap();
    (report.model, report.optim)
}

#[test]
fn reload_gives_a_bitwise_identical_forward_pass() {
    let (model, optim) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.safetensors");
    Checkpoint::from_model(&model, Some(&optim), 2).save(&path).unwrap();
    assert!(!path.with_extension("tmp").exists());

    let x = random_tensor(&[2, 3, 16, 16], 3, 0.0, 1.0);
    let before = model.trajectory(&x, 4).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    let after = loaded.trajectory(&x, 4).unwrap();
    for (a, b) in before.states.iter().zip(&after.states) {
        assert!(a.z.data().iter().zip(b.z.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.optim.as_ref(), Some(&optim));
}

#[test]
fn embedded_config_is_the_producing_config() {
    let mut cfg = TrainConfig::tiny(16);
    cfg.lr = 0.1 + 0.2;
    cfg.seed = 99;
    cfg.use_dct = false;
    cfg.lambda_fm = 1.0 / 3.0;
    let model = PolypFlow::new(cfg.clone()).unwrap();
    let bytes = Checkpoint::from_model(&model, None, 0).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, cfg);
    assert!(back.optim.is_none());

    let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
    let meta = header.metadata().clone().unwrap();
    assert_eq!(meta["schema_version"], SCHEMA_VERSION);
    assert_eq!(TrainConfig::parse_text(&meta["config"]).unwrap(), cfg, "config is stored as key = value text");
}

#[test]
fn archive_uses_the_documented_parameter_names() {
    let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
    let bytes = Checkpoint::from_model(&model, None, 0).to_bytes().unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    let names = st.names();
    for needle in [
        "param/backbone.enc1.conv.weight",
        "param/backbone.dec1.up.weight",
        "param/backbone.head.weight",
        "param/field.dctproj.weight",
        "param/field.attn.q.weight",
        "buffer/backbone.enc1.bn.running_mean",
    ] {
        assert!(names.iter().any(|n| *n == needle), "{needle} missing");
    }
}

#[test]
fn foreign_schema_is_a_versioned_error() {
    let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
    let bytes = Checkpoint::from_model(&model, None, 0).to_bytes().unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
    let mut meta = header.metadata().clone().unwrap();
    meta.insert("schema_version".into(), "polypflow-checkpoint/0".into());
    let views: Vec<_> = st.tensors();
    let forged = safetensors::serialize(views, Some(meta)).unwrap();
    match Checkpoint::from_bytes(&forged).unwrap_err() {
        Error::SchemaMismatch { expected, found } => {
            assert_eq!(expected, SCHEMA_VERSION);
            assert_eq!(found, "polypflow-checkpoint/0");
        }
        e => panic!("{e}"),
    }
}

#[test]
fn missing_or_corrupt_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.safetensors");
    let err = load_model(&missing).unwrap_err().to_string();
    assert!(err.contains("absent.safetensors"), "{err}");

    let junk = dir.path().join(LAST_CHECKPOINT);
    std::fs::write(&junk, b"\x08\0\0\0\0\0\0\0{}").unwrap();
    let err = load_model(&junk).unwrap_err().to_string();
    assert!(err.contains("schema") || err.contains(LAST_CHECKPOINT), "{err}");
}

#[test]
fn architecture_mismatch_is_rejected() {
    let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
    let mut ck = Checkpoint::from_model(&model, None, 0);
    ck.config.widths = [6, 8, 16, 32];
    let err = ck.into_model().unwrap_err().to_string();
    assert!(err.contains("has shape [4], expected [6]"), "{err}");
}
