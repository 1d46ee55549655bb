//! Compiles a small C program against the generated header and the static
//! library, then checks its output against the Rust library.

use std::path::PathBuf;
use std::process::Command;

use polypflow_core::checkpoint::Checkpoint;
use polypflow_core::config::TrainConfig;
use polypflow_core::model::PolypFlow;
use polypflow_core::Tensor;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "polypflow.h"

int main(int argc, char **argv) {
    PfModel *model = NULL;
    if (pf_model_load("/nonexistent/model.safetensors", &model) != PF_STATUS_IO || model != NULL) return 10;
    printf("error %s\n", pf_last_error());

    if (pf_model_load(argv[1], &model) != PF_STATUS_OK) return 11;
    size_t s = pf_model_image_size(model);
    double image[3 * 16 * 16];
    for (size_t i = 0; i < 3 * s * s; i++) image[i] = (double)(i % 7) / 6.0;
    double probs[16 * 16];
    if (pf_model_predict(model, image, 1, 3, probs, s * s) != PF_STATUS_OK) return 12;
    for (size_t i = 0; i < s * s; i++) printf("%.17g\n", probs[i]);
    pf_model_free(model);

    PfMetrics m;
    if (pf_image_metrics(probs, probs, 1, 1, &m) != PF_STATUS_OK) return 13;
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_matches_rust_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = PolypFlow::new(TrainConfig::tiny(16)).unwrap();
    let ckpt = dir.path().join("m.safetensors");
    Checkpoint::from_model(&model, None, 0).save(&ckpt).unwrap();

    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let lib = target_dir().join("libpolypflow_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let cc = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler");
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));

    let run = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8(run.stdout).unwrap();
    let mut lines = stdout.lines();
    let error = lines.next().unwrap();
    assert!(error.starts_with("error ") && error.contains("/nonexistent/model.safetensors"), "{error}");

    let got: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    let image: Vec<f64> = (0..3 * 16 * 16).map(|i| (i % 7) as f64 / 6.0).collect();
    let want = model.predict(&Tensor::from_vec(&[1, 3, 16, 16], image).unwrap(), 3).unwrap();
    assert_eq!(got, want.data());
}
