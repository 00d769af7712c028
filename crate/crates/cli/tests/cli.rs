use std::path::Path;
use std::process::{Command, Output};

use glioma_core::io::{predictions_to_csv, DatasetManifest, GradePrediction, Prediction};

fn glioma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glioma"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn phantoms(dir: &Path, n: &str, seed: &str) {
    let out = glioma(&["phantom-gen", "--out", s(dir), "--n", n, "--seed", seed]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn phantom_gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    phantoms(&a, "8", "7");
    phantoms(&b, "8", "7");
    let read = |d: &Path| std::fs::read(d.join("manifest.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let m = DatasetManifest::load(a.join("manifest.csv")).unwrap();
    assert_eq!(m.entries.len(), 8);
    assert!(m.entries.iter().all(|e| e.split.is_some()));
}

#[test]
fn evaluate_scores_perfect_predictions_as_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, "8", "3");
    let manifest = DatasetManifest::load(data.join("manifest.csv")).unwrap();
    // masks are resolved relative to the predictions table, which sits next to the manifest
    let rows: Vec<Prediction> = manifest
        .entries
        .iter()
        .map(|e| Prediction {
            patient_id: e.patient_id.clone(),
            mask: Some(e.mask.clone()),
            grade: Some(GradePrediction {
                probs: if e.grade == 0 { [1.0, 0.0] } else { [0.0, 1.0] },
                grade: e.grade,
            }),
        })
        .collect();
    let table = data.join("perfect.csv");
    std::fs::write(&table, predictions_to_csv(&rows).unwrap()).unwrap();
    let out_dir = tmp.path().join("eval");
    let out = glioma(&[
        "evaluate",
        "--data",
        s(&data.join("manifest.csv")),
        "--predictions",
        s(&table),
        "--out",
        s(&out_dir),
        "--run-id",
        "perfect",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    for metric in ["accuracy", "precision", "recall", "specificity", "f1", "dice", "miou"] {
        assert!(report.contains(&format!("perfect,{metric},1,")), "{metric} in\n{report}");
    }
    let confusion = std::fs::read_to_string(out_dir.join("confusion.csv")).unwrap();
    assert_eq!(confusion, "actual\\predicted,HGG,LGG\nHGG,6,0\nLGG,0,2\n");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    // configuration problems
    assert_eq!(code(&glioma(&["train-seg", "--out", s(&out_dir)])), 1);
    assert_eq!(code(&glioma(&["gradcheck", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&glioma(&["gradcheck", "--filter", "no_such_op"])), 1);
    assert_eq!(code(&glioma(&["not-a-command"])), 1);
    // missing or malformed data
    let missing = tmp.path().join("missing.csv");
    assert_eq!(code(&glioma(&["train-seg", "--out", s(&out_dir), "--data", s(&missing)])), 2);
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "not,a,manifest\n").unwrap();
    assert_eq!(code(&glioma(&["train-seg", "--out", s(&out_dir), "--data", s(&bad)])), 2);
    // success
    assert_eq!(code(&glioma(&["gradcheck", "--seeds", "1", "--filter", "volcore/add"])), 0);
    assert_eq!(code(&glioma(&["--help"])), 0);
}

#[test]
fn a_diverging_run_exits_with_the_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, "8", "1");
    let out_dir = tmp.path().join("seg");
    let out = glioma(&[
        "train-seg",
        "--data",
        s(&data.join("manifest.csv")),
        "--out",
        s(&out_dir),
        "--epochs",
        "3",
        "--lr",
        "1e30",
        "--no-augment",
        "--set",
        "unet.depth=2",
        "--set",
        "unet.base_channels=2",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // artifacts of the best epoch are still written
    assert!(out_dir.join("segmenter.ckpt").exists());
    assert!(std::fs::read_to_string(out_dir.join("summary.txt")).unwrap().contains("diverged"));
}

#[test]
fn an_echo_replays_only_into_its_own_command() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, "8", "2");
    let echo = data.join("config_echo.txt");
    let text = std::fs::read_to_string(&echo).unwrap();
    assert!(text.starts_with("command = phantom-gen\n"));
    let out = glioma(&["gradcheck", "--config", s(&echo)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom-gen"));

    let again = tmp.path().join("again");
    let out = glioma(&["phantom-gen", "--out", s(&again), "--config", s(&echo)]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(data.join("manifest.csv")).unwrap(),
        std::fs::read(again.join("manifest.csv")).unwrap()
    );
}

#[test]
fn predict_without_a_classifier_writes_masks_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    phantoms(&data, "8", "5");
    let manifest = data.join("manifest.csv");
    let seg = tmp.path().join("seg");
    let out = glioma(&[
        "train-seg",
        "--data",
        s(&manifest),
        "--out",
        s(&seg),
        "--epochs",
        "1",
        "--set",
        "unet.depth=2",
        "--set",
        "unet.base_channels=2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pred = tmp.path().join("pred");
    let ckpt = seg.join("segmenter.ckpt");
    let out = glioma(&["predict", "--data", s(&manifest), "--segmenter", s(&ckpt), "--out", s(&pred), "--split", "val"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = glioma_core::io::load_predictions(pred.join("predictions.csv")).unwrap();
    assert_eq!(rows.len(), 2, "8 cases split 6/2");
    for r in &rows {
        assert!(r.grade.is_none());
        let mask = glioma_core::io::read_volume(pred.join(r.mask.as_ref().unwrap())).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let eval = tmp.path().join("eval");
    let out = glioma(&["evaluate", "--data", s(&manifest), "--predictions", s(&pred.join("predictions.csv")), "--out", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(report.contains("eval,dice,"));
    assert!(!eval.join("confusion.csv").exists());
}
