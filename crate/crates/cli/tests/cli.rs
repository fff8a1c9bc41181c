use std::path::Path;
use std::process::Command;

fn run(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_predopt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "predopt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let files = run(&["gen", "--items", "2", "--periods", "4", "--count", "2", "--seed", "3", "--out", "inst"], d);
    assert_eq!(files.lines().count(), 2);
    assert!(d.join("inst/mclsp-3.json").exists());

    let solved = run(&["solve", "inst/mclsp-3.json", "--trace", "trace.csv", "--lp", "model.lp"], d);
    assert!(solved.contains("\"Optimal\""), "{solved}");
    assert!(std::fs::read_to_string(d.join("trace.csv")).unwrap().starts_with("elapsed_s,incumbent"));
    let heur = run(&["solve", "inst/mclsp-3.json", "--heuristic"], d);
    assert!(heur.contains("\"Feasible\""), "{heur}");

    run(&["gen", "--items", "2", "--periods", "4", "--count", "6", "--dataset", "train.jsonl"], d);
    run(
        &["train", "--dataset", "train.jsonl", "--out", "model.ckpt", "--epochs", "2", "--hidden", "4", "--batch-size", "3"],
        d,
    );
    let pred = run(&["predict", "inst/mclsp-3.json", "--checkpoint", "model.ckpt"], d);
    assert!(pred.contains("final_pred_level"), "{pred}");
    let probs = run(&["predict", "inst/mclsp-3.json", "--checkpoint", "model.ckpt", "--probs"], d);
    assert!(probs.contains("probs"));

    std::fs::write(
        d.join("exp.json"),
        r#"{"eval": {"name": "small", "generator": {"seed": 50, "family": "mclsp", "items": 2, "periods": 4},
            "count": 2, "checkpoint": "model.ckpt"}}"#,
    )
    .unwrap();
    let table = run(&["eval", "--config", "exp.json", "--out", "res"], d);
    assert!(table.contains("optGapPredOpt(%)"), "{table}");
    let report = run(&["report", "res", "res"], d);
    assert!(report.contains("timeImpPredOpt"));
    assert!(d.join("res/instances.csv").exists());
}

#[test]
fn dimension_mismatch_is_reported_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["gen", "--items", "2", "--periods", "3", "--count", "3", "--dataset", "t.jsonl"], d);
    run(&["train", "--dataset", "t.jsonl", "--out", "m.ckpt", "--epochs", "1", "--hidden", "2"], d);
    std::fs::write(
        d.join("exp.json"),
        r#"{"generator": {"seed": 1, "family": "mclsp", "items": 3, "periods": 3, "cap_ratio": 10.0}, "count": 2, "checkpoint": "m.ckpt"}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_predopt"))
        .args(["eval", "--config", "exp.json", "--out", "r"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
    assert!(!d.join("r").exists());
}
