use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn losia(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_losia"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn losia")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"
task = "modular_add"
vocab = 11
layers = 2
d_model = 16
heads = 2
d_ff = 24
p = 0.25
slot = 5
steps = 30
batch_size = 8
eval_batch_size = 32
lr = 3e-3
method = "losia"
"#;

#[test]
fn select_writes_the_chosen_block() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("q.csv");
    fs::write(&scores, "3,3\n4,0\n").unwrap();
    let text = ok(&losia(
        &["select", "--scores", scores.to_str().unwrap(), "--p", "0.5"],
        &[],
    ));
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["x_s"], serde_json::json!([1]));
    assert_eq!(doc["y_s"], serde_json::json!([0]));
    assert_eq!(doc["score"], 4.0);

    fs::write(&scores, "1,2\n3\n").unwrap();
    assert!(
        !losia(&["select", "--scores", scores.to_str().unwrap()], &[])
            .status
            .success()
    );
}

#[test]
fn schedule_dump_lists_every_layer_and_step() {
    let text = ok(&losia(
        &[
            "schedule", "dump", "--layers", "2", "--slot", "3", "--steps", "7",
        ],
        &[],
    ));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,layer,phase,multiplier");
    assert_eq!(lines.len(), 15);
    assert!(lines.contains(&"3,1,RESELECT_NOW,0"));
}

#[test]
fn memory_defaults_to_llama_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&losia(
        &["analyze", "memory", "--out", dir.path().to_str().unwrap()],
        &[],
    ));
    assert!(text.lines().count() >= 4);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("memory.json")).unwrap()).unwrap();
    assert_eq!(doc["records"][0]["exact"]["trainable"], 159_907_840.0);
}

#[test]
fn cl_metrics_from_a_stage_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(
        &path,
        "stage,task0,task1,task2,task3,task4\n\
         0,63.72,81.50,84.13,61.05,77.19\n\
         1,63.72,78.29,77.52,47.80,68.51\n\
         2,61.89,79.49,70.76,48.26,67.88\n\
         3,61.11,79.82,83.24,48.26,68.51\n\
         4,60.37,79.38,82.54,59.93,71.82\n\
         5,56.43,77.75,81.99,56.04,80.19\n",
    )
    .unwrap();
    let text = ok(&losia(
        &["analyze", "cl", "--matrix", path.to_str().unwrap()],
        &[],
    ));
    let doc: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert!((doc["ap"].as_f64().unwrap() - 70.48).abs() < 0.01);
    assert!((doc["bwt"].as_f64().unwrap() + 3.54).abs() < 0.01);

    fs::write(&path, "task0\n40\n70\n").unwrap();
    let text = ok(&losia(
        &["analyze", "cl", "--matrix", path.to_str().unwrap()],
        &[],
    ));
    assert!(text.contains("\"bwt\":null"), "{text}");
}

#[test]
fn train_writes_outputs_under_the_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path().join("runs");
    ok(&losia(
        &["train", "--config", cfg.to_str().unwrap(), "--seed", "2"],
        &[("LOSIA_OUT", &root)],
    ));
    let run = root.join("modular_add-losia-seed2");
    for f in [
        "metrics.csv",
        "eval.csv",
        "selections.csv",
        "summary.json",
        "config.toml",
        "selection_frequency.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoint").join("manifest.json").is_file());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 31);

    // A second run with the same seed reproduces the digest.
    let again = dir.path().join("again");
    ok(&losia(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "2",
            "--out",
            again.to_str().unwrap(),
        ],
        &[],
    ));
    let digest = |p: &Path| {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.join("summary.json")).unwrap()).unwrap();
        v["digest"].as_str().unwrap().to_owned()
    };
    assert_eq!(digest(&run), digest(&again));
}

#[test]
fn continual_writes_a_stage_table() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.toml");
    let b = dir.path().join("b.toml");
    fs::write(&a, TINY).unwrap();
    fs::write(&b, format!("{TINY}add_offset = 3\n")).unwrap();
    let out = dir.path().join("cl");
    ok(&losia(
        &[
            "continual",
            "--configs",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    ));
    let table = fs::read_to_string(out.join("cl_matrix.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "stage,task0,task1");
    assert_eq!(table.lines().count(), 4);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cl_metrics.json")).unwrap()).unwrap();
    assert!(m["bwt"].is_number());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{TINY}learning_rate = 0.1\n")).unwrap();
    let out = losia(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}
