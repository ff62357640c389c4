//! Drives the `mmfpt` binary end to end on a micro configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"
[[modality]]
name = "R"
kind = "dense"
channels = 3

[[modality]]
name = "D"
kind = "dense"
channels = 1

[[modality]]
name = "L"
kind = "sparse"
channels = 1
spatial = "pointset"

[[modality]]
name = "E"
kind = "sparse"
channels = 1

[backbone]
depth = 2
d_model = 8
heads = 2
mlp_ratio = 2
patch_size = 4
prompt_count = 2
bottleneck = 4
fpt_blocks = 1
num_classes = 5
image_size = [16, 16]

[train]
seed = 3
epochs = 1

[data]
radius = [3.0, 6.0]
"#;

fn mmfpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfpt")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_on_a_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("micro.toml");
    fs::write(&config, MICRO).unwrap();
    let (data_a, data_b, eval_data, run, report) =
        (root.join("a"), root.join("b"), root.join("eval"), root.join("run"), root.join("report"));

    let missing_seed = mmfpt(&["generate-data", "--config", s(&config), "--out", s(&data_a)]);
    assert_eq!(code(&missing_seed), 2);

    for out in [&data_a, &data_b] {
        let r = mmfpt(&["generate-data", "--config", s(&config), "--out", s(out), "--seed", "11", "--count", "10"]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    for file in ["index.json", "data.bin"] {
        assert_eq!(fs::read(data_a.join(file)).unwrap(), fs::read(data_b.join(file)).unwrap(), "{file}");
    }
    let index: serde_json::Value = serde_json::from_slice(&fs::read(data_a.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["scene_count"], 10);
    assert_eq!(index["scenes"].as_array().unwrap().len(), 10);
    let r = mmfpt(&["generate-data", "--config", s(&config), "--out", s(&eval_data), "--seed", "12", "--count", "4"]);
    assert_eq!(code(&r), 0);

    let r = mmfpt(&["train", "--config", s(&config), "--dataset", s(&data_a), "--out", s(&run), "--regime", "mms"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for file in ["checkpoint.json", "checkpoint.bin", "loss.csv", "config.toml", "train.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# config_hash="), "{header}");
    assert_eq!(lines.next(), Some("step,loss,mask"));
    assert_eq!(lines.count(), 5, "10 scenes at batch 2 for one epoch");
    let hash = header.trim_start_matches("# config_hash=").split(' ').next().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    let r = mmfpt(&[
        "eval", "--config", s(&config), "--checkpoint", s(&run), "--dataset", s(&eval_data), "--out", s(&report),
        "--matrix",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash}")));
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 17 + 1);
    assert!(rows[17].starts_with("mean,"));
    assert_eq!(rows.iter().filter(|l| l.starts_with("condition,")).count(), 12);
    assert_eq!(rows.iter().filter(|l| l.starts_with("failure,")).count(), 5);
    assert!(report.join("report.txt").exists() && report.join("report.json").exists());

    let single = root.join("single");
    let r = mmfpt(&[
        "eval", "--config", s(&config), "--checkpoint", s(&run), "--dataset", s(&eval_data), "--out", s(&single),
        "--condition", "D,E",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(single.join("report.csv")).unwrap().lines().count(), 4);

    let r = mmfpt(&[
        "eval", "--config", s(&config), "--checkpoint", s(&run), "--dataset", s(&eval_data), "--out", s(&single),
        "--condition", "R,X",
    ]);
    assert_eq!(code(&r), 2);
    let r = mmfpt(&[
        "eval", "--config", s(&config), "--checkpoint", s(&run), "--dataset", s(&eval_data), "--out", s(&single),
        "--condition", "L,E",
    ]);
    assert_eq!(code(&r), 2, "no dense modality present");

    let r = mmfpt(&[
        "eval", "--config", s(&config), "--checkpoint", s(&root.join("nope")), "--dataset", s(&eval_data),
        "--out", s(&single),
    ]);
    assert_eq!(code(&r), 4);

    let blob = data_b.join("data.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let r = mmfpt(&["train", "--config", s(&config), "--dataset", s(&data_b), "--out", s(&root.join("run2"))]);
    assert_eq!(code(&r), 4);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nsede = 1\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&mmfpt(&["generate-data", "--config", s(&bad), "--out", s(&out), "--seed", "1"])), 2);
    fs::write(&bad, "[eval]\nseverity = 2.0\n").unwrap();
    assert_eq!(code(&mmfpt(&["generate-data", "--config", s(&bad), "--out", s(&out), "--seed", "1"])), 2);
    assert_eq!(code(&mmfpt(&["train", "--dataset", s(&out), "--out", s(&out), "--regime", "sometimes"])), 2);
    assert_eq!(code(&mmfpt(&["no-such-command"])), 2);
    assert_eq!(code(&mmfpt(&["eval", "--matrix"])), 2);
}
