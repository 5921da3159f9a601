use std::fs;
use std::path::{Path, PathBuf};

use assert_cmd::Command;
use spurprune::autodiff::{Activation, DenseLayer, DenseNetwork, Tensor};
use spurprune::datasets::{save_dataset, LabeledDataset};

const SMALL: &str = r#"
seed = 1
hidden = [16, 16]

[data]
kind = "images"
test_per_class = 300

[data.train]
per_class = 60

[erm]
epochs = 2

[masking]
epochs = 2

[finetune]
epochs = 2
"#;

const SMALL_MOONS: &str = r#"
hidden = [8, 8]

[data]
kind = "moons"
test_n = 100

[data.train]
n = 80

[erm]
epochs = 2

[masking]
epochs = 2

[finetune]
epochs = 2
"#;

fn bin() -> Command {
    Command::cargo_bin("spurprune").unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn run(args: &[&str]) {
    bin().args(args).assert().success();
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "run.toml", SMALL);
    let p = |s: &str| d.join(s).display().to_string();
    let cfg = cfg.display().to_string();
    run(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    run(&["train-erm", "--config", &cfg, "--data", &p("data"), "--out", &p("erm")]);
    run(&["cluster", "--model", &p("erm/model.json"), "--data", &p("data"), "--k", "4", "--out", &p("clusters")]);
    run(&[
        "prune", "--config", &cfg, "--model", &p("erm/model.json"), "--data", &p("data"), "--clusters",
        &p("clusters/clusters.json"), "--out", &p("prune"),
    ]);
    run(&[
        "finetune", "--config", &cfg, "--subnet", &p("prune/subnetwork.json"), "--taskdata", &p("prune/taskdata.csv"),
        "--epochs", "1", "--out", &p("finetune"),
    ]);
    run(&["evaluate", "--config", &cfg, "--model", &p("finetune/model.json"), "--data", &p("data"), "--out", &p("eval")]);

    for f in ["data/train.csv", "data/test.csv", "data/config.toml", "erm/curve_erm.csv", "clusters/purity.json"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    for f in ["mask.json", "layer_masks.json", "taskdata.json", "curve_mask.csv"] {
        assert!(d.join("prune").join(f).is_file(), "{f}");
    }
    assert!(d.join("finetune/curve_finetune.csv").is_file());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    let avg = metrics["avg"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));
    let attrs = metrics["attributes"].as_object().unwrap();
    assert_eq!(attrs.len(), 2);
    for (name, m) in attrs {
        assert!(m["flip_rate"].is_number(), "{name} lacks a flip rate");
        assert!(d.join(format!("eval/groups_{name}.csv")).is_file());
    }
    let clusters: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("clusters/clusters.json")).unwrap()).unwrap();
    assert_eq!(clusters["k"], 4);
    assert_eq!(clusters["assignments"].as_array().unwrap().len(), 120);
}

#[test]
fn unknown_config_key_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "sed = 3\n");
    let out = bin()
        .args(["gen-data", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("spurprune: error:") && err.contains("sed"), "{err}");
}

#[test]
fn missing_input_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train-erm", "--data", tmp.path().join("nowhere").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().trim_end().lines().count(), 1);
}

#[test]
fn ablate_writes_one_row_per_setting_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let out = tmp.path().join("ablate");
    run(&["ablate", "--config", cfg.to_str().unwrap(), "--settings", "1,3,7", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(data_rows(&out.join("ablation.csv")), 6);
}

#[test]
fn sequential_flag_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&["variants", "--config", cfg, "--seeds", "2", "--out", a.to_str().unwrap()]);
    run(&["--sequential", "variants", "--config", cfg, "--seeds", "2", "--out", b.to_str().unwrap()]);
    let ra = fs::read_to_string(a.join("variants.csv")).unwrap();
    assert_eq!(ra, fs::read_to_string(b.join("variants.csv")).unwrap());
    assert_eq!(ra.lines().count() - 1, 6);
}

#[test]
fn evaluate_scores_a_perfect_model_at_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    fs::create_dir_all(&dir).unwrap();
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let attr: Vec<usize> = (0..40).map(|i| (i / 2) % 2).collect();
    let x = Tensor::matrix(40, 1, labels.iter().map(|&y| y as f64).collect()).unwrap();
    let ds = LabeledDataset::new(x, labels, 2).unwrap().with_attribute("marker", attr, 2).unwrap();
    save_dataset(&ds, &dir.join("train.csv")).unwrap();
    save_dataset(&ds, &dir.join("test.csv")).unwrap();
    // h = relu(x); logits = (0.5 - h, h - 0.5)
    let net = DenseNetwork::new(
        vec![
            DenseLayer {
                weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                bias: Tensor::vector(vec![0.0]),
                activation: Activation::Relu,
            },
            DenseLayer {
                weight: Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap(),
                bias: Tensor::vector(vec![0.5, -0.5]),
                activation: Activation::Identity,
            },
        ],
        0,
    )
    .unwrap();
    let model = tmp.path().join("model.json");
    net.save_json(&model).unwrap();
    let out = tmp.path().join("eval");
    let assert = bin()
        .args(["evaluate", "--model", model.to_str().unwrap(), "--data", dir.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .assert()
        .success();
    let stdout = String::from_utf8(assert.get_output().stdout.clone()).unwrap();
    assert!(stdout.contains("avg 1.0000"), "{stdout}");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["avg"], 1.0);
    assert_eq!(metrics["attributes"]["marker"]["wga"], 1.0);
    assert_eq!(metrics["attributes"]["marker"]["uag"], 0.0);
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    run(&["ablate", "--config", cfg.to_str().unwrap(), "--settings", "1", "--out", first.to_str().unwrap()]);
    let effective = first.join("config.toml");
    run(&["ablate", "--config", effective.to_str().unwrap(), "--settings", "1", "--out", second.to_str().unwrap()]);
    assert_eq!(
        fs::read_to_string(first.join("ablation.csv")).unwrap(),
        fs::read_to_string(second.join("ablation.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(effective).unwrap(), fs::read_to_string(second.join("config.toml")).unwrap());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let root = tmp.path().join("root");
    bin()
        .env("SPURPRUNE_OUT", &root)
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .assert()
        .success();
    assert!(root.join("gen-data/train.csv").is_file());
}

#[test]
fn config_output_key_is_relative_to_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("output = \"here\"\n{SMALL}");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    bin().env_remove("SPURPRUNE_OUT").args(["gen-data", "--config", cfg.to_str().unwrap()]).assert().success();
    assert!(tmp.path().join("here/test.csv").is_file());
}

#[test]
fn sweep_and_moons_demo_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let sweep = tmp.path().join("sweep");
    run(&["sweep", "--config", cfg.to_str().unwrap(), "--ratios", "0.3,0.9", "--out", sweep.to_str().unwrap()]);
    assert_eq!(data_rows(&sweep.join("sweep.csv")), 2);
    assert!(fs::read_to_string(sweep.join("sweep.svg")).unwrap().starts_with("<svg"));

    let moons = write_config(tmp.path(), "moons.toml", SMALL_MOONS);
    let demo = tmp.path().join("demo");
    run(&["demo-moons", "--config", moons.to_str().unwrap(), "--resolution", "12", "--out", demo.to_str().unwrap()]);
    assert_eq!(data_rows(&demo.join("flip_rates.csv")), 3);
    for name in ["erm", "random_mask", "prusc"] {
        assert!(demo.join(format!("boundary_{name}.svg")).is_file());
        assert_eq!(data_rows(&demo.join(format!("raster_{name}.csv"))), 144);
    }
}
