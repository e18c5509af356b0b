use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffpool::network::{build_model, save_model, InitSpec, LayerConfig};
use diffpool::{ActivationKind, Rng};

const MULTISPEAKER_SEED42: &str = "7c25110fef224fad50535174b1ebb94a2121bf78c2d57435779555351ac29fed";
const CLOSED_REGION_SEED42: &str = "f8aa85932967e082a435d369441df1627b3d7477034aaacf2fdc293f736a8e84";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffpool"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no '{key}' in:\n{stdout}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, task: &str, extra: &[&str]) -> String {
    let mut args = vec!["gen-data", "--task", task, "--seed", "42", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn small_multispeaker(dir: &Path) {
    gen(dir, "multispeaker", &["--n-per-speaker", "200"]);
}

fn train(data: &Path, out: &Path, kind: &str, extra: &[&str]) -> (String, PathBuf) {
    let mut args = vec!["train", "--model", kind, "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    let model = PathBuf::from(field(&stdout, "model"));
    (stdout, model)
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out_a = gen(&a, "multispeaker", &[]);
    gen(&b, "multispeaker", &[]);
    for f in ["data.csv", "manifest.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(field(&out_a, "checksum"), MULTISPEAKER_SEED42);
}

#[test]
fn closed_region_golden_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), "closed-region", &[]);
    assert_eq!(field(&out, "checksum"), CLOSED_REGION_SEED42);
}

#[test]
fn gen_data_refuses_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = run(&["gen-data", "--task", "closed-region", "--seed", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("data.csv").exists());
    ok(&["gen-data", "--task", "closed-region", "--seed", "1", "--out", s(tmp.path()), "--force"]);
    assert!(tmp.path().join("data.csv").exists());
}

#[test]
fn missing_flag_is_usage_error() {
    let out = run(&["gen-data", "--task", "closed-region", "--out", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_override_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--task",
        "closed-region",
        "--seed",
        "1",
        "--out",
        s(tmp.path()),
        "--set",
        "data.no_such_field=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_without_touching_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_multispeaker(&data);
    let csv_before = fs::read(data.join("data.csv")).unwrap();
    let (stdout, model) = train(&data, &tmp.path().join("runs"), "dnn", &["--epochs", "2"]);
    let out_dir = PathBuf::from(field(&stdout, "out_dir"));
    let name = out_dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("train-") && name.len() == "train-".len() + 12, "{name}");
    for f in ["config.json", "model.json", "train_report.csv", "train_report.json", "metrics.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(out_dir.join("train_report.csv")).unwrap();
    assert!(report.starts_with("epoch,lr,train_loss,valid_error\n"));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["train"]["max_epochs"], 2);

    // A plain DNN has no pooling parameters.
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(model).unwrap()).unwrap();
    for layer in model["layer_configs"].as_array().unwrap() {
        assert_eq!(layer["kind"], "affine");
    }
    assert_eq!(fs::read(data.join("data.csv")).unwrap(), csv_before);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_multispeaker(&data);
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"max_epochs": 5, "initial_lr": 0.02}}"#).unwrap();
    let (stdout, _) = train(&data, &tmp.path().join("runs"), "lp", &["--config", s(&cfg), "--epochs", "1"]);
    let out_dir = PathBuf::from(field(&stdout, "out_dir"));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["config"]["train"]["max_epochs"], 1);
    assert_eq!(echoed["config"]["train"]["initial_lr"], 0.02);
}

#[test]
fn non_finite_training_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "closed-region", &[]);
    let csv = fs::read_to_string(data.join("data.csv")).unwrap();
    let blown: Vec<String> = csv
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols[1] == "train" {
                format!("{},{},{},1e308,-1e308", cols[0], cols[1], cols[2])
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(data.join("data.csv"), blown.join("\n") + "\n").unwrap();
    let out = run(&[
        "train",
        "--model",
        "lp",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("runs")),
        "--lr",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn adapt_runs_and_rejects_incompatible_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_multispeaker(&data);
    let (_, lp) = train(&data, &tmp.path().join("runs"), "lp", &["--epochs", "2"]);
    let (_, gauss) = train(&data, &tmp.path().join("runs"), "gauss", &["--epochs", "1"]);

    let out = run(&[
        "adapt",
        "--model",
        s(&gauss),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("adapt")),
        "--subset",
        "rho",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let model_before = fs::read(&lp).unwrap();
    let stdout = ok(&[
        "adapt",
        "--model",
        s(&lp),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("adapt")),
        "--subset",
        "rho,lhuc",
        "--sweep",
        "50,all",
        "--repeats",
        "1",
    ]);
    assert_eq!(fs::read(&lp).unwrap(), model_before);
    let out_dir = PathBuf::from(field(&stdout, "out_dir"));
    let report = fs::read_to_string(out_dir.join("adapt_report.csv")).unwrap();
    assert!(report.starts_with("speaker,sweep_point,seed,iteration,error\n"));
    assert!(out_dir.join("histograms.csv").exists());
    assert!(out_dir.join("adapt_summary.json").exists());
    assert!(fs::read_dir(out_dir.join("models")).unwrap().count() > 0);

    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["config"]["adapt"]["lr"], 0.8);
    assert_eq!(echoed["config"]["adapt"]["iterations"], 3);
    assert_eq!(echoed["config"]["adapt"]["layers"], serde_json::Value::Null);
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = ok(&["gradcheck", "--op", "lp", "--trials", "200"]);
    let b = ok(&["gradcheck", "--op", "lp", "--trials", "200"]);
    assert_eq!(a, b);
    assert!(a.contains("PASS lp"));
    let all = ok(&["gradcheck", "--op", "all", "--trials", "20", "--seed", "3"]);
    for op in ["lp", "gauss", "lhuc", "model"] {
        assert!(all.contains(&format!("PASS {op}")), "{all}");
    }
    assert_eq!(run(&["gradcheck", "--op", "maxout"]).status.code(), Some(2));
}

fn lp_model(path: &Path, units: usize, seed: u64) {
    let layers = vec![
        LayerConfig::LpPool {
            in_dim: 4,
            units,
            pool_size: 5,
            normalize: false,
        },
        LayerConfig::LpPool {
            in_dim: units / 5,
            units: 15,
            pool_size: 5,
            normalize: false,
        },
        LayerConfig::Affine {
            in_dim: 3,
            out_dim: 2,
            activation: ActivationKind::Softmax,
        },
    ];
    let model = build_model(&layers, &mut Rng::new(seed), &InitSpec::default()).unwrap();
    save_model(&model, path).unwrap();
}

#[test]
fn inspect_untrained_lp_model() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.json");
    lp_model(&model, 20, 1);
    let stdout = ok(&["inspect", "--model", s(&model), "--out", s(&tmp.path().join("inspect"))]);
    let out_dir = PathBuf::from(field(&stdout, "out_dir"));
    let csv = fs::read_to_string(out_dir.join("histograms.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,param,bin_low,bin_high,count_before,count_after"));
    let mut mass = [0usize; 2];
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        let layer: usize = c[0].parse().unwrap();
        let (lo, hi): (f64, f64) = (c[2].parse().unwrap(), c[3].parse().unwrap());
        let count: f64 = c[4].parse().unwrap();
        assert_eq!(c[1], "p");
        if count > 0.0 {
            assert!(lo <= 2.0 && 2.0 <= hi, "mass outside the bin of 2: {line}");
        }
        mass[layer] += count as usize;
    }
    // Counts sum to the pool count of each layer.
    assert_eq!(mass, [4, 3]);
}

#[test]
fn inspect_rejects_mismatched_architectures() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    lp_model(&a, 20, 1);
    lp_model(&b, 25, 1);
    let out = run(&[
        "inspect",
        "--model",
        s(&a),
        "--model-after",
        s(&b),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
