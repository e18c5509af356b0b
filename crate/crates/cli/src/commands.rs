use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use diffpool::adaptation::{
    budget_label, histograms_csv, run_adaptation_experiment, summarise_pair, LabelSource, ParamSummary,
};
use diffpool::datagen::{
    dataset_checksum, gen_closed_region, gen_multispeaker, load_dataset, save_dataset, SpeakerDataset, Split,
};
use diffpool::gradcheck::{run_gradcheck, GradOp, GradcheckConfig};
use diffpool::network::{build_model, load_model, save_model, ParamGroup};
use diffpool::training::{evaluate, train};
use diffpool::{Error, Rng};

use crate::config::{file_digest, resolve, short_hash, ConfigError, RunConfig, Task};
use crate::{Command, Common};

/// 1 for numerical failures, 2 for usage, configuration and input errors.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite(_) | Error::Oracle { .. } | Error::Contract(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn resolve_with(common: &Common, named: Vec<(&str, Option<Value>)>) -> Result<RunConfig> {
    let mut overrides: Vec<(String, Value)> = named
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
    overrides.extend(common.overrides.iter().cloned());
    resolve(common.config.as_deref(), &overrides).map_err(|e| config_error(format!("{e:#}")))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Creates `<out>/<command>-<hash>` where the hash covers the echoed
/// config, and writes the echo into it as `config.json`.
fn run_dir(out: &Path, command: &str, echo: &Value) -> Result<PathBuf> {
    let text = pretty(echo)?;
    let dir = out.join(format!("{command}-{}", short_hash(text.as_bytes())));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.json"), text)?;
    Ok(dir)
}

fn load_data(dir: &Path) -> Result<SpeakerDataset> {
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

pub fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData {
            task,
            seed,
            out,
            force,
            n_per_class,
            noise,
            n_per_speaker,
            shift,
            common,
        } => {
            let cfg = resolve_with(
                &common,
                vec![
                    ("data.task", Some(serde_json::to_value(task)?)),
                    ("data.seed", Some(json!(seed))),
                    ("data.closed_region.n_per_class", n_per_class.map(|v| json!(v))),
                    ("data.closed_region.noise", noise.map(|v| json!(v))),
                    ("data.multispeaker.n_per_speaker", n_per_speaker.map(|v| json!(v))),
                    ("data.multispeaker.shift.magnitude", shift.map(|v| json!(v))),
                ],
            )?;
            gen_data(&cfg, &out, force)
        }
        Command::Train {
            model,
            data,
            out,
            seed,
            lr,
            epochs,
            batch_size,
            common,
        } => {
            let cfg = resolve_with(
                &common,
                vec![
                    ("model.kind", Some(serde_json::to_value(model)?)),
                    ("train.seed", seed.map(|v| json!(v))),
                    ("train.initial_lr", lr.map(|v| json!(v))),
                    ("train.max_epochs", epochs.map(|v| json!(v))),
                    ("train.batch_size", batch_size.map(|v| json!(v))),
                ],
            )?;
            train_cmd(&cfg, &data, &out)
        }
        Command::Adapt {
            model,
            data,
            out,
            subset,
            labels,
            lr,
            iters,
            layers,
            sweep,
            repeats,
            seed,
            common,
        } => {
            let subset = subset
                .map(|names| {
                    names
                        .iter()
                        .map(|n| n.parse::<ParamGroup>().map(|g| json!(g.name())))
                        .collect::<diffpool::Result<Vec<_>>>()
                })
                .transpose()
                .map_err(|e| config_error(e.to_string()))?;
            if let Some(l) = &labels {
                l.parse::<LabelSource>().map_err(|e| config_error(e.to_string()))?;
            }
            let cfg = resolve_with(
                &common,
                vec![
                    ("adapt.param_subset", subset.map(Value::Array)),
                    ("adapt.label_source", labels.map(Value::String)),
                    ("adapt.lr", lr.map(|v| json!(v))),
                    ("adapt.iterations", iters.map(|v| json!(v))),
                    ("adapt.layers", layers.map(|v| json!(v))),
                    ("sweep", sweep.map(|v| json!(v))),
                    ("adapt.repeats", repeats.map(|v| json!(v))),
                    ("adapt.seed", seed.map(|v| json!(v))),
                ],
            )?;
            adapt_cmd(&cfg, &model, &data, &out)
        }
        Command::Gradcheck { op, trials, seed } => gradcheck_cmd(&op, trials, seed),
        Command::Inspect { model, model_after, out } => inspect_cmd(&model, model_after.as_deref(), &out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<ExitCode> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(config_error(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    let d = &cfg.data;
    let ds = match d.task {
        Task::ClosedRegion => gen_closed_region(d.closed_region.n_per_class, d.closed_region.noise, d.seed),
        Task::Multispeaker => gen_multispeaker(&d.multispeaker, d.seed)?,
    };
    save_dataset(&ds, out)?;
    write(&out.join("config.json"), pretty(&json!({ "command": "gen-data", "config": cfg }))?)?;
    let m = &ds.manifest;
    println!("generator {}", m.generator);
    println!("seed {}", m.seed);
    println!("rows {} dim {} classes {}", m.n_rows, m.dim, m.n_classes);
    for split in [Split::Train, Split::Valid, Split::Adapt, Split::Test] {
        let n = ds.splits.iter().filter(|&&s| s == split).count();
        if n > 0 {
            println!("split {split} rows {n} speakers {}", ds.speakers_in(split).len());
        }
    }
    println!("checksum {}", dataset_checksum(&ds)?);
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<ExitCode> {
    let ds = load_data(data)?;
    let layers = cfg.model.layer_configs(ds.manifest.dim, ds.manifest.n_classes);
    let model = build_model(&layers, &mut Rng::new(cfg.model.seed), &cfg.model.init)?;
    let train_set = ds.select(None, Split::Train);
    let valid_set = ds.select(None, Split::Valid);
    if train_set.is_empty() || valid_set.is_empty() {
        bail!(config_error("dataset needs non-empty train and valid splits"));
    }
    let echo = json!({
        "command": "train",
        "inputs": { "data": data, "data_checksum": dataset_checksum(&ds)? },
        "config": cfg,
    });
    let dir = run_dir(out, "train", &echo)?;
    let (trained, report) = train(&model, &train_set, &valid_set, &cfg.train)?;

    let model_path = dir.join("model.json");
    save_model(&trained, &model_path)?;
    report.write_csv(&dir.join("train_report.csv"))?;
    write(&dir.join("train_report.json"), pretty(&report)?)?;

    let test_set = ds.select(None, Split::Test);
    let test = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&trained, &test_set)?)
    };
    let metrics = json!({
        "model": cfg.model.kind.to_string(),
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "stop_reason": report.stop_reason,
        "train_error": evaluate(&trained, &train_set)?.frame_error,
        "valid_error": report.best_valid_error,
        "test_error": test.map(|t| t.frame_error),
        "test_accuracy": test.map(|t| 1.0 - t.frame_error),
    });
    write(&dir.join("metrics.json"), pretty(&metrics)?)?;
    println!("out_dir {}", dir.display());
    println!("model {}", model_path.display());
    println!("epochs {} stop {:?}", report.epochs.len(), report.stop_reason);
    println!("valid_error {:.6}", report.best_valid_error);
    if let Some(t) = test {
        println!("test_error {:.6}", t.frame_error);
        println!("test_accuracy {:.6}", 1.0 - t.frame_error);
    }
    Ok(ExitCode::SUCCESS)
}

fn adapt_cmd(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<ExitCode> {
    let si = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let ds = load_data(data)?;
    if ds.manifest.dim != si.input_dim() || ds.manifest.n_classes != si.num_classes() {
        bail!(config_error(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            si.input_dim(),
            si.num_classes(),
            ds.manifest.dim,
            ds.manifest.n_classes
        )));
    }
    cfg.adapt.trainable_groups(&si)?;
    let sweep = cfg.sweep_or_default();
    let echo = json!({
        "command": "adapt",
        "inputs": {
            "model": model_path,
            "model_sha256": file_digest(model_path)?,
            "data": data,
            "data_checksum": dataset_checksum(&ds)?,
        },
        "config": { "adapt": cfg.adapt, "sweep": sweep },
    });
    let dir = run_dir(out, "adapt", &echo)?;
    let (report, adapted) = run_adaptation_experiment(&si, &ds, &cfg.adapt, &sweep)?;

    write(&dir.join("adapt_report.csv"), report.to_csv())?;
    write(&dir.join("histograms.csv"), report.histograms_csv())?;
    write(&dir.join("adapt_summary.json"), pretty(&report)?)?;
    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir)?;
    for (speaker, m) in &adapted {
        save_model(m, models_dir.join(format!("speaker-{speaker}.json")))?;
    }

    println!("out_dir {}", dir.display());
    println!("speakers {}", report.speakers.len());
    println!("mean_error_before {:.6}", report.mean_error_before());
    for s in &report.summary {
        println!("mean_error_after[{}] {:.6}", budget_label(s.budget), s.mean_error_after);
    }
    print_dispersion(&report.params);
    Ok(ExitCode::SUCCESS)
}

fn print_dispersion(params: &[ParamSummary]) {
    for p in params {
        match p.std_after {
            Some(after) => println!(
                "layer {} {} std_before {:.6} std_after {:.6} delta {:+.6}",
                p.layer,
                p.param,
                p.std_before,
                after,
                after - p.std_before
            ),
            None => println!("layer {} {} mean {:.6} std {:.6}", p.layer, p.param, p.mean_before, p.std_before),
        }
    }
}

fn gradcheck_cmd(op: &str, trials: usize, seed: u64) -> Result<ExitCode> {
    let ops: Vec<GradOp> = if op == "all" {
        GradOp::ALL.to_vec()
    } else {
        vec![op.parse().map_err(|e: Error| config_error(e.to_string()))?]
    };
    let cfg = GradcheckConfig {
        trials,
        seed,
        ..Default::default()
    };
    let mut ok = true;
    for op in ops {
        let report = run_gradcheck(op, &cfg)?;
        print!("{report}");
        println!("{} {}", if report.passed() { "PASS" } else { "FAIL" }, op);
        ok &= report.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn inspect_cmd(before: &Path, after: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let m0 = load_model(before).with_context(|| format!("loading model {}", before.display()))?;
    let m1 = after
        .map(|p| load_model(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()?;
    let params = summarise_pair(&m0, m1.as_ref())?;
    let mut inputs = json!({ "model": before, "model_sha256": file_digest(before)? });
    if let Some(p) = after {
        inputs["model_after"] = json!(p);
        inputs["model_after_sha256"] = json!(file_digest(p)?);
    }
    let dir = run_dir(out, "inspect", &json!({ "command": "inspect", "inputs": inputs }))?;
    write(&dir.join("histograms.csv"), histograms_csv(&params))?;
    let summary: Vec<Value> = params
        .iter()
        .map(|p| {
            json!({
                "layer": p.layer,
                "param": p.param,
                "count": p.count_before.iter().sum::<usize>(),
                "mean_before": p.mean_before,
                "std_before": p.std_before,
                "mean_after": p.mean_after,
                "std_after": p.std_after,
                "dispersion_delta": p.std_after.map(|s| s - p.std_before),
            })
        })
        .collect();
    write(&dir.join("summary.json"), pretty(&summary)?)?;
    println!("out_dir {}", dir.display());
    print_dispersion(&params);
    Ok(ExitCode::SUCCESS)
}
