use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use st_graphormer::eval::attention_heatmaps;
use st_graphormer::model::{AttentionTrace, TGraphormer};
use st_graphormer::pipeline::Prepared;
use st_graphormer::training::Checkpoint;

fn base_config(out: &Path) -> Value {
    json!({
        "synth": { "steps": 600 },
        "kappa": 6.0,
        "context": 12,
        "horizon": 12,
        "model": { "preset": "micro", "d_model": 8, "layers": 2, "heads": 2 },
        "train": { "epochs": 3, "batch_size": 32, "dropout": 0.1, "base_lr": 0.003 },
        "output": out,
        "seed": 11,
        "num_samples": 4
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_st-graphormer"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) {
    let out = run(config, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_shape(path: PathBuf) -> (usize, usize) {
    let text = String::from_utf8(read(path)).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    (rows.len(), rows[0].split(',').count())
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.json", &base_config(&out));
    ok(&cfg, &["synth"]);
    ok(&cfg, &["prepare"]);
    let manifest: Value = serde_json::from_slice(&read(out.join("prepared/manifest.json"))).unwrap();
    assert_eq!(manifest["channels"], 289);
    assert_eq!(manifest["interval_minutes"], 5);
    for f in ["adjacency.csv", "spd.csv", "degrees.csv", "graph.bin", "train.bin", "val.bin", "test.bin"] {
        assert!(out.join("prepared").join(f).exists(), "{f}");
    }
    let prepared_once = read(out.join("prepared/train.bin"));
    ok(&cfg, &["prepare"]);
    assert_eq!(read(out.join("prepared/train.bin")), prepared_once);

    ok(&cfg, &["train"]);
    let log = String::from_utf8(read(out.join("train/log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 4);

    ok(&cfg, &["eval"]);
    let report: Value = serde_json::from_slice(&read(out.join("eval/test.json"))).unwrap();
    let horizons = report["horizons"].as_array().unwrap();
    assert_eq!(horizons.iter().map(|h| h["horizon"].as_u64().unwrap()).collect::<Vec<_>>(), vec![3, 6, 12]);
    for h in horizons {
        for k in ["mae", "rmse", "mape"] {
            assert!(h[k].as_f64().unwrap().is_finite());
        }
    }
    assert_eq!(csv_shape(out.join("eval/test.csv")).0, 4);

    // Scoring the selected checkpoint on val reproduces the logged best val MAE.
    ok(&cfg, &["eval", "--split", "val"]);
    let val: Value = serde_json::from_slice(&read(out.join("eval/val.json"))).unwrap();
    let best = Checkpoint::<f64>::load(&out.join("train/best")).unwrap();
    assert_eq!(val["horizons"][2]["mae"].as_f64().unwrap(), best.best_score.unwrap());

    ok(&cfg, &["attend", "--per-layer"]);
    assert_eq!(csv_shape(out.join("attend/node_node.csv")), (10, 10));
    assert_eq!(csv_shape(out.join("attend/time_time.csv")), (12, 12));
    assert!(out.join("attend/layer_1.csv").exists());
    assert!(!out.join("attend/layer_2.csv").exists());

    // One traced window equals direct aggregation of its trace.
    ok(&cfg, &["attend", "--num-samples", "1"]);
    let prep = Prepared::load(&out.join("prepared")).unwrap();
    let model = TGraphormer::new(best.model.clone(), &prep.degrees, &prep.spd, prep.manifest.normalizer).unwrap();
    let mut trace = AttentionTrace::default();
    model.predict_traced(&best.params, &prep.test.sample(0).x, Some(&mut trace)).unwrap();
    let direct = attention_heatmaps(&[trace], model.layout(), false).unwrap();
    let scratch = tempfile::tempdir().unwrap();
    direct.write(scratch.path()).unwrap();
    assert_eq!(read(out.join("attend/node_node.csv")), read(scratch.path().join("node_node.csv")));
    assert_eq!(read(out.join("attend/time_time.csv")), read(scratch.path().join("time_time.csv")));

    // Resuming a finished run is a no-op that keeps the log.
    ok(&cfg, &["train", "--resume", out.join("train/last.json").to_str().unwrap()]);
    assert_eq!(String::from_utf8(read(out.join("train/log.csv"))).unwrap(), log);
}

#[test]
fn runs_are_byte_identical_and_ablate_flag_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.json", &base_config(&out));
    ok(&cfg, &["synth"]);
    ok(&cfg, &["prepare"]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        std::fs::create_dir_all(o.join("prepared")).unwrap();
        for e in std::fs::read_dir(out.join("prepared")).unwrap() {
            let e = e.unwrap();
            std::fs::copy(e.path(), o.join("prepared").join(e.file_name())).unwrap();
        }
    }
    ok(&cfg, &["train", "--out", a.to_str().unwrap()]);
    ok(&cfg, &["train", "--out", b.to_str().unwrap()]);
    for f in ["best.bin", "best.json", "last.bin", "last.json", "log.csv"] {
        assert_eq!(read(a.join("train").join(f)), read(b.join("train").join(f)), "{f}");
    }

    ok(&cfg, &["train", "--ablate", "no_positional", "--out", a.to_str().unwrap()]);
    let mut flagged = base_config(&b);
    flagged["model"]["encodings"] = json!({ "use_positional": false });
    let flagged = write_config(dir.path(), "nopos.json", &flagged);
    ok(&flagged, &["train"]);
    for f in ["best.bin", "best.json", "log.csv"] {
        assert_eq!(read(a.join("train").join(f)), read(b.join("train").join(f)), "{f}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = base_config(&dir.path().join("run"));
    bad["horizon"] = json!(6);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let res = run(&cfg, &["prepare"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("must equal context"));

    let cfg = write_config(dir.path(), "ok.json", &base_config(&dir.path().join("run")));
    assert_eq!(run(&cfg, &["prepare"]).status.code(), Some(2), "missing data files");
    assert_eq!(run(&cfg, &["train"]).status.code(), Some(2), "not prepared");
    assert_eq!(run(&cfg, &["train", "--ablate", "no_such"]).status.code(), Some(2));
    assert_eq!(run(&cfg, &["attend", "--num-samples", "0"]).status.code(), Some(2));
    assert_eq!(run(&dir.path().join("absent.json"), &["synth"]).status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = base_config(&out);
    c["train"]["epochs"] = json!(2);
    let cfg = write_config(dir.path(), "run.json", &c);
    ok(&cfg, &["synth"]);
    ok(&cfg, &["prepare"]);
    ok(&cfg, &["train"]);
    let mut ck = Checkpoint::<f64>::load(&out.join("train/last")).unwrap();
    ck.epoch = 1;
    let name = ck.params.specs()[0].name.clone();
    ck.params.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let poisoned = dir.path().join("poisoned");
    ck.save(&poisoned).unwrap();
    let res = run(&cfg, &["train", "--resume", poisoned.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn tiny_kappa_leaves_everything_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = base_config(&out);
    c["kappa"] = json!(0.0001);
    let cfg = write_config(dir.path(), "run.json", &c);
    ok(&cfg, &["synth"]);
    let res = run(&cfg, &["prepare"]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unreachable"));
    let spd = String::from_utf8(read(out.join("prepared/spd.csv"))).unwrap();
    for (i, row) in spd.lines().enumerate() {
        for (j, v) in row.split(',').enumerate() {
            assert_eq!(v, if i == j { "0" } else { "-1" });
        }
    }
}
