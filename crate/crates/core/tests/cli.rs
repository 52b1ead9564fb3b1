use std::path::Path;
use std::process::Command;

use airphys_core::cli::{sha256_file, Manifest};
use airphys_core::eval::{ComparisonTable, Winner};

const SMALL: &str = r#"{
  "synthetic": {"days": 200},
  "forest": {"trees": 20},
  "models": {
    "pbdl": {"epochs": 3},
    "lstm": {"nox": {"units": [4], "dropout": [0.2], "epochs": 2},
             "pm25": {"units": [4], "dropout": [0.2], "epochs": 2}}
  },
  "tune": {"trials": 2, "runs_per_trial": 1,
           "pbdl": {"units": [4, 8], "base": {"epochs": 2}},
           "lstm": {"units": [4, 8], "layers": [1], "base": {"epochs": 1}}}
}"#;

fn airphys(config: &Path, out: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_airphys"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(airphys(&dir.path().join("nope.json"), &dir.path().join("out"), &["synth"]), 1);
}

#[test]
fn bad_override_exits_1() {
    let (dir, cfg) = setup();
    assert_eq!(airphys(&cfg, &dir.path().join("out"), &["--set", "split.window=0", "synth"]), 1);
}

#[test]
fn report_before_evaluate_exits_2() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    assert_eq!(airphys(&cfg, &out, &["synth"]), 0);
    assert_eq!(airphys(&cfg, &out, &["report"]), 2);
}

#[test]
fn downstream_without_data_exits_2() {
    let (dir, cfg) = setup();
    assert_eq!(airphys(&cfg, &dir.path().join("out"), &["train"]), 2);
}

#[test]
fn divergence_exits_3() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    assert_eq!(airphys(&cfg, &out, &["synth"]), 0);
    assert_eq!(airphys(&cfg, &out, &["--set", "models.pbdl.learning_rate=1e300", "train", "--model", "pbdl"]), 3);
}

#[test]
fn pbdl_only_pipeline_gives_one_row_per_cell() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    for args in [&["synth"][..], &["train", "--model", "pbdl"], &["evaluate"]] {
        assert_eq!(airphys(&cfg, &out, args), 0, "{args:?}");
    }
    let table = ComparisonTable::read_csv(&out.join("eval/comparison.csv")).unwrap();
    assert_eq!(table.rows.len(), 3 * 2);
    for r in &table.rows {
        assert_eq!(r.winner, Winner::Incomplete);
        assert!(r.pbdl_rmse.unwrap() >= 0.0);
        assert!(r.lstm_rmse.is_none());
    }
}

#[test]
fn manifests_chain_upstream_digests() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    for args in [&["synth"][..], &["train", "--model", "pbdl"], &["evaluate"], &["report"]] {
        assert_eq!(airphys(&cfg, &out, args), 0, "{args:?}");
    }
    let data = Manifest::read(&out.join("data/manifest.json")).unwrap();
    let models = Manifest::read(&out.join("models/manifest.json")).unwrap();
    let eval = Manifest::read(&out.join("eval/manifest.json")).unwrap();
    let report = Manifest::read(&out.join("report/manifest.json")).unwrap();
    for (k, v) in &models.inputs {
        assert_eq!(data.outputs.get(k), Some(v), "train input {k}");
    }
    for (k, v) in eval.inputs.iter().filter(|(k, _)| k.starts_with("models/")) {
        assert_eq!(models.outputs.get(k), Some(v), "evaluate input {k}");
    }
    assert!(!report.inputs.is_empty());
    for (k, v) in &report.inputs {
        assert_eq!(eval.outputs.get(k), Some(v), "report input {k}");
    }
    for (k, v) in &report.outputs {
        assert_eq!(&sha256_file(&out.join(k)).unwrap(), v);
    }
    assert!(models.seeds.keys().any(|k| k.starts_with("train/NOx_pbdl/")));
}

#[test]
fn feature_selection_commands_write_artifacts() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    for c in ["synth", "features", "panel", "cluster", "forest"] {
        assert_eq!(airphys(&cfg, &out, &[c]), 0, "{c}");
    }
    for f in [
        "features/design_NOx.csv",
        "features/correlation.csv",
        "panel/PM25_fit.csv",
        "panel/NOx_ranking.csv",
        "cluster/kmeans.csv",
        "cluster/dendrogram.csv",
        "cluster/hierarchical.csv",
        "forest/NOx_importance.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let first = std::fs::read(out.join("forest/NOx_importance.csv")).unwrap();
    assert_eq!(airphys(&cfg, &out, &["forest"]), 0);
    assert_eq!(first, std::fs::read(out.join("forest/NOx_importance.csv")).unwrap());
}

#[test]
fn ingest_reads_long_format_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("obs.csv");
    let mut text = String::from("date,city,station,variable,value\n");
    let vars = ["TV", "NOx", "PM25", "Tmean", "VP", "WS", "WG", "meanRH", "SD", "PP"];
    for d in 0..60u32 {
        let date = chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Duration::days(d.into());
        for (k, v) in vars.iter().enumerate() {
            let x = 5.0 + k as f64 + ((d * (k as u32 + 3)) % 7) as f64;
            let val = if d == 10 && *v == "WS" { "NA".to_string() } else { x.to_string() };
            text.push_str(&format!("{date},Oslo,s1,{v},{val}\n"));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, format!(r#"{{"data": {{"paths": [{:?}]}}}}"#, csv)).unwrap();
    let out = dir.path().join("out");
    assert_eq!(airphys(&cfg, &out, &["ingest"]), 0);
    assert!(out.join("data/Oslo.csv").exists());
    let m = Manifest::read(&out.join("data/manifest.json")).unwrap();
    assert_eq!(m.inputs.len(), 1);
}
