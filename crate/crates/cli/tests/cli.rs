use std::path::Path;
use std::process::{Command, Output};

use qforge_cli::{ModelFile, ThresholdFile};
use qforge_core::data::detect;
use qforge_core::hwmodel::{self, PlatformSpec};
use qforge_core::search::read_ledger;

fn qforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qforge"))
        .args(args)
        .env_remove("QFORGE_PLATFORM_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hash_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn train_sine(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--epochs", "4", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&qforge(&args))
}

#[test]
fn missing_dataset_exits_2_and_names_path() {
    let out = qforge(&["train", "--data", "/no/such/file.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.csv"));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--task", "juggling"],
        vec!["train", "--platform", "nope"],
        vec!["train", "--bits", "12"],
        vec!["train", "--task", "anomaly", "--data", "synthetic:sine"],
        vec!["train", "--epochs", "3", "--patience", "5"],
        vec!["frobnicate"],
    ] {
        assert_eq!(qforge(&args).status.code(), Some(2), "{args:?}");
    }
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seeed = 3\n").unwrap();
    assert_eq!(qforge(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    let model = dir.path().join("model.json");
    std::fs::write(&model, "{}").unwrap();
    assert_eq!(qforge(&["export-vhdl", s(&model)]).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), &["--baseline"]);
    for f in ["model.json", "int_model.json", "train_log.csv", "metrics.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let hash = metrics["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(metrics["float_metric"].as_f64().is_some());
    assert!(metrics["int_metric"].as_f64().is_some());
    assert_eq!(hash_line(&dir.path().join("train_log.csv")), format!("# config_hash={hash}"));
    let m = ModelFile::load(&dir.path().join("model.json")).unwrap();
    assert_eq!(m.config_hash, hash);
    assert!(m.model.is_some() && m.int_model.is_none());
    let im = ModelFile::load(&dir.path().join("int_model.json")).unwrap();
    assert!(im.int_model.is_some() && im.model.is_none());
}

#[test]
fn same_config_same_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_sine(a.path(), &[]);
    train_sine(b.path(), &[]);
    let read = |d: &Path| std::fs::read_to_string(d.join("int_model.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "task = \"forecasting\"\nseed = 5\n[model]\nd_model = 8\nbits = 6\n[train]\nmax_epochs = 3\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&qforge(&["train", "--config", s(&cfg), "--bits", "4", "--out", s(&out)]));
    let m = ModelFile::load(&out.join("int_model.json")).unwrap();
    assert_eq!(m.config.d_model, 8);
    assert_eq!(m.config.bits, Some(4));
}

#[test]
fn export_prints_hwmodel_energy_and_strict_fails_over_budget() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), &["--d-model", "64"]);
    let model = dir.path().join("int_model.json");
    let rtl = dir.path().join("rtl");
    let stdout = ok(&qforge(&["export-vhdl", s(&model), "--out", s(&rtl)]));
    for f in ["qf_top.vhd", "qf_tb.vhd", "qforge_pkg.vhd", "qf_gap.vhd", "xc7s15.xdc", "golden_inputs.txt"] {
        assert!(rtl.join(f).is_file(), "{f}");
    }
    let im = ModelFile::load(&model).unwrap().int_model.unwrap();
    let est = hwmodel::estimate(&im, &PlatformSpec::find("xc7s15", None).unwrap());
    assert!(stdout.contains(&format!("energy_mj     {}", est.energy_mj)), "{stdout}");

    let ice = dir.path().join("ice");
    let lax = qforge(&["export-vhdl", s(&model), "--platform", "ice40up5k", "--out", s(&ice)]);
    assert_eq!(lax.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&lax.stderr).contains("warning"));
    assert!(ice.join("qf_top.vhd").is_file());
    let strict = qforge(&["export-vhdl", s(&model), "--platform", "ice40up5k", "--out", s(&ice), "--strict"]);
    assert_eq!(strict.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("LUT +"));
}

#[test]
fn platform_dir_env_adds_profiles() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), &[]);
    let plat = dir.path().join("plat");
    std::fs::create_dir(&plat).unwrap();
    let mut p = PlatformSpec::find("xc7s15", None).unwrap();
    p.name = "tinyboard".into();
    p.lut_budget = 100;
    std::fs::write(plat.join("tinyboard.json"), serde_json::to_string(&p).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qforge"))
        .args(["export-vhdl", s(&dir.path().join("int_model.json")), "--platform", "tinyboard", "--strict"])
        .args(["--out", s(&dir.path().join("rtl"))])
        .env("QFORGE_PLATFORM_DIR", &plat)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn infer_replays_golden_vectors() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), &[]);
    let model = dir.path().join("int_model.json");
    let rtl = dir.path().join("rtl");
    ok(&qforge(&["export-vhdl", s(&model), "--out", s(&rtl)]));
    let pred = dir.path().join("g.csv");
    ok(&qforge(&["infer", s(&model), s(&rtl.join("golden_inputs.txt")), "--codes", "--out", s(&pred)]));
    let gold: Vec<i32> = std::fs::read_to_string(rtl.join("golden_outputs.txt"))
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&pred).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "code_0").unwrap();
    let got: Vec<i32> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(got, gold);
}

fn sine_csv(path: &Path, rows: usize) {
    let mut s = String::from("x\n");
    for t in 0..rows {
        s += &format!("{}\n", (t as f64 * std::f64::consts::TAU / 20.0).sin());
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn infer_forecasting_columns_and_incomplete_window() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), &[]);
    let model = dir.path().join("int_model.json");
    let n = ModelFile::load(&model).unwrap().config.n;
    let input = dir.path().join("in.csv");
    sine_csv(&input, 10 * n);
    let pred = dir.path().join("p.csv");
    ok(&qforge(&["infer", s(&model), s(&input), "--out", s(&pred)]));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&pred).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().filter(|h| h.starts_with("pred_")).count(), 1);
    assert_eq!(rdr.records().count(), 10);

    sine_csv(&input, 10 * n + 3);
    let bad = qforge(&["infer", s(&model), s(&input), "--out", s(&pred)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains(&format!("row {}", 10 * n + 1)));

    std::fs::write(&input, "x\n0.1\nabc\n").unwrap();
    let bad = qforge(&["infer", s(&model), s(&input)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("row 2"));
}

#[test]
fn infer_anomaly_flags_follow_threshold() {
    let dir = tempfile::tempdir().unwrap();
    ok(&qforge(&["train", "--task", "anomaly", "--epochs", "12", "--out", s(dir.path())]));
    let th_path = dir.path().join("threshold.json");
    let th: ThresholdFile = serde_json::from_str(&std::fs::read_to_string(&th_path).unwrap()).unwrap();
    let input = dir.path().join("spikes.csv");
    let mut text = String::from("x\n");
    for t in 0..300 {
        let spike = if t % 40 == 20 { 3.0 } else { 0.0 };
        text += &format!("{}\n", (t as f64 * std::f64::consts::TAU / 20.0).sin() + spike);
    }
    std::fs::write(&input, text).unwrap();
    let pred = dir.path().join("a.csv");
    let model = dir.path().join("int_model.json");
    ok(&qforge(&["infer", s(&model), s(&input), "--threshold", s(&th_path), "--out", s(&pred)]));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&pred).unwrap();
    let h = rdr.headers().unwrap().clone();
    let ri = h.iter().position(|c| c == "residual").unwrap();
    let fi = h.iter().position(|c| c == "flag").unwrap();
    let (mut res, mut flags) = (Vec::new(), Vec::new());
    for r in rdr.records() {
        let r = r.unwrap();
        res.push(r[ri].parse::<f64>().unwrap());
        flags.push(&r[fi] == "1");
    }
    assert_eq!(flags, detect(&res, &th.threshold));
}

#[test]
fn search_front_is_subset_of_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "[search]\npopulation = 2\nd_models = [8, 16]\nbatch_sizes = [64, 128]\n").unwrap();
    ok(&qforge(&["search", "--config", s(&cfg), "--trials", "3", "--epochs", "2", "--out", s(dir.path())]));
    let trials = read_ledger(&dir.path().join("ledger.jsonl")).unwrap();
    assert_eq!(trials.len(), 3);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.path().join("pareto.csv"))
        .unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for r in rows {
        let i: usize = r[0].parse().unwrap();
        let t = &trials[i];
        assert!(t.objectives().is_some());
        assert_eq!(r[1].parse::<f64>().unwrap(), t.val_loss.unwrap());
        assert_eq!(r[2].parse::<f64>().unwrap(), t.energy_mj.unwrap());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("search.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    for f in ["pareto.csv", "pareto.dat", "pareto.gp"] {
        assert_eq!(hash_line(&dir.path().join(f)), format!("# config_hash={hash}"), "{f}");
    }
    assert!(std::fs::read_to_string(dir.path().join("pareto.gp")).unwrap().contains("pareto.dat"));

    // resuming with a larger budget keeps the first trials verbatim
    let ledger = std::fs::read_to_string(dir.path().join("ledger.jsonl")).unwrap();
    ok(&qforge(&["search", "--config", s(&cfg), "--trials", "4", "--epochs", "2", "--out", s(dir.path())]));
    let after = std::fs::read_to_string(dir.path().join("ledger.jsonl")).unwrap();
    assert!(after.starts_with(&ledger));
    assert_eq!(after.lines().count(), 4);
}

#[test]
fn strict_train_over_budget_exits_3_after_writing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = qforge(&["train", "--epochs", "2", "--platform", "ice40up5k", "--strict", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("int_model.json").is_file());
    let lax = qforge(&["train", "--epochs", "2", "--platform", "ice40up5k", "--out", s(dir.path())]);
    assert_eq!(lax.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&lax.stderr).contains("LUT +"));
}
