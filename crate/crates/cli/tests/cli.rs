use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lglab::manifest::{content_hash, RunManifest};
use lglab_core::{LtParams, Matrix};
use serde_json::Value;
use tempfile::TempDir;

fn lglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lglab")).args(args).env("LGLAB_THREADS", "1").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_model(dir: &Path, name: &str, m: &LtParams) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, m.to_json_string()).unwrap();
    p
}

fn two_layer_zero() -> LtParams {
    LtParams::zeros(3, 4, 1, 1, &[1, 1], 2)
}

fn one_layer_model() -> LtParams {
    let mut m = LtParams::zeros(3, 5, 2, 1, &[1], 2);
    for t in 0..3 {
        m.embed.set(t, t, 1.0);
    }
    m.pos.set(0, 3, 1.0);
    m.pos.set(1, 4, 1.0);
    m.layers[0].heads[0].kq.set(0, 0, 2.0);
    m.layers[0].heads[0].kq.set(3, 4, 2.0);
    m.layers[0].heads[0].phi = vec![0.0, 2.0];
    m.layers[0].heads[0].v = Matrix::identity(5);
    m.unembed = Matrix::from_rows(vec![vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
    m
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_zero_model() {
    let dir = TempDir::new().unwrap();
    let p = write_model(dir.path(), "zero.json", &two_layer_zero());
    let o = lglab(&["analyze", "--model", path_str(&p)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["complexity"], 0.0);
    assert_eq!(r["positional_margin"], 1.0);
}

#[test]
fn analyze_round_trip_is_identical() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.json", &one_layer_model());
    let text = fs::read_to_string(&a).unwrap();
    let b = write_model(dir.path(), "b.json", &LtParams::from_json_str(&text).unwrap());
    let ra = lglab(&["analyze", "--model", path_str(&a)]);
    let rb = lglab(&["analyze", "--model", path_str(&b)]);
    assert_eq!(code(&ra), 0, "{}", stderr(&ra));
    assert_eq!(stdout(&ra), stdout(&rb));
    let r: Value = serde_json::from_str(&stdout(&ra)).unwrap();
    assert_eq!(r["logit_margin"], 2.0);
    assert!(r["complexity"].is_null());
}

#[test]
fn analyze_writes_report_and_manifest() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "m.json", &one_layer_model());
    let out = dir.path().join("report.json");
    let o = lglab(&["analyze", "--model", path_str(&model), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.exists());
    let man: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(man.command, "analyze");
    assert!(man.outputs.contains(&out));
    assert_eq!(man.input_hash, content_hash([fs::read(&model).unwrap().as_slice()]));
}

#[test]
fn corrupted_json_reports_byte_offset() {
    let dir = TempDir::new().unwrap();
    let good = one_layer_model().to_json_string();
    let at = good.find(':').unwrap();
    let mut bad = good.into_bytes();
    bad[at] = b'#';
    let p = dir.path().join("bad.json");
    fs::write(&p, &bad).unwrap();
    let o = lglab(&["analyze", "--model", path_str(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&format!("byte offset {at}")), "{}", stderr(&o));
}

#[test]
fn dimension_mismatch_names_the_field() {
    let dir = TempDir::new().unwrap();
    let mut v: Value = serde_json::from_str(&one_layer_model().to_json_string()).unwrap();
    v["layers"][0]["heads"][0]["kq"] = serde_json::json!([[1.0, 2.0]]);
    let p = dir.path().join("dim.json");
    fs::write(&p, v.to_string()).unwrap();
    let o = lglab(&["analyze", "--model", path_str(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("kq"), "{}", stderr(&o));
}

#[test]
fn shape_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let deep = write_model(dir.path(), "deep.json", &LtParams::zeros(3, 4, 1, 1, &[1, 1, 1], 2));
    assert_eq!(code(&lglab(&["analyze", "--model", path_str(&deep)])), 3);
    let mut m = two_layer_zero();
    m.pos.set(0, 0, 1.0);
    let positional = write_model(dir.path(), "pos.json", &m);
    let o = lglab(&["analyze", "--model", path_str(&positional)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&lglab(&["analyze"])), 2);
    assert_eq!(code(&lglab(&["frobnicate"])), 2);
    assert_eq!(code(&lglab(&["verify", "nonsense"])), 2);
    assert_eq!(code(&lglab(&["analyze", "--model", "/nonexistent/model.json"])), 2);
    assert_eq!(code(&lglab(&["--help"])), 0);
}

#[test]
fn verify_is_deterministic() {
    let a = lglab(&["verify", "rounding", "--seed", "7"]);
    let b = lglab(&["verify", "rounding", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let r: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["suites"][0]["suite"], "rounding");
}

#[test]
fn verify_all_twice_is_byte_identical() {
    let a = lglab(&["verify", "all", "--seed", "7"]);
    let b = lglab(&["verify", "all", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let r: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["suites"].as_array().unwrap().len(), 6);
}

#[test]
fn induced_failure_exits_1_with_name() {
    let o = lglab(&["verify", "gradients", "--tolerance-scale", "0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gradients/depth1_relative_gap"), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], false);
}

#[test]
fn plot_is_deterministic_and_checks_columns() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(
        &csv,
        "task,param,train_len,test_len,seed,test_loss\nmodp,3,16,64,0,0.1\nmodp,3,16,128,0,0.2\nmodp,3,32,64,0,0.05\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    for out in [&a, &b] {
        let o = lglab(&[
            "plot",
            "--csv",
            path_str(&csv),
            "--x",
            "test_len",
            "--y",
            "test_loss",
            "--group",
            "train_len",
            "--log-y",
            "--out",
            path_str(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.svg.manifest.json").exists());
    let o = lglab(&["plot", "--csv", path_str(&csv), "--x", "nope", "--y", "test_loss", "--out", path_str(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn plot_single_row() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("one.csv");
    fs::write(&csv, "x,y\n1,2\n").unwrap();
    let out = dir.path().join("one.svg");
    let o = lglab(&["plot", "--csv", path_str(&csv), "--x", "x", "--y", "y", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
}

#[test]
fn gen_writes_sequences_and_targets() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("seqs.txt");
    let args = [
        "gen",
        "--task",
        "modp",
        "--params",
        "period=3,k=1",
        "--len",
        "30",
        "--count",
        "5",
        "--seed",
        "4",
        "--out",
        path_str(&out),
    ];
    assert_eq!(code(&lglab(&args)), 0);
    let first = fs::read(&out).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 30));
    let targets: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("seqs.txt.targets.json")).unwrap()).unwrap();
    assert_eq!(targets["targets"].as_array().unwrap().len(), 5);
    assert_eq!(targets["task"]["variant"], "ModPTask");
    assert_eq!(code(&lglab(&args)), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
    let man: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("seqs.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(man.outputs.len(), 3);
    assert_eq!(man.base_seed, Some(4));
}

#[test]
fn simulate_suffix_and_joint() {
    let dir = TempDir::new().unwrap();
    let f = write_model(dir.path(), "f.json", &one_layer_model());
    let mut g_model = one_layer_model();
    g_model.layers[0].heads[0].kq.set(1, 1, 2.0);
    let g = write_model(dir.path(), "g.json", &g_model);
    let input = dir.path().join("x.txt");
    let toks: Vec<String> = (0..400).map(|i| (1 + (i * 7 + i / 3) % 2).to_string()).collect();
    fs::write(&input, toks.join(" ")).unwrap();

    let o = lglab(&["simulate", "--models", path_str(&f), "--input-file", path_str(&input), "--method", "suffix", "--n", "50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["method"], "suffix");
    assert_eq!(r["len_z"], 50);

    let o = lglab(&["simulate", "--models", path_str(&f), path_str(&g), "--input-file", path_str(&input), "--eps", "0.2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["method"], "joint_hard");
    assert!(r["err_g"].is_number());

    let o = lglab(&["simulate", "--models", path_str(&f), "--input-file", path_str(&input), "--method", "joint"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn markov_sim_runs_on_local_model() {
    let dir = TempDir::new().unwrap();
    let mut m = two_layer_zero();
    m.embed = Matrix::from_rows(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
    m.layers[0].heads[0].v = Matrix::identity(4);
    m.unembed = Matrix::from_rows(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
    let f = write_model(dir.path(), "f.json", &m);
    let input = dir.path().join("x.txt");
    let toks: Vec<String> = (0..2000).map(|i| (1 + (i * i + 3 * i) % 3).to_string()).collect();
    fs::write(&input, toks.join("\n")).unwrap();
    let out = dir.path().join("sim.json");
    let args =
        ["markov-sim", "--model", path_str(&f), "--input-file", path_str(&input), "--n", "200", "--tries", "4", "--seed", "9"];
    let mut with_out = args.to_vec();
    with_out.extend(["--out", path_str(&out)]);
    assert_eq!(code(&lglab(&with_out)), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["method"], "markov");
    assert_eq!(r["seed"], 9);
    assert_eq!(stdout(&lglab(&args)), fs::read_to_string(&out).unwrap());
}

#[test]
fn train_and_sweep_small() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"task": "modp", "params": {"period": 3}, "d": 4, "batch": 8, "max_steps": 40, "seed": 5}"#).unwrap();
    let ckpt = dir.path().join("model.json");
    let o = lglab(&["train", "--config", path_str(&cfg), "--train-len", "12", "--max-steps", "20", "--out", path_str(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 20);
    assert_eq!(summary["config"]["seed"], 5);
    let log = fs::read_to_string(dir.path().join("model.json.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    let ckpt_json: Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(ckpt_json["pe_kind"]["kind"], "periodic");
    assert_eq!(code(&lglab(&["analyze", "--model", path_str(&ckpt)])), 0);

    let csv = dir.path().join("results.csv");
    let ckdir = dir.path().join("ckpts");
    let sweep = [
        "sweep",
        "--config",
        path_str(&cfg),
        "--param-grid",
        "2,3",
        "--train-lens",
        "8",
        "--test-lens",
        "16,32",
        "--seeds",
        "1,2",
        "--eval-batches",
        "1",
        "--eval-batch-size",
        "4",
        "--checkpoint-dir",
        path_str(&ckdir),
        "--out",
        path_str(&csv),
    ];
    let o = lglab(&sweep);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("task,param,train_len,test_len,seed,test_loss"));
    assert_eq!(lines.count(), 2 * 2 * 2);
    assert_eq!(fs::read_dir(&ckdir).unwrap().count(), 4);
    let man: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("results.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(man.outputs.len(), 1 + 4 + 1);
    assert_eq!(man.config_path.as_deref(), Some(cfg.as_path()));
    assert_eq!(code(&lglab(&sweep)), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap(), text);
}
