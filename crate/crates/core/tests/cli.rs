use std::path::Path;
use std::process::{Command, Output};

fn oht(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oht-es")).args(args).output().expect("binary runs")
}

fn small_run(dir: &Path, algo: &str, extra: &[&str]) -> Output {
    let out = dir.display().to_string();
    let mut args = vec![
        "run", "--algo", algo, "--env", "pendulum", "--steps", "3000", "--seed", "0", "--out", &out,
        "--set", "net.hidden=16,16", "--set", "eval.every=1000", "--set", "eval.episodes=2",
        "--set", "td3.grad_steps_per_round=20", "--set", "tuner.N=4", "--set", "esrl.k=2",
    ];
    args.extend_from_slice(extra);
    oht(&args)
}

fn rows(dir: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(dir.join("progress.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let body = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, body)
}

#[test]
fn rerun_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert!(small_run(&a, "td3", &[]).status.success());
    assert!(small_run(&b, "td3", &[]).status.success());
    let pa = std::fs::read(a.join("progress.csv")).unwrap();
    assert_eq!(pa, std::fs::read(b.join("progress.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());
    let (_, body) = rows(&a);
    let steps: Vec<f64> = body.iter().map(|r| r[0]).collect();
    assert_eq!(steps, vec![1000.0, 2000.0, 3000.0]);
}

#[test]
fn discrete_probabilities_form_a_simplex() {
    let root = tempfile::tempdir().unwrap();
    let out = small_run(root.path(), "oht-es-discrete", &["--set", "tuner.support=1,2,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, body) = rows(root.path());
    let cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("p_n")).collect();
    assert_eq!(cols.len(), 3);
    for r in &body {
        let s: f64 = cols.iter().map(|&i| r[i]).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn delayed_training_reports_undelayed_eval() {
    let root = tempfile::tempdir().unwrap();
    let (plain, delayed) = (root.path().join("plain"), root.path().join("delayed"));
    // With no training before the first tick both evaluate the same initial actor.
    let extra = ["--set", "warmup=1000", "--set", "eval.every=1000"];
    assert!(small_run(&plain, "td3", &extra).status.success());
    assert!(small_run(&delayed, "td3", &[&extra[..], &["--delay", "5"]].concat()).status.success());
    assert_eq!(rows(&plain).1[0][1], rows(&delayed).1[0][1]);
    // A delayed eval would report far fewer nonzero rewards; returns stay pendulum-scale.
    assert!(rows(&delayed).1.iter().all(|r| r[1] < 0.0));
}

#[test]
fn every_algorithm_runs() {
    for algo in ["oht-es-continuous", "oht-es-cem", "metagrad", "es-rl"] {
        let root = tempfile::tempdir().unwrap();
        let out = small_run(root.path(), algo, &[]);
        assert!(out.status.success(), "{algo}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(rows(root.path()).1.len(), 3, "{algo}");
    }
}

#[test]
fn prop1_single_row() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().display().to_string();
    let o = oht(&["prop1", "--sigmas", "0.01", "--n", "1000", "--seed", "3", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(root.path().join("prop1.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("sigma,N,es_mean,analytic,rel_err,stderr\n"));
}

#[test]
fn stats_examples() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    assert!(small_run(&run, "td3", &[]).status.success());
    let anchors = root.path().join("anchors.csv");
    std::fs::write(&anchors, "task,low,high\npendulum,0,1\n").unwrap();
    let out = root.path().join("stats");
    let run_s = run.display().to_string();
    let o = oht(&[
        "stats", &format!("a={run_s}"), &format!("b={run_s}"), "--anchors", &anchors.display().to_string(),
        "--out", &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evals: Vec<f64> = rows(&run).1.iter().map(|r| r[1]).collect();
    let text = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    let mut a_means = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.5);
        if f[1] == "a" {
            a_means.push(f[2].parse::<f64>().unwrap());
        }
    }
    assert_eq!(a_means.len(), evals.len());
    for (m, e) in a_means.iter().zip(&evals) {
        assert!((m - e).abs() <= 1e-6 * e.abs(), "{m} vs {e}");
    }
}

#[test]
fn bad_config_exits_with_two() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().display().to_string();
    let o = oht(&["run", "--algo", "td3", "--out", &out, "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = oht(&["run", "--algo", "sarsa", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let bad = root.path().join("bad.cfg");
    std::fs::write(&bad, "tuner.sigma=-1\n").unwrap();
    let o = oht(&["run", "--config", &bad.display().to_string(), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}
