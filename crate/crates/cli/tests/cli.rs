use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asap_core::baselines::{evaluate_solution, Solution};
use asap_core::checkpoint::save_checkpoint;
use asap_core::instance::Instance;
use asap_core::policy::{PolicyConfig, PolicyNet};
use asap_core::ppo::TrainConfig;

fn asap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asap")).args(args).output().expect("run asap")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_checkpoint(dir: &Path) -> PathBuf {
    let cfg = PolicyConfig {
        embed_dim: 16,
        heads: 4,
        encoder_layers: 1,
        ff_dim: 32,
        critic_hidden: 8,
        ..PolicyConfig::default()
    };
    let path = dir.join("small.bin");
    save_checkpoint(&PolicyNet::new(cfg, 3).unwrap(), &TrainConfig::desk(), 0, &path).unwrap();
    path
}

#[test]
fn generate_is_deterministic_and_names_files() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for dir in [&a, &b] {
        let out = asap(&["generate", "--nodes", "50", "--seed", "1234", "--count", "2", "--out-dir", &s(dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["N50_s1234.json", "N50_s1235.json"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap());
        assert_eq!(Instance::load(&a.join(name)).unwrap().num_nodes(), 51);
    }
    let out = asap(&["generate", "--nodes", "1", "--out-dir", &s(&a)]);
    assert!(out.status.success());
    assert_eq!(Instance::load(&a.join("N1_s0.json")).unwrap().num_customers(), 1);
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = asap(&["generate", "--nodes", "0", "--out-dir", &s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--nodes"));
    let out = asap(&["generate", "--tmin", "500", "--tmax", "100", "--out-dir", &s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tmin"));
    let out = asap(&["train", "--envs", "10", "--minibatches", "4"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = d.path().join("missing.json");
    let out = asap(&["plot", "--trace", &s(&missing), "--out", &s(&d.path().join("x.svg"))]);
    assert_eq!(out.status.code(), Some(2));
    let blocker = d.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = asap(&["generate", "--out-dir", &s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_defaults() {
    let out = asap(&["train", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--nodes", "--envs", "--updates", "--traj", "--dim", "--heads", "--layers", "--lr", "--gamma", "--gae-lambda",
        "--clip", "--ent-coef", "--vf-coef", "--minibatches", "--epochs", "--penalty", "--seed", "--out-dir",
        "--eval-every",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 10]") && text.contains("[default: 0.99]"));
}

#[test]
fn solve_is_deterministic_and_feasible() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_checkpoint(d.path());
    assert!(asap(&["generate", "--nodes", "8", "--seed", "5", "--out-dir", &s(d.path())]).status.success());
    let inst = d.path().join("N8_s5.json");
    let run = |out: &Path| {
        let o = asap(&["solve", "--instance", &s(&inst), "--checkpoint", &s(&ckpt), "--out", &s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (d.path().join("a.json"), d.path().join("b.json"));
    run(&a);
    run(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let sol = Solution::load(&a).unwrap();
    let m = evaluate_solution(&sol.tours, &Instance::load(&inst).unwrap(), 10.0).unwrap();
    assert!(m.violations.is_empty());
    assert!((m.objective - sol.objective).abs() < 1e-9);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_checkpoint(d.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    assert!(asap(&["generate", "--nodes", "4", "--out-dir", &s(d.path())]).status.success());
    let out = asap(&[
        "solve",
        "--instance",
        &s(&d.path().join("N4_s0.json")),
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&d.path().join("o.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn benchmark_writes_rows_deviation_and_size_guard() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("inst");
    assert!(asap(&["generate", "--nodes", "5", "--seed", "1", "--count", "2", "--out-dir", &s(&dir)]).status.success());
    assert!(asap(&["generate", "--nodes", "12", "--seed", "9", "--out-dir", &s(&dir)]).status.success());
    let csv_path = d.path().join("results.csv");
    let out = asap(&[
        "benchmark",
        "--instances-dir",
        &s(&dir),
        "--solvers",
        "greedy,oracle",
        "--out",
        &s(&csv_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(&csv_path).unwrap();
    let header = rd.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        assert_eq!(&pair[0][col("solver")], "greedy");
        assert_eq!(&pair[1][col("solver")], "oracle");
        assert_eq!(&pair[0][col("relative_deviation")], "0.0");
        if &pair[1][col("nodes")] == "12" {
            assert!(pair[1][col("note")].contains("skipped"));
            assert!(pair[1][col("objective")].is_empty());
        } else {
            let g: f64 = pair[0][col("objective")].parse().unwrap();
            let o: f64 = pair[1][col("objective")].parse().unwrap();
            let dev: f64 = pair[1][col("relative_deviation")].parse().unwrap();
            assert!(o <= g + 1e-12);
            assert!((dev - (o - g) / g).abs() < 1e-12);
        }
    }
    let out = asap(&["benchmark", "--instances-dir", &s(&dir), "--solvers", "policy", "--out", &s(&csv_path)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plotting_leaves_inputs_untouched() {
    let d = tempfile::tempdir().unwrap();
    assert!(asap(&["generate", "--nodes", "10", "--seed", "2", "--out-dir", &s(d.path())]).status.success());
    let inst = d.path().join("N10_s2.json");
    let sol = d.path().join("empty.json");
    Solution::empty("greedy").save(&sol).unwrap();
    let before = (std::fs::read(&inst).unwrap(), std::fs::read(&sol).unwrap());
    let svg = d.path().join("route.svg");
    let out = asap(&["plot", "--solution", &s(&sol), "--instance", &s(&inst), "--out", &s(&svg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(before, (std::fs::read(&inst).unwrap(), std::fs::read(&sol).unwrap()));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.contains("total distance 0.000"));
    assert_eq!(text.matches(r#"class="customer""#).count(), 10);
    let out = asap(&["plot", "--solution", &s(&sol), "--out", &s(&svg)]);
    assert_eq!(out.status.code(), Some(1));
}
