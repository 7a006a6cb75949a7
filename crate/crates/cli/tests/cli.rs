use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use lotto_cli::experiments::{run_directional, DirectionalSettings};
use lotto_cli::manifest::{list_artifacts, ExperimentManifest};
use lotto_cli::report::CSV_COLUMNS;
use lotto_cli::ExperimentConfig;
use lotto_core::data::{synthetic_dataset_sized, CIFAR_SIDE};
use lotto_core::metrics::{RobustnessReport, TicketReport};
use serde_json::{json, Value};
use tempfile::TempDir;

fn base_config() -> Value {
    json!({
        "model": {"depth": 8, "width": 2, "classes": 2, "input_size": 8},
        "data": {"source": "synthetic", "seed": 1, "n_train": 32, "n_test": 16, "separability": 1.0},
        "train": {"epochs_n": 4, "seed": 3, "batch_size": 8},
        "prune": {"criterion": "grasp", "p": 1, "xi": 1.0, "rewind": "init"},
        "report": {"out_dir": "out"}
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write_config(&self, name: &str, config: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(config).unwrap()).unwrap();
        p
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn lotto(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lotto"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("LOTTO_OUT")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn run(&self, command: &str, config: &Value, extra: &[&str]) -> Output {
        let cfg = self.write_config("cfg.json", config);
        let mut args = vec![command, "--config", cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        self.lotto(&args)
    }

    fn run_ok(&self, command: &str, config: &Value, extra: &[&str]) -> String {
        let out = self.run(command, config, extra);
        assert!(out.status.success(), "{command} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn error_line(out: &Output) -> (String, i32, String) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with("lotto-error ")).unwrap_or_else(|| panic!("no error line in {stderr}"));
    let rest = line.strip_prefix("lotto-error kind=").unwrap();
    let (kind, rest) = rest.split_once(" code=").unwrap();
    let (code, msg) = rest.split_once(" message=").unwrap();
    (kind.to_string(), code.parse().unwrap(), serde_json::from_str(msg).unwrap())
}

fn reports(dir: &Path) -> Vec<TicketReport> {
    serde_json::from_str(&fs::read_to_string(dir.join("ticket_report.json")).unwrap()).unwrap()
}

fn manifest(dir: &Path) -> ExperimentManifest {
    ExperimentManifest::read(&ExperimentManifest::path_in(dir)).unwrap()
}

/// Epoch curves without the timing column.
fn curves(log_csv: &str) -> Vec<String> {
    log_csv
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn usage_and_help_exit_codes() {
    let ws = Workspace::new();
    let out = ws.lotto(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out).0, "validation");
    assert_eq!(ws.lotto(&["--help"]).status.code(), Some(0));
    assert_eq!(ws.lotto(&["--version"]).status.code(), Some(0));
    let out = ws.lotto(&["train-dense", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_keys_and_bad_values_are_validation_errors() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["train"]["epochs"] = json!(3);
    let out = ws.run("train-dense", &cfg, &[]);
    let (kind, code, msg) = error_line(&out);
    assert_eq!((out.status.code(), kind.as_str(), code), (Some(1), "validation", 1));
    assert!(msg.contains("epochs"), "{msg}");

    let mut cfg = base_config();
    cfg["prune"]["xi"] = json!(-1.0);
    assert_eq!(ws.run("init-lth", &cfg, &[]).status.code(), Some(1));
    assert!(!ws.out().exists());
}

#[test]
fn divergence_is_a_runtime_error() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["train"]["lr"] = json!(1e30);
    let out = ws.run("train-dense", &cfg, &[]);
    let (kind, code, _) = error_line(&out);
    assert_eq!((out.status.code(), kind.as_str(), code), (Some(2), "runtime", 2));
}

#[test]
fn reruns_are_no_ops_unless_forced() {
    let ws = Workspace::new();
    let cfg = base_config();
    let started = Instant::now();
    assert!(ws.run_ok("train-dense", &cfg, &[]).contains("status=ran"));
    assert!(started.elapsed().as_secs() < 60);
    let dir = ws.out().join("train-dense");
    let first = fs::read(dir.join("manifest.json")).unwrap();
    assert!(ws.run_ok("train-dense", &cfg, &[]).contains("status=up-to-date"));
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), first);

    assert!(ws.run_ok("train-dense", &cfg, &["--force"]).contains("status=ran"));

    // A different configuration must not silently overwrite the results.
    let mut other = cfg.clone();
    other["train"]["seed"] = json!(4);
    let out = ws.run("train-dense", &other, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).2.contains("--force"));

    // An incomplete directory is recomputed.
    fs::remove_file(dir.join("train_log.csv")).unwrap();
    assert!(ws.run_ok("train-dense", &cfg, &[]).contains("status=ran"));
    assert!(dir.join("train_log.csv").is_file());
}

#[test]
fn output_root_precedence() {
    let ws = Workspace::new();
    let cfg = ws.write_config("cfg.json", &base_config());
    let run = |env: Option<&str>, out: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lotto"));
        c.args(["train-dense", "--config", cfg.to_str().unwrap()]).current_dir(ws.dir.path()).env("RUST_LOG", "warn");
        match env {
            Some(e) => c.env("LOTTO_OUT", ws.path(e)),
            None => c.env_remove("LOTTO_OUT"),
        };
        if let Some(o) = out {
            c.arg("--out").arg(ws.path(o));
        }
        assert!(c.status().unwrap().success());
    };
    run(Some("from_env"), Some("from_flag"));
    run(Some("from_env"), None);
    run(None, None);
    for d in ["from_flag", "from_env", "out"] {
        assert!(ws.path(d).join("train-dense/manifest.json").is_file(), "{d}");
    }
}

#[test]
fn zero_epochs_keeps_only_the_initial_checkpoint() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["train"]["epochs_n"] = json!(0);
    ws.run_ok("train-dense", &cfg, &[]);
    let dir = ws.out().join("train-dense");
    let ckpts: Vec<String> = fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ckpts, vec!["epoch_0000"]);
    assert_eq!(fs::read_to_string(dir.join("train_log.csv")).unwrap().lines().count(), 1);
}

#[test]
fn same_config_gives_identical_curves() {
    let ws = Workspace::new();
    let cfg = base_config();
    ws.run_ok("train-dense", &cfg, &["--out", "a"]);
    ws.run_ok("train-dense", &cfg, &["--out", "b"]);
    let read = |root: &str| fs::read_to_string(ws.path(root).join("train-dense/train_log.csv")).unwrap();
    let (a, b) = (read("a"), read("b"));
    assert_eq!(curves(&a), curves(&b));
    assert_eq!(curves(&a).len(), 5);
    assert_eq!(manifest(&ws.path("a/train-dense")).config_digest, manifest(&ws.path("b/train-dense")).config_digest);
}

#[test]
fn every_emitted_file_is_in_the_manifest() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["prune"]["p"] = json!([0, 1]);
    cfg["prune"]["filter_baseline"] = json!(true);
    ws.run_ok("init-lth", &cfg, &[]);
    for cmd in ["train-dense", "init-lth"] {
        let dir = ws.out().join(cmd);
        let m = manifest(&dir);
        assert_eq!(m.artifacts, list_artifacts(&dir).unwrap(), "{cmd}");
        assert_eq!(m.command, cmd);
        assert!(m.seeds.contains_key("train"));
        assert_eq!(m.inputs.len(), 1);
        assert_eq!(m.inputs[0].git_blob_sha1.len(), 40);
        // The digest does not depend on formatting or key order.
        let reparsed = ExperimentConfig::from_json(&serde_json::to_string(&m.config).unwrap(), Path::new("/")).unwrap();
        assert_eq!(reparsed.digest().unwrap(), m.config_digest);
    }
}

#[test]
fn init_lth_p0_row_has_zero_delta() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["prune"]["p"] = json!(0);
    ws.run_ok("init-lth", &cfg, &[]);
    let rows = reports(&ws.out().join("init-lth"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].delta_pp, 0.0);
    assert_eq!(rows[0].sub_acc, rows[0].dense_acc);
    assert!(rows[0].win);
}

#[test]
fn lth_rewind_sweep_has_a_row_per_checkpoint_and_reinit() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["prune"] = json!({"criterion": "random", "p": [0, 1], "rewind": 0, "rewind_sweep": true});
    ws.run_ok("lth", &cfg, &[]);
    let rows = reports(&ws.out().join("lth"));
    let labels: Vec<(usize, String)> = rows.iter().map(|r| (r.provenance.p, r.provenance.rewind.to_string())).collect();
    let mut expected = Vec::new();
    for p in [0, 1] {
        for r in ["theta_0", "theta_1", "theta_2", "theta_3", "reinit"] {
            expected.push((p, r.to_string()));
        }
    }
    assert_eq!(labels, expected);
    // Later rewinds restart with fresh momentum, so only theta_0 replays the dense run exactly.
    assert_eq!(rows[0].delta_pp, 0.0);
}

#[test]
fn lth_rejects_init_rewind() {
    let ws = Workspace::new();
    let out = ws.run("lth", &base_config(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).2.contains("init-lth"));
}

#[test]
fn grasp_sweep_emits_five_rows() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["model"]["depth"] = json!(20);
    cfg["train"]["epochs_n"] = json!(1);
    cfg["prune"]["p"] = json!([1, 2, 3, 4, 5]);
    ws.run_ok("init-lth", &cfg, &[]);
    let rows = reports(&ws.out().join("init-lth"));
    let grasp: Vec<usize> = rows.iter().map(|r| r.provenance.p).collect();
    assert_eq!(grasp, vec![1, 2, 3, 4, 5]);
    assert!(rows.iter().all(|r| r.provenance.criterion == "grasp"));
    let table = fs::read_to_string(ws.out().join("init-lth/table.md")).unwrap();
    assert_eq!(table.lines().count(), 2 + 5);
    // Deeper cuts never cost more.
    let flops: Vec<u64> = rows.iter().filter(|r| r.provenance.criterion == "grasp").map(|r| r.sub_cost.flops).collect();
    assert!(flops.windows(2).all(|w| w[1] < w[0]), "{flops:?}");
}

#[test]
fn filter_baseline_row_matches_the_layer_plan() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["model"]["depth"] = json!(20);
    cfg["model"]["width"] = json!(4);
    cfg["train"]["epochs_n"] = json!(1);
    cfg["prune"]["p"] = json!([1, 2]);
    cfg["prune"]["filter_baseline"] = json!(true);
    ws.run_ok("init-lth", &cfg, &[]);
    let dir = ws.out().join("init-lth");
    let rows = reports(&dir);
    let labels: Vec<(String, usize)> = rows.iter().map(|r| (r.provenance.criterion.clone(), r.provenance.p)).collect();
    let expected: Vec<(String, usize)> = [("grasp", 1), ("filter_grasp", 1), ("grasp", 2), ("filter_grasp", 2)]
        .into_iter()
        .map(|(c, p)| (c.to_string(), p))
        .collect();
    assert_eq!(labels, expected);
    let plans: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.join("filter_plans.json")).unwrap()).unwrap();
    assert_eq!(plans.len(), 2);
    for plan in &plans {
        assert_eq!(plan["target_filter_count"], plan["achieved_filter_count"]);
    }

    // Deep cuts remove more filters than conv1-only filter pruning can reach.
    cfg["model"]["width"] = json!(2);
    cfg["prune"]["p"] = json!(5);
    let out = ws.run("init-lth", &cfg, &["--force"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).2.contains("infeasible"));
}

#[test]
fn robustness_clean_suite_and_external_set() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["model"] = json!({"depth": 8, "width": 2, "classes": 10, "input_size": 32});
    cfg["data"] = json!({"source": "synthetic", "seed": 1, "n_train": 40, "n_test": 20, "separability": 1.0});
    cfg["train"]["epochs_n"] = json!(1);
    cfg["prune"]["p"] = json!(0);
    cfg["robustness"] = json!({"corruptions": [{"kind": "gaussian_noise", "severity": 2}, {"kind": "contrast", "severity": 5}]});

    // Before any sub-network exists the command refuses to run.
    let out = ws.run("robustness", &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));

    ws.run_ok("init-lth", &cfg, &[]);
    let external = synthetic_dataset_sized(9, 12, 10, 0.5, CIFAR_SIDE).unwrap();
    fs::write(ws.path("external.bin"), external.to_binary().unwrap()).unwrap();
    ws.run_ok("robustness", &cfg, &["--eval", "external.bin"]);
    let dir = ws.out().join("robustness");
    let report: RobustnessReport = serde_json::from_str(&fs::read_to_string(dir.join("robustness.json")).unwrap()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(names, vec!["clean", "gaussian_noise-2", "contrast-5", "external"]);
    // p = 0: the sub-network is the dense network, so every delta vanishes.
    assert!(report.rows.iter().all(|r| r.delta_pp == 0.0 && r.dense_acc == r.sub_acc));
    assert!(manifest(&dir).inputs.iter().any(|i| i.path.ends_with("external.bin")));

    // The external file must fit the model's label space and resolution.
    let small = base_config();
    ws.run_ok("init-lth", &small, &["--out", "small"]);
    let out = ws.run("robustness", &small, &["--out", "small", "--eval", "external.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).2.contains("do not match"));
}

#[test]
fn report_from_a_single_manifest() {
    let ws = Workspace::new();
    let cfg = base_config();
    ws.run_ok("init-lth", &cfg, &[]);
    ws.run_ok("report", &cfg, &["out/init-lth/manifest.json"]);
    let dir = ws.out().join("report");
    let table = fs::read_to_string(dir.join("table.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| grasp")).count(), 1);
    assert!(!dir.join("l1_stage.svg").exists());
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 1);
}

#[test]
fn report_is_a_pure_function_of_its_manifests() {
    let ws = Workspace::new();
    let mut cfg = base_config();
    cfg["model"]["depth"] = json!(14);
    cfg["train"]["epochs_n"] = json!(2);
    cfg["robustness"] = json!({"corruptions": [{"kind": "gaussian_noise", "severity": 1}]});
    ws.run_ok("init-lth", &cfg, &[]);
    ws.run_ok("robustness", &cfg, &[]);
    ws.run_ok("report", &cfg, &[]);
    let dir = ws.out().join("report");
    let files = ["table.md", "metrics.csv", "l1_stage.svg"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    ws.run_ok("report", &cfg, &["--force"]);
    let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    assert_eq!(first, second);

    let svg = String::from_utf8(first[2].clone()).unwrap();
    for label in ["stage 1 (8x8)", "stage 2 (4x4)", "stage 3 (2x2)"] {
        assert!(svg.contains(label), "{label}");
    }
    let table = String::from_utf8(first[0].clone()).unwrap();
    assert!(table.contains("Robustness") && table.contains("Mean raw l1 score by stage"));
}

#[test]
fn report_lists_missing_artifacts() {
    let ws = Workspace::new();
    let cfg = base_config();
    ws.run_ok("init-lth", &cfg, &[]);
    fs::remove_file(ws.out().join("init-lth/table.md")).unwrap();
    fs::remove_file(ws.out().join("train-dense/dense.json")).unwrap();
    let out = ws.run("report", &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
    let msg = error_line(&out).2;
    assert!(msg.contains("table.md") && msg.contains("dense.json"), "{msg}");
}

#[test]
fn directional_runner_at_toy_scale() {
    let all = synthetic_dataset_sized(5, 60, 3, 1.0, 8).unwrap();
    let train = all.take(40).unwrap();
    let test = all.subset(&(40..60).collect::<Vec<_>>()).unwrap();
    let settings = DirectionalSettings {
        depth: 14,
        width: 2,
        epochs: 2,
        batch_size: 10,
        train_limit: None,
        test_limit: None,
        seeds: vec![0, 1],
        grasp_p: vec![1, 2],
        snip_p: vec![3],
        xi: 1.0,
        augment: false,
    };
    let report = run_directional(&train, &test, &settings).unwrap();
    assert_eq!(report.rows.len(), 2 * 3);
    assert_eq!(report.grasp_low_wins.len(), 2);
    let grasp: Vec<f64> = report.rows.iter().filter(|r| r.criterion.as_str() == "grasp").map(|r| r.delta_pp).collect();
    assert!((report.grasp_mean_delta - grasp.iter().sum::<f64>() / grasp.len() as f64).abs() < 1e-12);
    assert_eq!(report.ordering_holds, report.grasp_mean_delta >= report.snip_mean_delta);
    assert!(report.to_markdown().contains("ordering"));
}
