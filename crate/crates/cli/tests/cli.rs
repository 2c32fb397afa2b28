use serde_json::Value;
use specdiff_core::engine::RelaxProfile;
use specdiff_core::MlpNet;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn specdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdiff"))
        .args(args)
        .env_remove("SPECDIFF_OUT")
        .output()
        .expect("spawn specdiff")
}

fn ok(args: &[&str]) -> Output {
    let out = specdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small training config: T = 20, tiny target fit.
fn small_config(dir: &Path, drafter_epochs: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schedule": { "steps": 20, "beta_min": 1e-3, "beta_max": 0.2 },
        "seed": 3,
        "fit": { "hidden": [8, 8], "epochs": 20 },
        "train": { "epochs": drafter_epochs, "batches_per_epoch": 4, "batch_size": 32 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn zero_epoch_training_keeps_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 0);
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let target: MlpNet = serde_json::from_value(json(&run.join("target.json"))).unwrap();
    let drafter: MlpNet = serde_json::from_value(json(&run.join("drafter.json"))).unwrap();
    let fresh = MlpNet::new(2, target.feature_dim(), &[target.feature_dim()], 20, 3).unwrap();
    assert_eq!(drafter, fresh);
    let (_, rows) = csv_rows(&run.join("training.csv"));
    assert!(rows.is_empty());
}

#[test]
fn training_loss_decreases() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 25);
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let (header, rows) = csv_rows(&run.join("training.csv"));
    assert_eq!(header, ["epoch", "L_noise", "L_feat", "L_smooth", "total"]);
    assert_eq!(rows.len(), 25);
    let total = |r: &Vec<String>| r[4].parse::<f64>().unwrap();
    assert!(total(rows.last().unwrap()) < total(&rows[0]));
    let (fit_header, fit_rows) = csv_rows(&run.join("target_fit.csv"));
    assert_eq!(fit_header, ["epoch", "mse"]);
    assert_eq!(fit_rows.len(), 20);
}

#[test]
fn vanilla_efficiency_is_one() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    ok(&["sample", "--mode", "vanilla", "--steps", "20", "--samples", "7", "--out", s(&run)]);
    let m = json(&run.join("metrics.json"));
    assert_eq!(m["efficiency"], 1.0);
    assert_eq!(m["modeled_speedup"], 1.0);
    let (header, rows) = csv_rows(&run.join("samples.csv"));
    assert_eq!(header, ["x0", "x1"]);
    assert_eq!(rows.len(), 7);
}

#[test]
fn oracle_drafter_reaches_ceiling() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    ok(&["sample", "--drafter", "oracle", "--steps", "10", "-l", "4", "--samples", "5", "--out", s(&run)]);
    let m = json(&run.join("metrics.json"));
    assert_eq!(m["efficiency"], 2.5);
    assert_eq!(m["mean_acceptance"], 1.0);
}

#[test]
fn unit_profile_matches_strict_sampling() {
    let tmp = TempDir::new().unwrap();
    let profile = tmp.path().join("ones.json");
    std::fs::write(&profile, RelaxProfile::constant(20, 1.0).unwrap().to_json()).unwrap();
    let strict = tmp.path().join("strict");
    let relaxed = tmp.path().join("relaxed");
    let common = ["--steps", "20", "--samples", "30", "--seed", "11"];
    ok(&[&["sample", "--out", s(&strict)][..], &common].concat());
    ok(&[&["sample", "--mode", "free-relax", "--relax", s(&profile), "--out", s(&relaxed)][..], &common].concat());
    assert_eq!(
        std::fs::read_to_string(strict.join("samples.csv")).unwrap(),
        std::fs::read_to_string(relaxed.join("samples.csv")).unwrap()
    );
    let (a, b) = (json(&strict.join("metrics.json")), json(&relaxed.join("metrics.json")));
    assert_eq!(a["efficiency"], b["efficiency"]);
    assert_eq!(a["mean_acceptance"], b["mean_acceptance"]);
}

#[test]
fn free_relax_without_profile_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let out = specdiff(&["sample", "--mode", "free-relax", "--steps", "5", "--out", s(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("relaxation profile"));
}

#[test]
fn sweeps_write_one_row_per_value() {
    let tmp = TempDir::new().unwrap();
    let one = tmp.path().join("one");
    ok(&["sweep", "--axis", "l", "--values", "2", "--steps", "20", "--samples", "10", "--out", s(&one)]);
    let (header, rows) = csv_rows(&one.join("sweep.csv"));
    assert_eq!(header, ["value", "efficiency", "modeled_speedup", "mean_acceptance"]);
    assert_eq!(rows.len(), 1);

    let relax = tmp.path().join("relax");
    ok(&["sweep", "--axis", "relax", "--values", "1,0", "--steps", "20", "--samples", "10", "--out", s(&relax)]);
    let (_, rows) = csv_rows(&relax.join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    // λ = 0 accepts every draft.
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), 1.0);

    let eps = tmp.path().join("eps");
    ok(&["sweep", "--axis", "epsilon", "--values", "0.5,1,2", "--steps", "20", "--samples", "10", "--out", s(&eps)]);
    assert_eq!(csv_rows(&eps.join("sweep.csv")).1.len(), 3);
}

fn small_certify(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schedule": { "steps": 30, "beta_min": 1e-3, "beta_max": 0.2 },
        "certify": { "coupling_configs": 8, "coupling_draws": 20000, "lossless_samples": 600, "permutations": 100 }
    });
    let path = dir.join("certify.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn certify_passes_and_catches_bias() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_certify(tmp.path());
    let good = tmp.path().join("good");
    ok(&["certify", "--config", s(&cfg), "--out", s(&good)]);
    let report = json(&good.join("report.json"));
    assert_eq!(report["pass"], true);
    let checks = report["checks"].as_array().unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["rmc-unbiasedness", "maximal-coupling-law", "losslessness", "oracle-identity"]);
    assert!(checks.iter().all(|c| c["statistic"].is_number() && c["threshold"].is_number()));

    let bad = tmp.path().join("bad");
    let out = specdiff(&["certify", "--config", s(&cfg), "--inject-bias", "0.5", "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&bad.join("report.json"));
    assert_eq!(report["pass"], false);
    let lossless = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "losslessness").unwrap();
    assert_eq!(lossless["pass"], false);
}

#[test]
fn constant_trace_gives_unit_profile() {
    let tmp = TempDir::new().unwrap();
    let trace = tmp.path().join("trace.csv");
    let mut text = String::from("step,eps_delta,accept_prob\n");
    for step in 1..=12 {
        text += &format!("{step},0.3,0.8\n");
    }
    std::fs::write(&trace, text).unwrap();
    let run = tmp.path().join("run");
    ok(&["fit-relax", "--trace", s(&trace), "--out", s(&run)]);
    let profile = RelaxProfile::from_json(&std::fs::read_to_string(run.join("profile.json")).unwrap()).unwrap();
    assert_eq!(profile.lambda, vec![1.0; 12]);
}

#[test]
fn bad_arguments_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("r");
    let cases: [(&[&str], &str); 5] = [
        (&["sample", "--config", "/no/such/config.json"], "config"),
        (&["sample", "--drafter", "/no/such/drafter.json"], "does not exist"),
        (&["sample", "--steps", "0"], "T = 0"),
        (&["sample", "-l", "0"], "speculation length"),
        (&["sample", "--epsilon=-1"], "epsilon"),
    ];
    for (args, needle) in cases {
        let out = specdiff(&[args, &["--out", s(&out_dir)]].concat());
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn default_output_root_comes_from_env() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_specdiff"))
        .args(["sample", "--mode", "vanilla", "--steps", "5", "--samples", "2", "--seed", "42"])
        .env("SPECDIFF_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let runs: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_str().unwrap().starts_with("sample-"));
    let manifest = json(&runs[0].join("manifest.json"));
    assert_eq!(manifest["command"], "sample");
    assert_eq!(manifest["seed"], 42);
    assert_eq!(json(&runs[0].join("config.json"))["schedule"]["steps"], 5);
}

/// train -> selfspec -> fit-relax -> relaxed sampling with the learned
/// drafter, all through checkpoints on disk.
#[test]
fn full_pipeline_through_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 10);
    let train = tmp.path().join("train");
    ok(&["train", "--config", s(&cfg), "--out", s(&train)]);
    let target = train.join("target.json");
    let drafter = train.join("drafter.json");

    let spec = tmp.path().join("spec");
    ok(&["selfspec", "--config", s(&cfg), "--target", s(&target), "--samples", "5", "--out", s(&spec)]);
    let (header, rows) = csv_rows(&spec.join("trace.csv"));
    assert_eq!(header, ["step", "eps_delta", "accept_prob"]);
    assert!(!rows.is_empty());
    assert!(json(&spec.join("trace_summary.json"))["trend"].is_number());

    let fit = tmp.path().join("fit");
    ok(&["fit-relax", "--trace", s(&spec.join("trace.csv")), "--out", s(&fit)]);
    let profile = fit.join("profile.json");

    let run = tmp.path().join("run");
    ok(&[
        "sample", "--config", s(&cfg), "--target", s(&target), "--drafter", s(&drafter), "--mode", "free-relax",
        "--relax", s(&profile), "--samples", "20", "--out", s(&run),
    ]);
    let m = json(&run.join("metrics.json"));
    assert!(m["efficiency"].as_f64().unwrap() >= 1.0);

    // A checkpoint built for another T is refused.
    let out = specdiff(&["sample", "--target", s(&target), "--steps", "30", "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("T = 20"));
}
