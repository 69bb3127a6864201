use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use tem_mlmc::cli::{parse_cost_curve_csv, parse_table_csv, EXIT_CONFIG, EXIT_PLANNING};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tem-mlmc-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(sub: &str, config: &str, extra: &[&str]) -> Output {
    let dir = scratch(sub);
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let path = dir.join(format!("{}.json", NEXT.fetch_add(1, Ordering::Relaxed)));
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_tem-mlmc"))
        .arg(sub)
        .arg("--config")
        .arg(&path)
        .args(extra)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_code(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_2_with_distinct_codes() {
    let cases = [
        (r#"{"grid": {"refinement": 1}}"#, "refinement_below_two"),
        (r#"{"problem": {"horizon": 0}}"#, "nonpositive_horizon"),
        (r#"{"problem": {"name": "nope"}}"#, "unknown_name"),
        (r#"{"truncation": {"s_star": 2}}"#, "s_star_out_of_range"),
        (r#"{"n_path": 10}"#, "unknown_field"),
    ];
    for (json, code) in cases {
        let out = run("table", json, &[]);
        assert_eq!(out.status.code(), Some(EXIT_CONFIG), "{json}");
        assert_eq!(error_code(&out), code, "{json}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn missing_config_file_is_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_tem-mlmc"))
        .args(["table", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert_eq!(error_code(&out), "io_error");
}

#[test]
fn planning_error_exits_3() {
    let out = run(
        "mlmc",
        r#"{"epsilon": 0.0001, "grid": {"max_level": 4}, "constants": {"alpha": 0.25, "beta": 0.5, "c1": 1, "c2": 1, "c3": 1}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(EXIT_PLANNING));
    assert_eq!(error_code(&out), "planning_failed");
}

#[test]
fn classic_mlmc_on_lewis_reports_divergence() {
    let out = run(
        "mlmc",
        r#"{"scheme": "classic_em", "epsilon": 0.1, "constants": {"alpha": 1, "beta": 1, "c1": 1, "c2": 1, "c3": 1.5}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["divergent"], true);
    assert_eq!(v["metadata"]["constants_mode"], "theorem");
    assert_eq!(v["metadata"]["scheme"], "classic_em");
}

#[test]
fn zero_sde_mlmc_is_exact() {
    let out = run(
        "mlmc",
        r#"{"problem": {"name": "zero", "x0": 2.5}, "epsilon": 0.05, "constants": {"alpha": 1, "beta": 1, "c1": 1, "c2": 1, "c3": 1.5}}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["estimate"], 2.5);
    let samples: Vec<u64> = v["plan"]["samples"].as_array().unwrap().iter().map(|n| n.as_u64().unwrap()).collect();
    let cost: u64 = samples
        .iter()
        .enumerate()
        .map(|(l, n)| n * if l == 0 { 1 } else { (1 << l) + (1 << (l - 1)) })
        .sum();
    assert_eq!(v["total_cost"].as_f64().unwrap(), cost as f64);
    assert_eq!(v["plan"]["regime"], "beta_equal_one");
    assert!(v["metadata"]["rng"].as_str().unwrap().contains("ChaCha8"));
    assert_eq!(v["metadata"]["payoff"], "identity");
}

#[test]
fn pilot_mode_is_labelled_heuristic() {
    let out = run("mlmc", r#"{"epsilon": 0.1}"#, &[]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["metadata"]["constants_mode"], "pilot");
    assert_eq!(v["metadata"]["pilot"]["heuristic"], true);
    assert!(v["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("omega(2)")));
}

#[test]
fn table_csv_shape_and_div_marker() {
    let out = run("table", r#"{"scheme": "classic_em", "problem": {"x0": 10}, "n_paths": 50}"#, &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("level,y_hat,n_samples,variance,n_nonfinite\n"));
    assert!(!text.contains('\r'));
    let rows = parse_table_csv(&text).unwrap();
    assert_eq!(rows.iter().map(|r| r.level).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert!(rows.iter().any(|r| r.y_hat.is_none()));
    for r in &rows {
        assert_eq!(r.y_hat.is_none(), r.n_nonfinite == r.n_samples);
    }
}

#[test]
fn seed_override_and_repeatability() {
    let a = stdout(&run("table", r#"{"n_paths": 200}"#, &["--seed", "5"]));
    let b = stdout(&run("table", r#"{"n_paths": 200, "seed": 5}"#, &[]));
    let c = stdout(&run("table", r#"{"n_paths": 200, "seed": 6}"#, &[]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cost_curve_columns() {
    let dir = scratch("cost");
    let out = run("cost-curve", r#"{"epsilons": [0.2, 0.1], "seed": 3}"#, &["--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.join("cost_curve.csv")).unwrap();
    assert!(text.starts_with("epsilon,mlmc_cost,mc_cost,ratio\n"));
    let rows = parse_cost_curve_csv(&text).unwrap();
    assert_eq!(rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(), vec![0.2, 0.1]);
    for r in rows {
        assert!(r.ratio > 0.0);
        assert_eq!(r.ratio, r.mc_cost / r.mlmc_cost);
    }
    let detail: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("cost_curve.json")).unwrap()).unwrap();
    assert_eq!(detail["curve"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn unsorted_epsilons_rejected() {
    let out = run("cost-curve", r#"{"epsilons": [0.1, 0.2]}"#, &[]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert_eq!(error_code(&out), "invalid_value");
}

#[test]
fn rates_outputs() {
    let dir = scratch("rates");
    let out = run(
        "rates",
        r#"{"problem": {"name": "gbm", "x0": 1, "params": {"mu": 0.05, "sigma": 0.2}}, "scheme": "classic_em", "n_paths": 2000}"#,
        &["--out", dir.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    let strong = std::fs::read_to_string(dir.join("strong.csv")).unwrap();
    assert!(strong.starts_with("level,step,rms,mean_abs,n_nonfinite\n"));
    let variance = std::fs::read_to_string(dir.join("variance.csv")).unwrap();
    assert!(variance.starts_with("level,step,variance,mean,n_nonfinite\n"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("rates.json")).unwrap()).unwrap();
    assert_eq!(summary["oracle"], "exact");
    for key in ["strong", "variance"] {
        let r2 = summary[key]["fit"]["r_squared"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r2));
    }
    let slope = summary["strong"]["fit"]["slope"].as_f64().unwrap();
    assert!((0.35..=0.65).contains(&slope), "{slope}");
}

#[test]
fn usage_errors_exit_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_tem-mlmc")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}
