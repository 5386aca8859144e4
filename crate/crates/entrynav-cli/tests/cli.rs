//! Command-contract tests: naming, determinism, exit codes, flag handling.

use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_entrynav");

fn workdir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("spawn CLI")
}

fn run_ok(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small config: short flight, few runs, no network-dependent filter.
fn write_small_config(dir: &Path) {
    let mut mc = entrynav::mc::McConfig::default();
    mc.t_end_s = 10.0;
    mc.n_runs = 2;
    mc.filters = entrynav::mc::FilterToggles { ukf_cm: true, ukf_ac: true, uskf_nn: false };
    let config = serde_json::json!({
        "format": 1,
        "mc": mc,
        "training": entrynav::net::TrainConfig::default(),
        "n_train_profiles": 3,
        "paths": {"atmos_dir": "atmos", "network_file": "network.json", "out_dir": "out"},
        "log_level": "quiet",
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config).unwrap())
        .unwrap();
}

#[test]
fn gen_atmos_names_and_determinism() {
    let dir = workdir("cli_gen_atmos");
    run_ok(&["gen-atmos", "--count", "3", "--seed", "7", "--out", "profiles"], &dir);
    for name in ["atmos_0007_000.csv", "atmos_0007_001.csv", "atmos_0007_002.csv", "manifest.json"]
    {
        assert!(dir.join("profiles").join(name).is_file(), "{name} missing");
    }
    let first = std::fs::read(dir.join("profiles/atmos_0007_001.csv")).unwrap();
    let manifest1 = std::fs::read(dir.join("profiles/manifest.json")).unwrap();
    run_ok(&["gen-atmos", "--count", "3", "--seed", "7", "--out", "profiles"], &dir);
    assert_eq!(first, std::fs::read(dir.join("profiles/atmos_0007_001.csv")).unwrap());
    assert_eq!(manifest1, std::fs::read(dir.join("profiles/manifest.json")).unwrap());
}

#[test]
fn gen_atmos_zero_count_is_vacuous_success() {
    let dir = workdir("cli_gen_atmos_zero");
    run_ok(&["gen-atmos", "--count", "0", "--seed", "5", "--out", "profiles"], &dir);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("profiles/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["count"], 0);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 0);
}

#[test]
fn fit_exp_reports_model() {
    let dir = workdir("cli_fit_exp");
    write_small_config(&dir);
    run_ok(&["gen-atmos", "--count", "3", "--config", "config.json"], &dir);
    run_ok(&["fit-exp", "--config", "config.json", "--fit-out", "fit.json"], &dir);
    let fit: entrynav::atmos::ExpModel =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap();
    assert!(fit.rho0 > 0.0 && fit.hs > 0.0);
    assert!((fit.hs - 9350.0).abs() < 500.0, "implausible scale height {}", fit.hs);
}

#[test]
fn train_without_atmosphere_dir_exits_2() {
    let dir = workdir("cli_train_missing");
    write_small_config(&dir);
    let out = run(&["train", "--config", "config.json"], &dir);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = workdir("cli_bad_config");
    write_small_config(&dir);
    let text = std::fs::read_to_string(dir.join("config.json"))
        .unwrap()
        .replacen("\"format\": 1,", "\"format\": 1, \"unexpected_key\": true,", 1);
    std::fs::write(dir.join("config.json"), text).unwrap();
    let out = run(&["montecarlo", "--config", "config.json"], &dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_network_file_exits_2() {
    let dir = workdir("cli_missing_net");
    write_small_config(&dir);
    // Re-enable the network filter without providing a network file.
    let text = std::fs::read_to_string(dir.join("config.json"))
        .unwrap()
        .replace("\"uskf_nn\": false", "\"uskf_nn\": true");
    std::fs::write(dir.join("config.json"), text).unwrap();
    run_ok(&["gen-atmos", "--count", "3", "--config", "config.json"], &dir);
    let out = run(&["montecarlo", "--config", "config.json"], &dir);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_filtered_logs_only() {
    let dir = workdir("cli_simulate");
    write_small_config(&dir);
    run_ok(&["gen-atmos", "--count", "3", "--config", "config.json"], &dir);
    run_ok(&["simulate", "--config", "config.json", "--filters", "ukf_cm"], &dir);
    assert!(dir.join("out/filter_ukf_cm.csv").is_file());
    assert!(!dir.join("out/filter_ukf_ac.csv").exists());
    assert!(!dir.join("out/filter_uskf_nn.csv").exists());
    assert!(dir.join("out/truth.csv").is_file());
    assert!(dir.join("out/measurements.csv").is_file());

    // 10 s at 4 Hz: 40 measurement epochs (+ header).
    let meas = std::fs::read_to_string(dir.join("out/measurements.csv")).unwrap();
    assert_eq!(meas.lines().count(), 41);
    assert!(meas.starts_with("t_s,ax,ay,az,q_pa,qdot_wm2\n"));
    let truth = std::fs::read_to_string(dir.join("out/truth.csv")).unwrap();
    assert!(truth.starts_with("t_s,r_m,phi_rad,theta_rad,v_ms,gamma_rad,psi_rad,B_m2kg,LoD,rho_true\n"));
}

#[test]
fn montecarlo_summary_shape_and_report_roundtrip() {
    let dir = workdir("cli_mc_small");
    write_small_config(&dir);
    run_ok(&["gen-atmos", "--count", "3", "--config", "config.json"], &dir);
    let out = run_ok(&["montecarlo", "--config", "config.json"], &dir);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Time-averaged RMSE per state"));

    let summary: entrynav::mc::McReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.filters.len(), 2);
    for f in &summary.filters {
        assert_eq!(f.rmse_time_avg.len(), 8);
    }
    // rmse_series covers every epoch and state for the enabled filters.
    let series = std::fs::read_to_string(dir.join("out/rmse_series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 40 * 8);
    assert!(series.starts_with("t_s,state,ukf_cm,ukf_ac,uskf_nn\n"));
    // Disabled filter leaves empty cells in both CSVs.
    let first_row = series.lines().nth(1).unwrap();
    assert!(first_row.ends_with(','), "expected empty uskf_nn column: {first_row}");

    let report_out = run_ok(&["report", "--config", "config.json"], &dir);
    let report_text = String::from_utf8_lossy(&report_out.stdout);
    assert!(report_text.contains("Time-averaged RMSE per state"));

    let missing = run(&["report", "--summary", "nope.json"], &dir);
    assert_eq!(missing.status.code(), Some(2));
}
