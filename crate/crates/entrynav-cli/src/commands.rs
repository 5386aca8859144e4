//! Command implementations behind the CLI surface.

use crate::config::{ConfigError, RunConfig};
use anyhow::{bail, Context, Result};
use entrynav::atmos::{fit_exponential, sample_truth_atmosphere, ExpModel, TabulatedProfile};
use entrynav::mc::{
    run_case, run_montecarlo, write_density_csv, write_filter_log_csv, write_rmse_series_csv,
    McReport, RunAssets, STATE_NAMES,
};
use entrynav::net::{offline_train, MlpDensityNet};
use entrynav::sensors::write_measurement_csv;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtmosManifest {
    format: u32,
    base_seed: u64,
    count: usize,
    files: Vec<AtmosManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtmosManifestEntry {
    file: String,
    seed: u64,
}

pub fn gen_atmos(cfg: &RunConfig, count: usize, seed: u64, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut entries = Vec::with_capacity(count);
    for idx in 0..count {
        let profile_seed = seed + idx as u64;
        let profile = sample_truth_atmosphere(profile_seed, &cfg.mc.atmos)?;
        let name = format!("atmos_{seed:04}_{idx:03}.csv");
        let mut file = std::fs::File::create(out_dir.join(&name))?;
        profile.write_csv(&mut file)?;
        entries.push(AtmosManifestEntry { file: name, seed: profile_seed });
    }
    let manifest = AtmosManifest { format: 1, base_seed: seed, count, files: entries };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

/// Load every profile listed in the manifest (or every `atmos_*.csv`, sorted,
/// when no manifest exists).
pub fn load_profiles(dir: &Path) -> Result<Vec<TabulatedProfile>> {
    if !dir.is_dir() {
        bail!(ConfigError(format!("atmosphere directory {} does not exist", dir.display())));
    }
    let manifest_path = dir.join("manifest.json");
    let files: Vec<String> = if manifest_path.is_file() {
        let manifest: AtmosManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                .map_err(|e| ConfigError(format!("bad manifest: {e}")))?;
        manifest.files.into_iter().map(|e| e.file).collect()
    } else {
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("atmos_") && n.ends_with(".csv"))
            .collect();
        names.sort();
        names
    };
    if files.is_empty() {
        bail!(ConfigError(format!("no atmosphere profiles found in {}", dir.display())));
    }
    files
        .iter()
        .map(|name| {
            let f = std::fs::File::open(dir.join(name))
                .with_context(|| format!("cannot open profile {name}"))?;
            Ok(TabulatedProfile::read_csv(f)?)
        })
        .collect()
}

pub fn fit_from_dir(cfg: &RunConfig, dir: &Path) -> Result<ExpModel> {
    let profiles = load_profiles(dir)?;
    Ok(fit_exponential(&profiles, cfg.mc.atmos.r_surface)?)
}

pub fn fit_exp(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let fit = fit_from_dir(cfg, &cfg.paths.atmos_dir)?;
    let mut text = serde_json::to_string_pretty(&fit)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainFileReport<'a> {
    format: u32,
    fit: &'a ExpModel,
    report: &'a entrynav::net::TrainReport,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let fit = fit_from_dir(cfg, &cfg.paths.atmos_dir)?;
    let trained = offline_train(
        &fit,
        &cfg.mc.entry.dispersion(),
        &cfg.mc.vehicle(),
        &cfg.training,
        cfg.mc.seed,
    )?;
    if let Some(parent) = cfg.paths.network_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&cfg.paths.network_file, trained.net.to_json())?;

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let report = TrainFileReport { format: 1, fit: &fit, report: &trained.report };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(cfg.paths.out_dir.join("training_report.json"), text)?;

    println!(
        "trained: {} train / {} validation samples, final val loss {:.4e}, {:.2}% of validation under 1% error",
        trained.report.n_train_samples,
        trained.report.n_val_samples,
        trained.report.final_val_loss,
        100.0 * trained.report.val_sub_1pct_fraction,
    );
    Ok(())
}

fn load_assets(cfg: &RunConfig) -> Result<RunAssets> {
    let fit = fit_from_dir(cfg, &cfg.paths.atmos_dir)?;
    let net = if cfg.mc.filters.uskf_nn {
        let path = &cfg.paths.network_file;
        if !path.is_file() {
            bail!(ConfigError(format!(
                "network file {} does not exist (run `train` first or disable uskf_nn)",
                path.display()
            )));
        }
        let net = MlpDensityNet::from_json(&std::fs::read_to_string(path)?)
            .map_err(|e| ConfigError(format!("bad network file: {e}")))?;
        Some(net)
    } else {
        None
    };
    Ok(RunAssets { fit, net })
}

pub fn simulate(cfg: &RunConfig, run_idx: u64) -> Result<()> {
    let assets = load_assets(cfg)?;
    let run = run_case(&cfg.mc, &assets, run_idx)?;
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir)?;

    // Truth trace (the harness grid starts at the first measurement epoch).
    let mut truth_csv = std::fs::File::create(dir.join("truth.csv"))?;
    writeln!(
        truth_csv,
        "t_s,r_m,phi_rad,theta_rad,v_ms,gamma_rad,psi_rad,B_m2kg,LoD,rho_true"
    )?;
    for (k, t) in run.t.iter().enumerate() {
        let x = run.truth[k];
        writeln!(
            truth_csv,
            "{},{},{},{},{},{},{},{},{},{}",
            t, x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], run.rho_true[k]
        )?;
    }

    let meas_rows: Vec<(f64, entrynav::sensors::Measurement)> =
        run.t.iter().copied().zip(run.measurements.iter().copied()).collect();
    let mut meas_csv = std::fs::File::create(dir.join("measurements.csv"))?;
    write_measurement_csv(&meas_rows, &mut meas_csv)?;

    for trace in &run.traces {
        let mut f = std::fs::File::create(dir.join(format!("filter_{}.csv", trace.name)))?;
        write_filter_log_csv(&mut f, &run, trace)?;
        if let Some(reason) = &trace.failed {
            eprintln!("warning: {} failed mid-run: {reason}", trace.name);
        }
    }
    println!("simulated run {run_idx}: {} epochs -> {}", run.t.len(), dir.display());
    Ok(())
}

fn print_report_tables(report: &McReport) {
    // Angles display in degrees, as in the mission tables.
    let unit = ["m", "deg", "deg", "m/s", "deg", "deg", "m2/kg", "-"];
    let to_display = |i: usize, v: f64| -> f64 {
        if unit[i] == "deg" {
            v.to_degrees()
        } else {
            v
        }
    };
    println!("Time-averaged RMSE per state:");
    print!("{:>6} {:>7}", "state", "unit");
    for f in &report.filters {
        print!(" {:>12}", f.name);
    }
    println!();
    for i in 0..8 {
        print!("{:>6} {:>7}", STATE_NAMES[i], unit[i]);
        for f in &report.filters {
            print!(" {:>12.4e}", to_display(i, f.rmse_time_avg[i]));
        }
        println!();
    }
    println!();
    println!("Time-averaged density RMSPE:");
    for f in &report.filters {
        println!("    {:>8}  {:.4} %", f.name, f.rmspe_pct);
    }
    println!();
    println!("3-sigma coverage (v, B):");
    for f in &report.filters {
        println!(
            "    {:>8}  v: {:.4}  B: {:.4}",
            f.name, f.coverage_3sigma[3], f.coverage_3sigma[6]
        );
    }
    if !report.failed_runs.is_empty() {
        println!();
        println!("failed runs: {}", report.failed_runs.len());
        for (idx, msg) in &report.failed_runs {
            println!("    run {idx}: {msg}");
        }
    }
}

pub fn montecarlo(cfg: &RunConfig) -> Result<()> {
    let assets = load_assets(cfg)?;
    let outcome = run_montecarlo(&cfg.mc, &assets)?;
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir)?;

    std::fs::write(dir.join("summary.json"), outcome.report.to_json())?;
    let mut series_csv = std::fs::File::create(dir.join("rmse_series.csv"))?;
    write_rmse_series_csv(&mut series_csv, &outcome.series)?;
    let mut density_csv = std::fs::File::create(dir.join("density.csv"))?;
    write_density_csv(&mut density_csv, &outcome.runs)?;

    print_report_tables(&outcome.report);

    let failed = outcome.report.failed_runs.len();
    if failed * 10 > cfg.mc.n_runs {
        bail!("{failed} of {} runs failed (more than 10%)", cfg.mc.n_runs);
    }
    Ok(())
}

pub fn report(summary: &Path) -> Result<()> {
    if !summary.is_file() {
        bail!(ConfigError(format!("summary file {} does not exist", summary.display())));
    }
    let report: McReport = serde_json::from_str(&std::fs::read_to_string(summary)?)
        .map_err(|e| ConfigError(format!("bad summary file: {e}")))?;
    print_report_tables(&report);
    Ok(())
}
