//! The run configuration file: one JSON document driving every command.
//!
//! Angle-valued entries follow the mission tables and are given in degrees;
//! conversion to radians happens when the values are used. Unknown keys are
//! rejected so a typo cannot silently fall back to a default.

use anyhow::{bail, Context, Result};
use entrynav::mc::McConfig;
use entrynav::net::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Marker for errors that should exit with the usage/config code (2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding atmosphere profile CSVs (and their manifest).
    pub atmos_dir: PathBuf,
    /// Trained network JSON.
    pub network_file: PathBuf,
    /// Output directory for reports, logs and traces.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            atmos_dir: PathBuf::from("atmos"),
            network_file: PathBuf::from("network.json"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Quiet,
    #[default]
    Info,
    Debug,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format: u32,
    pub mc: McConfig,
    pub training: TrainConfig,
    /// Number of surrogate profiles used for the exponential fit and training.
    pub n_train_profiles: usize,
    pub paths: Paths,
    pub log_level: LogLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format: 1,
            mc: McConfig::default(),
            training: TrainConfig::default(),
            n_train_profiles: 100,
            paths: Paths::default(),
            log_level: LogLevel::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| ConfigError(format!("cannot read config {}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != 1 {
            bail!(ConfigError(format!("unsupported config format {}", self.format)));
        }
        if self.n_train_profiles == 0 {
            bail!(ConfigError("n_train_profiles must be at least 1".into()));
        }
        self.mc.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.training.validate().map_err(|e| ConfigError(e.to_string()))?;
        for (name, p) in [
            ("paths.atmos_dir", &self.paths.atmos_dir),
            ("paths.network_file", &self.paths.network_file),
            ("paths.out_dir", &self.paths.out_dir),
        ] {
            if p.as_os_str().is_empty() {
                bail!(ConfigError(format!("{name} must not be empty")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialization");
        s.push('\n');
        s
    }
}

/// Parse a `--filters` list like `"ukf_cm,uskf_nn"`.
pub fn parse_filter_list(list: &str) -> Result<entrynav::mc::FilterToggles> {
    let mut toggles =
        entrynav::mc::FilterToggles { ukf_cm: false, ukf_ac: false, uskf_nn: false };
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "ukf_cm" => toggles.ukf_cm = true,
            "ukf_ac" => toggles.ukf_ac = true,
            "uskf_nn" => toggles.uskf_nn = true,
            other => bail!(ConfigError(format!(
                "unknown filter {other:?} (expected ukf_cm, ukf_ac, uskf_nn)"
            ))),
        }
    }
    if !(toggles.ukf_cm || toggles.ukf_ac || toggles.uskf_nn) {
        bail!(ConfigError("--filters selected no filters".into()));
    }
    Ok(toggles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default().to_json();
        text = text.replacen("\"format\": 1,", "\"format\": 1,\n  \"surprise\": 3,", 1);
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn filter_list_parsing() {
        let t = parse_filter_list("uskf_nn").unwrap();
        assert!(!t.ukf_cm && !t.ukf_ac && t.uskf_nn);
        let t = parse_filter_list("ukf_cm, ukf_ac").unwrap();
        assert!(t.ukf_cm && t.ukf_ac && !t.uskf_nn);
        assert!(parse_filter_list("ekf").is_err());
        assert!(parse_filter_list("").is_err());
    }
}
