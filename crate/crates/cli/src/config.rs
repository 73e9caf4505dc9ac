use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fail::CliError;

/// Whole run configuration; each verb reads its own table plus `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub calibrate: CalibrateConfig,
    pub irl: IrlConfig,
    pub report: ReportConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            simulate: SimulateConfig::default(),
            calibrate: CalibrateConfig::default(),
            irl: IrlConfig::default(),
            report: ReportConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// `gmr`, `lognormal` or `market`.
    pub model: String,
    pub steps: usize,
    pub start_date: String,
    pub tickers: Vec<String>,
    pub dt: f64,
    pub kappa: Vec<f64>,
    pub phi: Vec<f64>,
    pub r_f: f64,
    /// Own-signal loadings, one row per asset.
    pub w: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub x0: Vec<f64>,
    /// OU mean-reversion rate per signal kind.
    pub signal_phi: Vec<f64>,
    /// OU innovation variance per signal kind.
    pub signal_var: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            model: "gmr".into(),
            steps: 250,
            start_date: "2000-01-03".into(),
            tickers: vec!["AAA".into(), "BBB".into(), "CCC".into()],
            dt: 1.0 / 252.0,
            kappa: vec![25.2; 3],
            phi: vec![0.03; 3],
            r_f: 0.0,
            w: vec![vec![0.02, 0.01]; 3],
            sigma2: vec![1e-4; 3],
            x0: vec![0.3; 3],
            signal_phi: vec![0.1, 0.04],
            signal_var: vec![0.01, 0.01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub caps: String,
    /// Per-asset predictors: `ema:<gamma>`, `oracle`, `noise`, or `file`.
    pub signals: Vec<String>,
    /// Long-format `date,ticker,signal,value`, used by `file` entries.
    pub signal_file: String,
    /// `window` demeans inside each calibration window, `sample` over all dates.
    pub demean: String,
    pub per_year: bool,
    /// Windows with fewer dates are skipped.
    pub min_dates: usize,
    pub dt: f64,
    pub phi: f64,
    pub r_f: f64,
    pub reg_lambda: f64,
    /// `arithmetic` or `log`.
    pub form: String,
    pub joint: bool,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            caps: "caps.csv".into(),
            signals: vec!["ema:0.9".into(), "ema:0.96".into()],
            signal_file: String::new(),
            demean: "window".into(),
            per_year: true,
            min_dates: 20,
            dt: 1.0 / 252.0,
            phi: 0.03,
            r_f: 0.0,
            reg_lambda: 1e-2,
            form: "arithmetic".into(),
            joint: false,
            max_iter: 1000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlConfig {
    /// `market` or `investor`.
    pub mode: String,
    pub states: String,
    /// Optional observed actions; empty means latent.
    pub actions: String,
    /// Window length in investor mode.
    pub horizon: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub patience: usize,
    /// Windows per iteration, 0 for the full batch.
    pub batch_size: usize,
    pub step_omega: f64,
    pub step_theta: f64,
    pub max_halvings: usize,
    /// `fd` or `dual`.
    pub grad: String,
    /// `monotone` or `as-written`.
    pub rule: String,
    /// Parameter groups to fit.
    pub fit: Vec<String>,
    pub encoder_var: f64,
    pub delta_ratio: f64,
    pub max_delta_ratio: f64,
    pub refresh_point: bool,
    pub stationary_tol: f64,
    pub stationary_max_iter: usize,
    pub damping: f64,
}

impl Default for IrlConfig {
    fn default() -> Self {
        IrlConfig {
            mode: "market".into(),
            states: "states.csv".into(),
            actions: String::new(),
            horizon: 1,
            max_iter: 200,
            tol: 1e-7,
            patience: 5,
            batch_size: 0,
            step_omega: 1e-3,
            step_theta: 1e-4,
            max_halvings: 40,
            grad: "fd".into(),
            rule: "monotone".into(),
            fit: FIT_GROUPS.iter().map(|s| s.to_string()).collect(),
            encoder_var: 1.0,
            delta_ratio: 1e-3,
            max_delta_ratio: 0.1,
            refresh_point: true,
            stationary_tol: 1e-12,
            stationary_max_iter: 100_000,
            damping: 1.0,
        }
    }
}

pub const FIT_GROUPS: [&str; 10] = [
    "w", "mu", "lambda", "beta", "impact", "upsilon", "fees", "sigma_r", "phi", "sigma_z",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ReportConfig {
    /// Run directories to merge.
    pub inputs: Vec<String>,
}


/// Market model for `simulate` (market) and the starting point of `irl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_assets: usize,
    pub signals: usize,
    pub r_f: f64,
    /// Own-signal loadings, one row per asset.
    pub w: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    /// Residual return variances (diagonal).
    pub sigma_r: Vec<f64>,
    /// Signal mean reversion per kind.
    pub phi: Vec<f64>,
    /// Signal innovation variance per kind.
    pub sigma_z: Vec<f64>,
    pub lambda: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub upsilon: f64,
    pub nu_plus: f64,
    pub nu_minus: f64,
    pub gamma_disc: f64,
    pub beta: f64,
    pub x0: Vec<f64>,
    pub prior_a0: f64,
    pub prior_a1: f64,
    pub prior_rho: f64,
    pub prior_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_assets: 1,
            signals: 2,
            r_f: 0.0,
            w: vec![vec![0.02, 0.01]],
            mu: vec![0.05],
            sigma_r: vec![1e-4],
            phi: vec![0.1, 0.04],
            sigma_z: vec![0.01, 0.01],
            lambda: 0.5,
            gamma_plus: 0.01,
            gamma_minus: 0.01,
            upsilon: 0.001,
            nu_plus: 0.001,
            nu_minus: 0.001,
            gamma_disc: 0.9,
            beta: 1.0,
            x0: vec![1.0],
            prior_a0: 0.0,
            prior_a1: 0.0,
            prior_rho: 0.0,
            prior_sigma: 0.01,
        }
    }
}

/// Parsed configuration plus the keys the file set explicitly.
pub struct Loaded {
    pub config: RunConfig,
    given: toml::Table,
}

impl Loaded {
    /// Dotted keys of `section` that fell back to defaults.
    pub fn defaulted(&self, section: &str) -> Vec<String> {
        let full = toml::Table::try_from(&self.config).expect("config serializes");
        let mut out = Vec::new();
        let given = self.given.get(section).and_then(|v| v.as_table());
        if let Some(toml::Value::Table(t)) = full.get(section) {
            for (k, v) in t {
                if given.is_none_or(|g| !g.contains_key(k)) {
                    out.push(format!("{section}.{k} = {v}"));
                }
            }
        }
        out
    }

    pub fn seed_defaulted(&self) -> bool {
        !self.given.contains_key("seed")
    }
}

pub fn load(path: Option<&Path>) -> Result<Loaded, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse(&text)
}

pub fn parse(text: &str) -> Result<Loaded, CliError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    let given: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    Ok(Loaded { config, given })
}

/// The tables a verb used, as written next to its outputs.
pub fn resolved(config: &RunConfig, sections: &[&str]) -> String {
    let full = toml::Table::try_from(config).expect("config serializes");
    let mut out = toml::Table::new();
    out.insert("seed".into(), full["seed"].clone());
    for s in sections {
        out.insert((*s).into(), full[*s].clone());
    }
    toml::to_string(&out).expect("table serializes")
}
