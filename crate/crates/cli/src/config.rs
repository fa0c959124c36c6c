//! Run configuration: a flat `key = value` file plus command-line overrides.

use crate::CliError;
use clap::Args;
use quench_core::Perturbation;
use std::path::{Path, PathBuf};

/// Every knob of a run. Keys in files use snake_case; flags use kebab-case.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Power of the absorption term, `p < 0`.
    pub p: f64,
    /// Initial curvature, `0 <= b0 <= 1`.
    pub b0: f64,
    /// Initial height constant, `1/2 <= c0 <= 2`.
    pub c0: f64,
    /// Perturbation size, `0 <= delta0 <= 10`.
    pub delta0: f64,
    pub perturbation: Perturbation,
    /// Initial scale of the rescaled run, `> 0`.
    pub lambda0: f64,
    /// Half-width of the physical grid, `> 0`.
    pub grid_l: f64,
    /// Node count of the physical grid, odd and at least 5.
    pub grid_n: usize,
    /// Half-width of the rescaled grid, `0 < l_y <= 200`; spacing is fixed at 0.05.
    pub l_y: f64,
    /// Rescaled time step, `0 < dtau <= 0.1`.
    pub dtau: f64,
    /// Final rescaled time, `0 <= tau_max <= 1000`.
    pub tau_max: f64,
    /// Fraction of the local quench horizon per direct step, `0 < dt_safety <= 1`.
    pub dt_safety: f64,
    /// Direct runs stop once `u_min < stop_floor * min u0`, `0 < stop_floor < 1`.
    pub stop_floor: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
}

pub const Y_SPACING: f64 = 0.05;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            p: -1.0,
            b0: 0.05,
            c0: 0.5,
            delta0: 0.0,
            perturbation: Perturbation::Hermite4Mode,
            lambda0: 1.0,
            grid_l: 20.0,
            grid_n: 801,
            l_y: 30.0,
            dtau: 1e-3,
            tau_max: 30.0,
            dt_safety: 0.1,
            stop_floor: 1e-3,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

const KEYS: [&str; 15] = [
    "p",
    "b0",
    "c0",
    "delta0",
    "perturbation",
    "lambda0",
    "grid_l",
    "grid_n",
    "l_y",
    "dtau",
    "tau_max",
    "dt_safety",
    "stop_floor",
    "output_dir",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn range(key: &str, ok: bool, rule: &str, value: impl std::fmt::Display) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} must satisfy {rule}, got {value}")))
    }
}

impl RunConfig {
    /// Sets one field from its textual form. Accepts kebab-case keys too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "p" => self.p = parse(&key, value)?,
            "b0" => self.b0 = parse(&key, value)?,
            "c0" => self.c0 = parse(&key, value)?,
            "delta0" => self.delta0 = parse(&key, value)?,
            "perturbation" => {
                self.perturbation = value.parse().map_err(|e| CliError::Config(format!("{e}")))?
            }
            "lambda0" => self.lambda0 = parse(&key, value)?,
            "grid_l" => self.grid_l = parse(&key, value)?,
            "grid_n" => self.grid_n = parse(&key, value)?,
            "l_y" => self.l_y = parse(&key, value)?,
            "dtau" => self.dtau = parse(&key, value)?,
            "tau_max" => self.tau_max = parse(&key, value)?,
            "dt_safety" => self.dt_safety = parse(&key, value)?,
            "stop_floor" => self.stop_floor = parse(&key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse(&key, value)?,
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        range("p", self.p < 0.0 && self.p.is_finite(), "p < 0", self.p)?;
        range("b0", (0.0..=1.0).contains(&self.b0), "0 <= b0 <= 1", self.b0)?;
        range("c0", (0.5..=2.0).contains(&self.c0), "1/2 <= c0 <= 2", self.c0)?;
        range("delta0", (0.0..=10.0).contains(&self.delta0), "0 <= delta0 <= 10", self.delta0)?;
        range("lambda0", self.lambda0 > 0.0 && self.lambda0.is_finite(), "lambda0 > 0", self.lambda0)?;
        range("grid_l", self.grid_l > 0.0 && self.grid_l.is_finite(), "grid_l > 0", self.grid_l)?;
        range("grid_n", self.grid_n >= 5 && self.grid_n % 2 == 1, "odd grid_n >= 5", self.grid_n)?;
        range("l_y", self.l_y > 0.0 && self.l_y <= 200.0, "0 < l_y <= 200", self.l_y)?;
        range("dtau", self.dtau > 0.0 && self.dtau <= 0.1, "0 < dtau <= 0.1", self.dtau)?;
        range("tau_max", (0.0..=1000.0).contains(&self.tau_max), "0 <= tau_max <= 1000", self.tau_max)?;
        range("dt_safety", self.dt_safety > 0.0 && self.dt_safety <= 1.0, "0 < dt_safety <= 1", self.dt_safety)?;
        range("stop_floor", self.stop_floor > 0.0 && self.stop_floor < 1.0, "0 < stop_floor < 1", self.stop_floor)?;
        Ok(())
    }

    /// Nodes of the rescaled grid: spacing [`Y_SPACING`] on `[-l_y, l_y]`.
    pub fn n_y(&self) -> usize {
        2 * (self.l_y / Y_SPACING).round() as usize + 1
    }

    /// `(key, value)` pairs in a fixed order. The output directory is left out
    /// so that identical runs written to different places agree byte for byte.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.p.to_string(),
            self.b0.to_string(),
            self.c0.to_string(),
            self.delta0.to_string(),
            self.perturbation.to_string(),
            self.lambda0.to_string(),
            self.grid_l.to_string(),
            self.grid_n.to_string(),
            self.l_y.to_string(),
            self.dtau.to_string(),
            self.tau_max.to_string(),
            self.dt_safety.to_string(),
            self.stop_floor.to_string(),
            self.output_dir.display().to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|(k, _)| **k != "output_dir")
            .map(|(k, v)| (*k, v))
            .collect()
    }
}

/// Command-line overrides, one flag per field.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub p: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub b0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub c0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta0: Option<String>,
    /// zero, gaussian-bump or hermite4-mode.
    #[arg(long)]
    pub perturbation: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_l: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_n: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub l_y: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub dtau: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub tau_max: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub dt_safety: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub stop_floor: Option<String>,
    #[arg(long)]
    pub output_dir: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

impl ConfigArgs {
    /// File values first, then flags, then validation.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("p", &self.p),
            ("b0", &self.b0),
            ("c0", &self.c0),
            ("delta0", &self.delta0),
            ("perturbation", &self.perturbation),
            ("lambda0", &self.lambda0),
            ("grid_l", &self.grid_l),
            ("grid_n", &self.grid_n),
            ("l_y", &self.l_y),
            ("dtau", &self.dtau),
            ("tau_max", &self.tau_max),
            ("dt_safety", &self.dt_safety),
            ("stop_floor", &self.stop_floor),
            ("output_dir", &self.output_dir),
            ("seed", &self.seed),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
