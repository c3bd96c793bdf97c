//! The run configuration: one TOML document, optionally overridden key by key
//! with dotted paths (`fit.solver.max_inner=5`).

use std::path::{Path, PathBuf};

use pggm::baselines::LassoConfig;
use pggm::{PenaltyFamily, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Pggm,
    FullGgm,
    MarginalGgm,
    Nslasso,
    Univariate,
}

impl Estimator {
    pub const ALL: [Estimator; 5] =
        [Estimator::Pggm, Estimator::FullGgm, Estimator::MarginalGgm, Estimator::Nslasso, Estimator::Univariate];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Pggm => "pggm",
            Estimator::FullGgm => "full-ggm",
            Estimator::MarginalGgm => "marginal-ggm",
            Estimator::Nslasso => "nslasso",
            Estimator::Univariate => "univariate",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    Element,
    Column,
}

impl Penalty {
    pub fn family(self) -> PenaltyFamily {
        match self {
            Penalty::Element => PenaltyFamily::ElementWise,
            Penalty::Column => PenaltyFamily::ColumnWise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    #[default]
    Validation,
    Bic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Rows in each of the train, validation and test samples.
    pub n: usize,
    pub p: usize,
    pub qs: Vec<usize>,
    pub edge_prob: f64,
    /// Condition number of the calibrated matrix; `p + q` when absent.
    pub target_condition: Option<f64>,
    pub unit_diagonal: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { n: 100, p: 50, qs: vec![50, 100, 200, 500], edge_prob: 0.1, target_condition: None, unit_diagonal: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub estimators: Vec<Estimator>,
    pub penalty: Penalty,
    pub selection: SelectionRule,
    /// Points per penalty axis when the grid is derived from the data.
    pub grid_points: usize,
    /// Smallest grid value as a fraction of the largest.
    pub grid_ratio: f64,
    /// Explicit descending grids; derived from the data when empty.
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Hold the univariate noise precision at 1.
    pub clamp_omega: bool,
    pub solver: SolverConfig,
    pub lasso: LassoConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            estimators: vec![Estimator::Pggm],
            penalty: Penalty::Element,
            selection: SelectionRule::Validation,
            grid_points: 10,
            grid_ratio: 0.01,
            lambdas: Vec::new(),
            rhos: Vec::new(),
            clamp_omega: false,
            solver: SolverConfig::default(),
            lasso: LassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Link threshold for the `Ω̂yy` link lists.
    pub mu: Option<f64>,
    /// Top-k link precision; needs `categories`.
    pub topk: Option<usize>,
    /// CSV of `variable,category` for the `Y` variables, in order.
    pub categories: Option<PathBuf>,
    pub diagnostics: bool,
}

/// A CSV data source for real-style runs: the first `p` columns are `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub p: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub center: bool,
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub reps: usize,
    pub workers: usize,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub evaluate: EvaluateConfig,
    pub data: Option<DataConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            reps: 50,
            workers: 1,
            out: PathBuf::from("runs"),
            simulate: SimulateConfig::default(),
            fit: FitConfig::default(),
            evaluate: EvaluateConfig::default(),
            data: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `key=value` overrides in
    /// order, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut doc, key, value)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if self.reps == 0 {
            return bad("reps must be >= 1".into());
        }
        let s = &self.simulate;
        if s.n < 2 || s.p == 0 {
            return bad(format!("simulate needs n >= 2 and p >= 1, got n = {}, p = {}", s.n, s.p));
        }
        if s.qs.is_empty() {
            return bad("simulate.qs is empty".into());
        }
        if !(0.0..=1.0).contains(&s.edge_prob) {
            return bad(format!("simulate.edge_prob must lie in [0, 1], got {}", s.edge_prob));
        }
        if let Some(k) = s.target_condition {
            if !(k > 1.0) || !k.is_finite() {
                return bad(format!("simulate.target_condition must be > 1, got {k}"));
            }
        }
        let f = &self.fit;
        if f.estimators.is_empty() {
            return bad("fit.estimators is empty".into());
        }
        if f.grid_points == 0 || !(f.grid_ratio > 0.0 && f.grid_ratio < 1.0) {
            return bad("fit.grid_points must be >= 1 and fit.grid_ratio in (0, 1)".into());
        }
        for (name, g) in [("lambdas", &f.lambdas), ("rhos", &f.rhos)] {
            if g.iter().any(|v| !(*v > 0.0)) || g.windows(2).any(|w| w[1] >= w[0]) {
                return bad(format!("fit.{name} must be positive and strictly descending"));
            }
        }
        f.solver.validate().map_err(|e| CliError::Config(format!("fit.solver: {e}")))?;
        if !(f.lasso.tol > 0.0) || f.lasso.max_sweeps == 0 {
            return bad("fit.lasso needs tol > 0 and max_sweeps >= 1".into());
        }
        let e = &self.evaluate;
        if let Some(mu) = e.mu {
            if !(mu > 0.0) {
                return bad(format!("evaluate.mu must be > 0, got {mu}"));
            }
        }
        if e.topk == Some(0) {
            return bad("evaluate.topk must be >= 1".into());
        }
        if e.topk.is_some() && e.categories.is_none() {
            return bad("evaluate.topk needs evaluate.categories".into());
        }
        if let Some(d) = &self.data {
            let (a, b) = (d.train_fraction, d.validation_fraction);
            if d.p == 0 || !(a > 0.0) || !(b > 0.0) || a + b >= 1.0 {
                return bad("data needs p >= 1 and positive train/validation fractions summing below 1".into());
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `doc`, creating tables as needed. The value is
/// parsed as a TOML value and taken as a plain string if that fails.
pub fn set_dotted(doc: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key '{key}'")));
    }
    let parsed = parse_value(value);
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("'{part}' in '{key}' is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn parse_value(s: &str) -> toml::Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}
