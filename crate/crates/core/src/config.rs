//! Study configuration files (TOML).
//!
//! ```toml
//! [base]
//! family = "linear"
//! n = 500
//! J = 7
//! # ... remaining scenario fields
//!
//! [grid]
//! rho = [0.1, 0.3]
//! gamma1 = [1.0, 2.0]
//!
//! [[methods]]
//! method = "naive"
//!
//! [[reference]]
//! gamma1 = 1.0
//! rho = 0.1
//! rho_xc = 0.0
//! n = 500
//! method = "naive"
//! parameter = "beta_x"
//! value = 2.834
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, Scenario};
use crate::sim::{scenario_grid, GridAxes, MethodSpec, PARAMETER_NAMES};

/// An externally reported Monte Carlo mean to compare a run against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValue {
    #[serde(default)]
    pub family: Option<Family>,
    #[serde(default)]
    pub gamma1: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub rho_xc: Option<f64>,
    #[serde(default)]
    pub n: Option<usize>,
    /// Method label as written in `summary.csv`.
    pub method: String,
    pub parameter: String,
    pub value: f64,
}

impl ReferenceValue {
    pub fn matches(&self, s: &Scenario, method: &str) -> bool {
        self.method == method
            && self.family.is_none_or(|f| f == s.family)
            && self.gamma1.is_none_or(|g| g == s.gamma1)
            && self.rho.is_none_or(|r| r == s.rho)
            && self.rho_xc.is_none_or(|r| r == s.rho_xc)
            && self.n.is_none_or(|n| n == s.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub base: Scenario,
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub reference: Vec<ReferenceValue>,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|sp| text[..sp.start.min(text.len())].lines().count().to_string())
                .map(|line| format!("line {line}"))
                .unwrap_or_else(|| "document".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let prefix = |e: Error, scope: &str| match e {
            Error::InvalidParameter { field, reason } => Error::config(format!("{scope}.{field}"), reason),
            other => other,
        };
        self.base.validate().map_err(|e| prefix(e, "base"))?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        for (k, m) in self.methods.iter().enumerate() {
            if m.condition_on_c && m.method != crate::model::Method::BlupEmpirical {
                return Err(Error::config(
                    format!("methods[{k}].condition_on_c"),
                    "only supported with method = \"blup_empirical\"",
                ));
            }
        }
        for s in self.scenarios() {
            s.validate().map_err(|e| prefix(e, "grid"))?;
        }
        for (k, r) in self.reference.iter().enumerate() {
            if !PARAMETER_NAMES.contains(&r.parameter.as_str()) {
                return Err(Error::config(
                    format!("reference[{k}].parameter"),
                    format!("must be one of {}", PARAMETER_NAMES.join(", ")),
                ));
            }
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        scenario_grid(&self.base, &self.grid)
    }
}
