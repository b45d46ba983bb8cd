//! Run configuration, read from TOML.
//!
//! Matrices are row-major nested arrays. Every field is explicit in the serialized
//! form, so `to_toml_string` of a parsed file parses back to the same value.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use qih_core::lyapunov::{Approach, GainMode, StageWeights, TuningParams};
use qih_core::model::{self, BenchmarkParams, BoxSet, Discretization, DiscreteModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Field { field: field.into(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    /// Largest horizon tried by the minimum-horizon scan.
    pub n_max: usize,
    pub closed_loop_steps: usize,
    pub initial_conditions: Vec<Vec<f64>>,
    pub model: ModelConfig,
    pub weights: WeightsConfig,
    pub input_box: BoxConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_box: Option<BoxConfig>,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub approaches: Vec<ApproachConfig>,
    #[serde(default)]
    pub sweeps: Vec<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub sampling_time: f64,
    pub mu0: f64,
    /// `"rk4"` or `"euler"`.
    pub discretization: String,
    pub rk4_substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub wx: Vec<Vec<f64>>,
    pub wu: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub boundary_samples: usize,
    pub beta: f64,
    pub gamma_max: f64,
    pub invariance_samples: usize,
    pub invariance_steps: usize,
    pub domination_samples: usize,
    pub domination_steps: usize,
    /// Points written per region boundary CSV.
    pub region_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproachConfig {
    pub label: String,
    /// `yu`, `arbitrary_controller` or `lqr_inflated`.
    pub approach: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// `coupled` or `fixed`, LQR-inflated only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_mode: Option<String>,
}

/// Cartesian grid over the listed parameters of one approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub name: String,
    pub approach: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kappa: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_mode: Option<String>,
}

/// The benchmark setup shipped as `configs/benchmark.toml`.
pub const BENCHMARK_TOML: &str = include_str!("../configs/benchmark.toml");

impl RunConfig {
    pub fn benchmark() -> Self {
        Self::from_toml_str(BENCHMARK_TOML).expect("bundled benchmark config is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = self.model()?;
        let (n, nu) = (m.n_x(), m.n_u());
        let w = self.weights()?;
        if w.n_x() != n || w.n_u() != nu {
            return Err(field_err("weights", format!("model needs wx {n}x{n} and wu {nu}x{nu}")));
        }
        let u = self.input_set()?;
        if u.dim() != nu {
            return Err(field_err("input_box", format!("expected {nu} bounds, got {}", u.dim())));
        }
        if let Some(s) = self.state_set()? {
            if s.dim() != n {
                return Err(field_err("state_box", format!("expected {n} bounds, got {}", s.dim())));
            }
        }
        for (i, x0) in self.initial_conditions.iter().enumerate() {
            if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
                return Err(field_err(format!("initial_conditions[{i}]"), format!("need {n} finite entries")));
            }
        }
        if self.n_max == 0 {
            return Err(field_err("n_max", "must be >= 1"));
        }
        let s = &self.sampling;
        if s.boundary_samples == 0 {
            return Err(field_err("sampling.boundary_samples", "must be >= 1"));
        }
        if !(s.beta > 0.0 && s.beta < 1.0) {
            return Err(field_err("sampling.beta", "must lie in (0, 1)"));
        }
        if !(s.gamma_max > 0.0) {
            return Err(field_err("sampling.gamma_max", "must be positive"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for (i, a) in self.approaches.iter().enumerate() {
            if !labels.insert(a.label.as_str()) {
                return Err(field_err(format!("approaches[{i}].label"), format!("duplicate label '{}'", a.label)));
            }
            self.tuning(a).map_err(|e| match e {
                ConfigError::Field { field, message } => field_err(format!("approaches[{i}].{field}"), message),
                other => other,
            })?;
        }
        for (i, s) in self.sweeps.iter().enumerate() {
            let rows = self.sweep_rows(s).map_err(|e| match e {
                ConfigError::Field { field, message } => field_err(format!("sweeps[{i}].{field}"), message),
                other => other,
            })?;
            if rows.is_empty() {
                return Err(field_err(format!("sweeps[{i}]"), "sweep has no rows"));
            }
        }
        Ok(())
    }

    pub fn benchmark_params(&self) -> Result<BenchmarkParams, ConfigError> {
        let discretization = match self.model.discretization.as_str() {
            "rk4" => {
                if self.model.rk4_substeps == 0 {
                    return Err(field_err("model.rk4_substeps", "must be >= 1"));
                }
                Discretization::Rk4 { substeps: self.model.rk4_substeps }
            }
            "euler" => Discretization::Euler,
            other => return Err(field_err("model.discretization", format!("expected 'rk4' or 'euler', got '{other}'"))),
        };
        Ok(BenchmarkParams { sampling_time: self.model.sampling_time, mu0: self.model.mu0, discretization })
    }

    pub fn model(&self) -> Result<DiscreteModel, ConfigError> {
        model::model_by_name(&self.model.name, &self.benchmark_params()?).map_err(|e| field_err("model", e))
    }

    pub fn weights(&self) -> Result<StageWeights, ConfigError> {
        let wx = matrix(&self.weights.wx).map_err(|e| field_err("weights.wx", e))?;
        let wu = matrix(&self.weights.wu).map_err(|e| field_err("weights.wu", e))?;
        StageWeights::new(wx, wu).map_err(|e| field_err("weights", e))
    }

    pub fn input_set(&self) -> Result<BoxSet, ConfigError> {
        box_set(&self.input_box).map_err(|e| field_err("input_box", e))
    }

    pub fn state_set(&self) -> Result<Option<BoxSet>, ConfigError> {
        self.state_box
            .as_ref()
            .map(|b| box_set(b).map_err(|e| field_err("state_box", e)))
            .transpose()
    }

    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.initial_conditions.iter().map(|x| DVector::from_vec(x.clone())).collect()
    }

    fn base_tuning(&self, approach: &str, gain_mode: Option<&str>) -> Result<TuningParams, ConfigError> {
        let approach: Approach = approach.parse().map_err(|e| field_err("approach", e))?;
        let gain_mode = match gain_mode {
            None | Some("coupled") => GainMode::Coupled,
            Some("fixed") => GainMode::Fixed,
            Some(other) => return Err(field_err("gain_mode", format!("expected 'coupled' or 'fixed', got '{other}'"))),
        };
        Ok(TuningParams {
            approach,
            beta: self.sampling.beta,
            boundary_samples: self.sampling.boundary_samples,
            gain_mode,
            seed: self.seed,
            ..TuningParams::default()
        })
    }

    pub fn tuning(&self, a: &ApproachConfig) -> Result<TuningParams, ConfigError> {
        let mut t = self.base_tuning(&a.approach, a.gain_mode.as_deref())?;
        match t.approach {
            Approach::Yu => {
                t.kappa = a.kappa.ok_or_else(|| field_err("kappa", "required for the yu approach"))?;
            }
            _ => {
                t.rho_x = a.rho_x.ok_or_else(|| field_err("rho_x", "required"))?;
                t.rho_u = a.rho_u.ok_or_else(|| field_err("rho_u", "required"))?;
            }
        }
        t.validate().map_err(|e| field_err(tuning_field(t.approach), e))?;
        Ok(t)
    }

    /// Expanded sweep grid, in config order (`rho_x` outer, `rho_u` inner).
    pub fn sweep_rows(&self, s: &SweepConfig) -> Result<Vec<TuningParams>, ConfigError> {
        let base = self.base_tuning(&s.approach, s.gain_mode.as_deref())?;
        let mut rows = Vec::new();
        if base.approach == Approach::Yu {
            for &kappa in &s.kappa {
                rows.push(TuningParams { kappa, ..base.clone() });
            }
        } else {
            for &rho_x in &s.rho_x {
                for &rho_u in &s.rho_u {
                    rows.push(TuningParams { rho_x, rho_u, ..base.clone() });
                }
            }
        }
        for t in &rows {
            t.validate().map_err(|e| field_err(tuning_field(t.approach), e))?;
        }
        Ok(rows)
    }
}

fn tuning_field(a: Approach) -> &'static str {
    match a {
        Approach::Yu => "kappa",
        _ => "rho_x/rho_u",
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err("matrix rows must be non-empty and of equal length".into());
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn box_set(b: &BoxConfig) -> Result<BoxSet, String> {
    if b.lower.len() != b.upper.len() {
        return Err("lower and upper must have equal length".into());
    }
    BoxSet::new(DVector::from_vec(b.lower.clone()), DVector::from_vec(b.upper.clone())).map_err(|e| e.to_string())
}
