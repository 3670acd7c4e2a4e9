//! Run configuration in the flat `key = value` text format.
//!
//! Keys map one to one onto [`RunConfig`] fields. Lists are comma
//! separated, `#` starts a comment. The value type of each key is taken
//! from the serialized default, so the parser needs no per-field code.

use std::collections::BTreeSet;

use abtroika::geometry::{Couplings, Sense, SolenoidModel, Trajectory};
use abtroika::modes::ModeGrid;
use abtroika::quadrature::QuadratureSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolenoidKind {
    Finite,
    Ideal,
}

/// Every parameter of a run. Lengths are in units of the orbit radius
/// except `radius` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub radius: f64,
    pub beta: f64,
    pub lambda: f64,
    pub solenoid_radius: f64,
    pub fine_structure: f64,
    pub solenoid: SolenoidKind,
    pub solenoid_length: f64,
    pub n_loops: usize,
    pub flux: f64,
    pub ramp_fraction: f64,

    pub abs_tol: f64,
    pub rel_tol: f64,
    pub volume_rel_tol: f64,
    pub max_subdivisions: usize,

    /// Speeds at which the phase report is built.
    pub phase_betas: Vec<f64>,
    /// Compute the left traverse from scratch instead of by sign flip.
    pub full_left: bool,

    pub sweep_lambda: Vec<f64>,
    pub sweep_beta: Vec<f64>,
    pub phase_grid: usize,
    pub phase_ramp_fraction: f64,
    pub pv_samples: usize,

    pub epsilon_start: f64,
    pub epsilon_halvings: usize,
    pub reduction_epsilon: f64,

    pub constant_drive_grid: usize,
    pub constant_drive_steps: usize,
    pub drive_grid: usize,
    pub drive_k_max: f64,
    pub drive_steps: usize,
    pub overlap_grid: usize,
    pub overlap_configs: usize,
    pub overlap_traverse_dk: f64,
    pub overlap_steps: usize,
    pub drift_grid: usize,
    pub drift_dt: f64,
    pub drift_steps: usize,
    /// `k_max σ` of each grid in the mode-sum refinement ladder.
    pub crosscheck_k_max_sigma: Vec<f64>,

    pub seed: u64,
    pub out: String,
    pub disabled_checks: Vec<String>,

    pub tol_ab_ideal: f64,
    pub tol_ab_finite: f64,
    pub tol_reciprocity: f64,
    pub tol_identity_slow: f64,
    pub tol_identity_fast: f64,
    pub tol_naive: f64,
    pub tol_extra_phase: f64,
    pub tol_grand_total: f64,
    pub tol_constant_drive: f64,
    pub tol_traverse_drive: f64,
    pub tol_overlap_random: f64,
    pub tol_overlap_traverse: f64,
    pub tol_photon_drift: f64,
    pub tol_phase_c1: f64,
    pub min_phase_control: f64,
    pub tol_pv: f64,
    pub tol_slope: f64,
    pub tol_a2_error: f64,
    pub tol_crosscheck: f64,
    pub max_a_total: f64,
    pub min_visibility: f64,
    pub tol_probability_sum: f64,
    pub tol_reduction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            beta: 0.1,
            lambda: 1.0,
            solenoid_radius: 0.25,
            fine_structure: abtroika::geometry::FINE_STRUCTURE,
            solenoid: SolenoidKind::Finite,
            solenoid_length: 20.0,
            n_loops: 200,
            flux: 1.0,
            ramp_fraction: 0.0,
            abs_tol: 1e-12,
            rel_tol: 1e-7,
            volume_rel_tol: 1e-5,
            max_subdivisions: 2000,
            phase_betas: vec![0.01, 0.05, 0.3],
            full_left: false,
            sweep_lambda: vec![0.5, 1.0, 2.0, 4.0],
            sweep_beta: vec![0.05, 0.1, 0.2, 0.4],
            phase_grid: 16,
            phase_ramp_fraction: 0.01,
            pv_samples: 20,
            epsilon_start: 0.1,
            epsilon_halvings: 14,
            reduction_epsilon: 0.05,
            constant_drive_grid: 2,
            constant_drive_steps: 500,
            drive_grid: 16,
            drive_k_max: 6.0,
            drive_steps: 3000,
            overlap_grid: 8,
            overlap_configs: 50,
            overlap_traverse_dk: 0.6,
            overlap_steps: 4000,
            drift_grid: 8,
            drift_dt: 0.05,
            drift_steps: 10_000,
            crosscheck_k_max_sigma: vec![6.0, 9.0, 12.0],
            seed: 11,
            out: "abtroika-out".into(),
            disabled_checks: Vec::new(),
            tol_ab_ideal: 1e-10,
            tol_ab_finite: 0.02,
            tol_reciprocity: 0.01,
            tol_identity_slow: 0.02,
            tol_identity_fast: 0.05,
            tol_naive: 0.05,
            tol_extra_phase: 0.02,
            tol_grand_total: 0.03,
            tol_constant_drive: 1e-8,
            tol_traverse_drive: 1e-6,
            tol_overlap_random: 1e-8,
            tol_overlap_traverse: 1e-6,
            tol_photon_drift: 1e-10,
            tol_phase_c1: 1e-6,
            min_phase_control: 1e-4,
            tol_pv: 1e-8,
            tol_slope: 0.2,
            tol_a2_error: 0.01,
            tol_crosscheck: 0.05,
            max_a_total: 0.01,
            min_visibility: 0.99,
            tol_probability_sum: f64::EPSILON,
            tol_reduction: 1e-6,
        }
    }
}

/// Names of all checks a run can produce, for validating `disabled_checks`.
pub const CHECK_NAMES: &[&str] = &[
    "ab_half_circle_ideal",
    "ab_phi21_ideal",
    "ab_phi21_finite",
    "reciprocity",
    "phase_identity",
    "naive_double_count",
    "extra_phase_balance",
    "grand_total",
    "constant_drive",
    "traverse_drive",
    "overlap_random",
    "overlap_traverse",
    "photon_drift",
    "phase_c1",
    "phase_c1_control",
    "pv_oracles",
    "divergence_monotone",
    "divergence_slope",
    "reduction",
    "scaling_lambda",
    "scaling_beta",
    "a2_ratio_band",
    "a2_error",
    "a_total",
    "visibility",
    "probability_sum",
    "crosscheck",
    "crosscheck_monotone",
];

fn parse_scalar(template: &Value, text: &str) -> Result<Value, String> {
    match template {
        Value::Number(n) if n.is_u64() => text.parse::<u64>().map(Value::from).map_err(|e| e.to_string()),
        Value::Number(_) => text
            .parse::<f64>()
            .map_err(|e| e.to_string())
            .and_then(|x| serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| "not finite".to_string())),
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        _ => Ok(Value::String(text.to_string())),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let Value::Object(mut fields) = serde_json::to_value(RunConfig::default()).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: content.into() });
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(template) = fields.get(key) else {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            };
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            let bad = |reason: String| ConfigError::Value {
                line,
                key: key.into(),
                reason,
            };
            let parsed = match template {
                Value::Array(items) => {
                    // element type from the default; empty defaults hold names
                    let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
                    let parts = value.split(',').map(str::trim).filter(|p| !p.is_empty());
                    Value::Array(parts.map(|p| parse_scalar(&elem, p)).collect::<Result<_, _>>().map_err(bad)?)
                }
                other => parse_scalar(other, value).map_err(bad)?,
            };
            fields.insert(key.to_string(), parsed);
        }
        let config: RunConfig = serde_json::from_value(Value::Object(fields)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The configuration in the text format, one key per line in key order.
    pub fn echo(&self) -> String {
        let Value::Object(fields) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let mut out = String::new();
        for (key, value) in &fields {
            let text = match value {
                Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(", "),
                v => scalar_text(v),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
        out
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        QuadratureSpec {
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_subdivisions: self.max_subdivisions,
            ..QuadratureSpec::default()
        }
    }

    pub fn volume_quadrature(&self) -> QuadratureSpec {
        self.quadrature().with_tolerances(self.abs_tol, self.volume_rel_tol)
    }

    pub fn solenoid_model(&self) -> Result<SolenoidModel, abtroika::error::Error> {
        let a = self.solenoid_radius * self.radius;
        match self.solenoid {
            SolenoidKind::Finite => SolenoidModel::finite(a, self.flux, self.n_loops, self.solenoid_length * self.radius),
            SolenoidKind::Ideal => SolenoidModel::ideal(a, self.flux),
        }
    }

    /// Checks every value against the invariants of the module that will
    /// consume it, before anything is computed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: abtroika::error::Error| ConfigError::Invalid(e.to_string());
        Couplings::new(self.fine_structure, self.beta, self.lambda).map_err(inv)?;
        for &b in self.phase_betas.iter().chain(&self.sweep_beta) {
            Couplings::new(self.fine_structure, b, self.lambda).map_err(inv)?;
            Trajectory::with_ramp(self.radius, b, Sense::Right, self.ramp_fraction).map_err(inv)?;
        }
        for &l in &self.sweep_lambda {
            Couplings::new(self.fine_structure, self.beta, l).map_err(inv)?;
        }
        Trajectory::with_ramp(self.radius, self.beta, Sense::Right, self.phase_ramp_fraction).map_err(inv)?;
        let model = self.solenoid_model().map_err(inv)?;
        model.check_orbit(self.radius).map_err(inv)?;
        QuadratureSpec::new(self.abs_tol, self.rel_tol, self.max_subdivisions).map_err(inv)?;
        QuadratureSpec::new(self.abs_tol, self.volume_rel_tol, self.max_subdivisions).map_err(inv)?;
        ModeGrid::lattice(self.constant_drive_grid, 1.3).map_err(inv)?;
        ModeGrid::spherical_cube(self.drive_grid, self.drive_k_max).map_err(inv)?;
        ModeGrid::lattice(self.overlap_grid, self.overlap_traverse_dk).map_err(inv)?;
        ModeGrid::spherical_cube(self.drift_grid, self.drive_k_max).map_err(inv)?;
        let positive = [
            ("epsilon_start", self.epsilon_start),
            ("reduction_epsilon", self.reduction_epsilon),
            ("drift_dt", self.drift_dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.crosscheck_k_max_sigma.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(ConfigError::Invalid("crosscheck_k_max_sigma entries must be > 0".into()));
        }
        let counts = [
            ("phase_grid", self.phase_grid, 2),
            ("epsilon_halvings", self.epsilon_halvings, 2),
            ("pv_samples", self.pv_samples, 1),
            ("constant_drive_steps", self.constant_drive_steps, 1),
            ("drive_steps", self.drive_steps, 1),
            ("overlap_configs", self.overlap_configs, 1),
            ("overlap_steps", self.overlap_steps, 1),
            ("drift_steps", self.drift_steps, 1),
        ];
        for (name, v, min) in counts {
            if v < min {
                return Err(ConfigError::Invalid(format!("{name} must be at least {min}, got {v}")));
            }
        }
        if self.sweep_lambda.len() == 1 || self.sweep_beta.len() == 1 {
            return Err(ConfigError::Invalid("a sweep needs at least two points to fit a slope".into()));
        }
        for name in &self.disabled_checks {
            if !CHECK_NAMES.contains(&name.as_str()) {
                return Err(ConfigError::Invalid(format!("disabled_checks names unknown check `{name}`")));
            }
        }
        let tolerances = serde_json::to_value(self).expect("config serializes");
        for (key, v) in tolerances.as_object().into_iter().flatten() {
            if key.starts_with("tol_") || key.starts_with("min_") || key.starts_with("max_a") {
                let x = v.as_f64().unwrap_or(f64::NAN);
                if x.is_nan() || x < 0.0 {
                    return Err(ConfigError::Invalid(format!("{key} must be >= 0, got {x}")));
                }
            }
        }
        Ok(())
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        // shortest text that reads back to the same bits
        Value::Number(n) if !n.is_u64() && !n.is_i64() => format!("{:?}", n.as_f64().unwrap_or(f64::NAN)),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_lists_and_comments() {
        let c = RunConfig::parse("beta = 0.2  # faster\nsweep_lambda = 1, 2,3\nsolenoid = ideal\nn_loops = 10\nfull_left = true\n").unwrap();
        assert_eq!(c.beta, 0.2);
        assert_eq!(c.sweep_lambda, vec![1.0, 2.0, 3.0]);
        assert_eq!(c.solenoid, SolenoidKind::Ideal);
        assert_eq!(c.n_loops, 10);
        assert!(c.full_left);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(RunConfig::parse("beta 0.1"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(RunConfig::parse("beta = 0.1\nbeta = 0.2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(RunConfig::parse("n_loops = 2.5"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("solenoid = square"), Err(ConfigError::Invalid(_))));
        let err = RunConfig::parse("beta = 1.5").unwrap_err().to_string();
        assert!(err.contains("0 < beta < 1"), "{err}");
        assert!(RunConfig::parse("sweep_beta = 0.1, 1.2").is_err());
        assert!(RunConfig::parse("disabled_checks = nonsense").is_err());
        assert!(RunConfig::parse("tol_slope = -1").is_err());
        assert!(RunConfig::parse("solenoid_radius = 1.5").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig {
            beta: 0.123456789012345,
            fine_structure: 1.0 / 3.0,
            disabled_checks: vec!["scaling_beta".into(), "scaling_lambda".into()],
            out: "some dir".into(),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().echo()).unwrap(), RunConfig::default());
    }

    proptest! {
        #[test]
        fn echo_round_trips_any_valid_config(
            beta in 0.001f64..0.99,
            lambda in 1e-3f64..1e3,
            fine in 1e-6f64..1.0,
            sweep in proptest::collection::vec(0.01f64..0.99, 2..6),
            halvings in 2usize..30,
            seed in any::<u64>(),
            ideal in any::<bool>(),
        ) {
            let c = RunConfig {
                beta,
                lambda,
                fine_structure: fine,
                sweep_beta: sweep,
                epsilon_halvings: halvings,
                seed,
                solenoid: if ideal { SolenoidKind::Ideal } else { SolenoidKind::Finite },
                ..RunConfig::default()
            };
            prop_assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        }
    }
}
