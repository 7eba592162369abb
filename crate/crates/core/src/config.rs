//! JSON experiment configuration.
//!
//! A document has the sections `system`, `privacy`, `fleet` (or
//! `fleet_file`), `model` and `solver`. Curvature constants and the initial
//! gap default to the values implied by the synthetic model; the learning
//! rate defaults to `1 / smoothness`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg_sim::{make_synthetic_fleet, FederatedObjective, Model, SyntheticSpec};
use crate::scheduler::{
    solve_fixed_rounds, solve_p1, SchedulePlan, DEFAULT_CONV_TOL, DEFAULT_MAX_ITERS,
};
use crate::system_model::{default_peak_power, DeviceProfile, Fleet, SystemParams};

pub const DEFAULT_TOTAL_ROUNDS: u64 = 200;

fn default_total_rounds() -> u64 {
    DEFAULT_TOTAL_ROUNDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(default)]
    pub model_dim: Option<usize>,
    pub noise_std: f64,
    pub sum_power: f64,
    #[serde(default = "default_total_rounds")]
    pub total_rounds: u64,
    pub grad_bound: f64,
    #[serde(default)]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub strong_convexity: Option<f64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub initial_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    /// `null` or absent means unconstrained.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFleet {
    pub n: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    #[serde(default = "default_peak_power")]
    pub peak_power: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FleetSection {
    Records(Vec<serde_json::Value>),
    Random { random: RandomFleet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub conv_tol: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Fixes the round count instead of optimising it.
    #[serde(default)]
    pub rounds: Option<u64>,
    /// Simulation seed, lowest precedence.
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    DEFAULT_CONV_TOL
}
fn default_iters() -> usize {
    DEFAULT_MAX_ITERS
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            conv_tol: default_tol(),
            max_iters: default_iters(),
            rounds: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub privacy: PrivacySection,
    #[serde(default)]
    pub fleet: Option<FleetSection>,
    #[serde(default)]
    pub fleet_file: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub solver: SolverSection,
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub fleet: Fleet,
    pub params: SystemParams,
    pub model: Option<Model>,
    pub solver: SolverSection,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Resolves the fleet, model and derived constants. Relative
    /// `fleet_file` paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        let fleet = self.resolve_fleet(base_dir)?;
        let n = fleet.len();
        for (i, d) in fleet.devices().iter().enumerate() {
            if d.dataset >= n {
                return Err(invalid(
                    &format!("fleet[{i}].dataset"),
                    format!("must be below the fleet size {n}"),
                ));
            }
        }
        let model = match &self.model {
            Some(m) => Some(
                make_synthetic_fleet(&m.spec, n, m.seed)
                    .map_err(|e| invalid("model", e.to_string()))?,
            ),
            None => None,
        };
        let s = &self.system;
        let need = |v: Option<f64>, from_model: Option<f64>, field: &str| -> Result<f64> {
            v.or(from_model)
                .ok_or_else(|| invalid(field, "required when no model section is given"))
        };
        let model_dim = match (s.model_dim, model.as_ref().map(|m| m.dim())) {
            (Some(a), Some(b)) if a != b => {
                return Err(invalid(
                    "system.model_dim",
                    format!("is {a} but the model has {b}"),
                ))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(invalid(
                    "system.model_dim",
                    "required when no model section is given",
                ))
            }
        };
        let smoothness = need(
            s.smoothness,
            model.as_ref().map(|m| m.smoothness()),
            "system.smoothness",
        )?;
        let strong_convexity = need(
            s.strong_convexity,
            model.as_ref().map(|m| m.strong_convexity()),
            "system.strong_convexity",
        )?;
        let initial_gap = need(
            s.initial_gap,
            model.as_ref().map(|m| m.initial_gap()),
            "system.initial_gap",
        )?;
        let learning_rate = s.learning_rate.unwrap_or(1.0 / smoothness);
        let params = SystemParams {
            n_devices: n,
            model_dim,
            noise_std: s.noise_std,
            epsilon: self.privacy.epsilon.unwrap_or(f64::INFINITY),
            delta: self.privacy.delta,
            sum_power: s.sum_power,
            total_rounds: s.total_rounds,
            grad_bound: s.grad_bound,
            smoothness,
            strong_convexity,
            learning_rate,
            initial_gap,
        };
        params.validate().map_err(|e| match e {
            Error::InvalidParam { field, reason } => {
                let section = if field == "epsilon" || field == "delta" {
                    "privacy"
                } else {
                    "system"
                };
                invalid(&format!("{section}.{field}"), reason)
            }
            other => other,
        })?;
        if !(self.solver.conv_tol >= 0.0) {
            return Err(invalid("solver.conv_tol", "must be non-negative"));
        }
        if self.solver.max_iters == 0 {
            return Err(invalid("solver.max_iters", "must be at least 1"));
        }
        if let Some(r) = self.solver.rounds {
            if r == 0 || r > params.total_rounds {
                return Err(invalid(
                    "solver.rounds",
                    format!("must lie in [1, {}]", params.total_rounds),
                ));
            }
        }
        Ok(Experiment {
            fleet,
            params,
            model,
            solver: self.solver.clone(),
        })
    }

    fn resolve_fleet(&self, base_dir: &Path) -> Result<Fleet> {
        let wrap = |e: Error, prefix: &str| match e {
            Error::InvalidDevice { record, id, reason } => invalid(
                &format!("{prefix}[{record}]"),
                format!("device {id}: {reason}"),
            ),
            other => other,
        };
        match (&self.fleet, &self.fleet_file) {
            (Some(_), Some(_)) => Err(invalid(
                "fleet",
                "give either fleet or fleet_file, not both",
            )),
            (None, None) => Err(invalid(
                "fleet",
                "a fleet or fleet_file section is required",
            )),
            (None, Some(path)) => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| Error::Parse(format!("fleet_file {}: {e}", full.display())))?;
                Fleet::from_json_str(&text).map_err(|e| wrap(e, "fleet_file"))
            }
            (Some(FleetSection::Records(records)), None) => {
                Fleet::from_json_values(records).map_err(|e| wrap(e, "fleet"))
            }
            (Some(FleetSection::Random { random }), None) => random_fleet(random),
        }
    }
}

/// Gains log-uniform in `[gain_min, gain_max]`, one device pinned at each end.
pub fn random_fleet(spec: &RandomFleet) -> Result<Fleet> {
    if spec.n == 0 {
        return Err(invalid("fleet.random.n", "must be at least 1"));
    }
    if !(spec.gain_min > 0.0 && spec.gain_min <= spec.gain_max) {
        return Err(invalid(
            "fleet.random.gain_min",
            "need 0 < gain_min <= gain_max",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.gain_min.ln(), spec.gain_max.ln());
    let devices = (0..spec.n)
        .map(|i| {
            let h = match i {
                0 => spec.gain_min,
                1 => spec.gain_max,
                _ if lo == hi => spec.gain_min,
                _ => rng.random_range(lo..hi).exp(),
            };
            DeviceProfile::new(i as u32, h, spec.peak_power)
        })
        .collect();
    Fleet::new(devices)
}

impl Experiment {
    /// Joint optimisation when the objective is strongly convex and no round
    /// count is fixed; otherwise planning at the fixed (or total) round count.
    pub fn plan(&self) -> Result<SchedulePlan> {
        match self.solver.rounds {
            None if self.params.is_convex() => solve_p1(
                &self.fleet,
                &self.params,
                self.solver.conv_tol,
                self.solver.max_iters,
            ),
            fixed => solve_fixed_rounds(
                &self.fleet,
                &self.params,
                fixed.unwrap_or(self.params.total_rounds),
            ),
        }
    }
}
