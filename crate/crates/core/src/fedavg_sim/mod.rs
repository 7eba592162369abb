//! End-to-end training loop over the noisy analog uplink.
//!
//! Each round the server broadcasts the model, every scheduled device runs
//! `E` full-batch gradient steps on its local data, clips the accumulated
//! gradient to `w`, and uploads it with the plan's power scaling. The server
//! post-processes the superposed signal and takes one step of size `tau`.
//! Channel noise is the only source of randomness.

mod metrics;
mod models;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_round, power_scaling_factors, round_power};
use crate::error::{Error, Result};
use crate::privacy::{clip_to_norm, per_round_epsilon};
use crate::scheduler::SchedulePlan;
use crate::system_model::{DeviceId, Fleet, SystemParams};

pub use metrics::{format_g12, write_csv, RoundMetrics, CSV_HEADER};
pub use models::{
    make_synthetic_fleet, FederatedObjective, LogisticModel, Model, ModelKind, QuadraticModel,
    Sample, SyntheticSpec,
};

/// Outcome of local training on one device.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Accumulated (and possibly clipped) gradient.
    pub gradient: Vec<f64>,
    pub clipped: bool,
}

/// Runs `local_steps` gradient steps from `global_model` on dataset `dataset`
/// and returns the clipped sum of the visited gradients.
pub fn local_train<M: FederatedObjective + ?Sized>(
    model: &M,
    dataset: usize,
    global_model: &[f64],
    learning_rate: f64,
    local_steps: u64,
    grad_bound: f64,
    round: usize,
) -> Result<LocalUpdate> {
    if local_steps == 0 {
        return Err(Error::Domain("local_steps must be at least 1".into()));
    }
    if dataset >= model.n_devices() {
        return Err(Error::Domain(format!(
            "dataset {dataset} out of range for {} local datasets",
            model.n_devices()
        )));
    }
    let mut w = global_model.to_vec();
    let mut acc = vec![0.0; w.len()];
    for _ in 0..local_steps {
        let g = model.local_gradient(dataset, &w);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure {
                round,
                detail: format!("non-finite local gradient on dataset {dataset}"),
            });
        }
        for ((a, wi), gi) in acc.iter_mut().zip(w.iter_mut()).zip(&g) {
            *a += gi;
            *wi -= learning_rate * gi;
        }
    }
    let clipped = clip_to_norm(&mut acc, grad_bound);
    Ok(LocalUpdate {
        gradient: acc,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub seed: u64,
    pub initial_loss: f64,
    pub initial_gap: Option<f64>,
    pub metrics: Vec<RoundMetrics>,
    pub final_model: Vec<f64>,
    pub total_clips: u64,
    /// `I * round_power`.
    pub cumulative_power: f64,
}

/// Executes the plan for `plan.rounds` communication rounds.
pub fn run_simulation<M: FederatedObjective + ?Sized>(
    plan: &SchedulePlan,
    fleet: &Fleet,
    model: &M,
    params: &SystemParams,
    seed: u64,
) -> Result<SimulationRun> {
    if plan.schedule.is_empty() {
        return Err(Error::Domain("plan schedules no device".into()));
    }
    if plan.local_steps == 0 {
        return Err(Error::Domain("plan has zero local steps".into()));
    }
    let w = params.grad_bound;
    let checked = power_scaling_factors(fleet, &plan.schedule, plan.nu, w)?;
    for (id, phi) in &plan.power_scaling {
        match checked.get(id) {
            Some(c) if (c - phi).abs() <= 1e-12 * c => {}
            _ => {
                return Err(Error::PeakPowerViolation { id: *id, phi: *phi });
            }
        }
    }
    let datasets: Vec<(DeviceId, usize)> = plan
        .schedule
        .iter()
        .map(|&id| fleet.get(id).map(|d| (id, d.dataset)))
        .collect::<Result<_>>()?;
    let per_round_power = round_power(fleet, &plan.schedule, plan.theta)?;
    let epsilon = per_round_epsilon(w, plan.nu, params.noise_std, params.delta)?;
    let optimum = model.optimum().map(|(_, v)| v);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.initial_model();
    if m.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: m.len(),
        });
    }
    let initial_loss = model.loss(&m);
    let mut metrics = Vec::with_capacity(plan.rounds as usize);
    let mut total_clips = 0;
    for i in 0..plan.rounds as usize {
        let grad = model.gradient(&m);
        let grad_norm_sq: f64 = grad.iter().map(|x| x * x).sum();
        let mut uploads = BTreeMap::new();
        let mut clips = 0;
        for &(id, ds) in &datasets {
            let up = local_train(model, ds, &m, params.learning_rate, plan.local_steps, w, i)?;
            clips += up.clipped as u64;
            uploads.insert(id, up.gradient);
        }
        let rec = aggregate_round(
            fleet,
            uploads,
            &plan.power_scaling,
            plan.nu,
            w,
            params.noise_std,
            &mut rng,
        )?;
        m.iter_mut()
            .zip(&rec.estimate)
            .for_each(|(a, g)| *a -= params.learning_rate * g);
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure {
                round: i + 1,
                detail: "global model diverged".into(),
            });
        }
        let loss = model.loss(&m);
        total_clips += clips;
        metrics.push(RoundMetrics {
            round: i as u64 + 1,
            loss,
            gap: optimum.map(|v| loss - v),
            grad_norm_sq,
            clips,
            power_watts: per_round_power,
            epsilon,
        });
    }
    Ok(SimulationRun {
        seed,
        initial_loss,
        initial_gap: optimum.map(|v| initial_loss - v),
        metrics,
        final_model: m,
        total_clips,
        cumulative_power: plan.rounds as f64 * per_round_power,
    })
}
