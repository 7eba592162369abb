//! Closed-form convergence bounds.
//!
//! Expectations are over channel noise only. `theta` may be `+inf` to model a
//! noise-free alignment limit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system_model::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// One-round expected descent of the global loss.
    Descent,
    /// Expected optimality gap after `I` rounds, strongly convex case.
    ConvexGap,
    /// Noise-free, full-participation, single-step gap.
    NoiselessGap,
    /// Average squared gradient norm, non-convex case.
    NonconvexAvgGrad,
}

/// Arguments of a bound evaluation, echoed for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub params: SystemParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rounds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schedule_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub local_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_kind: BoundKind,
    pub value: f64,
    pub inputs_echo: BoundInputs,
}

fn check_schedule_size(k: usize, params: &SystemParams) -> Result<()> {
    if k == 0 || k > params.n_devices {
        return Err(Error::Domain(format!(
            "schedule size must lie in [1, {}], got {k}",
            params.n_devices
        )));
    }
    Ok(())
}

pub(crate) fn require_convex(params: &SystemParams, what: &'static str) -> Result<()> {
    if params.strong_convexity > 0.0 {
        Ok(())
    } else {
        Err(Error::ConvexityRequired(what))
    }
}

/// `4(1 - k/N)^2 + s^2 + d sigma^2 / (2 (k theta)^2)` where `s` is the local-step excess.
pub(crate) fn convex_bracket(k: usize, theta: f64, step_excess: f64, params: &SystemParams) -> f64 {
    let part = 1.0 - k as f64 / params.n_devices as f64;
    let kt = k as f64 * theta;
    4.0 * part * part
        + step_excess * step_excess
        + params.model_dim as f64 * params.noise_std * params.noise_std / (2.0 * (kt * kt))
}

/// `eta^I G + (w^2 / rho)(1 - eta^I) * bracket`.
pub(crate) fn convex_gap_value(rounds: u64, bracket: f64, params: &SystemParams) -> f64 {
    let eta_i = params.convergence_coeff().powf(rounds as f64);
    eta_i * params.initial_gap
        + params.grad_bound * params.grad_bound / params.strong_convexity * (1.0 - eta_i) * bracket
}

/// Expected one-round change of the global loss.
pub fn descent_bound(
    grad_norm_sq: f64,
    params: &SystemParams,
    schedule_size: usize,
    nu: f64,
    local_steps: u64,
) -> Result<f64> {
    check_schedule_size(schedule_size, params)?;
    if local_steps == 0 {
        return Err(Error::Domain("local_steps must be at least 1".into()));
    }
    let tau = params.learning_rate;
    let w2 = params.grad_bound * params.grad_bound;
    let e1 = local_steps as f64 - 1.0;
    let part = 1.0 - schedule_size as f64 / params.n_devices as f64;
    let kn = schedule_size as f64 * nu;
    let noise = params.model_dim as f64 * params.noise_std * params.noise_std / (kn * kn);
    Ok(-(tau / 2.0) * grad_norm_sq
        + tau * w2 * e1 * e1
        + 4.0 * tau * w2 * part * part
        + params.smoothness * tau * tau / 2.0 * noise)
}

/// Upper bound on `E[L(m^I)] - L(m*)` for strongly convex objectives.
pub fn optimality_gap_bound(
    rounds: u64,
    schedule_size: usize,
    theta: f64,
    local_steps: u64,
    params: &SystemParams,
) -> Result<f64> {
    require_convex(
        params,
        "the optimality-gap bound needs strong convexity; use the average squared gradient bound",
    )?;
    check_schedule_size(schedule_size, params)?;
    if local_steps == 0 {
        return Err(Error::Domain("local_steps must be at least 1".into()));
    }
    let bracket = convex_bracket(schedule_size, theta, local_steps as f64 - 1.0, params);
    Ok(convex_gap_value(rounds, bracket, params))
}

/// `(1 - rho/zeta)^T G`.
pub fn noiseless_gap_bound(
    total_rounds: u64,
    initial_gap: f64,
    strong_convexity: f64,
    smoothness: f64,
) -> Result<f64> {
    if !(strong_convexity >= 0.0 && strong_convexity <= smoothness) {
        return Err(Error::Domain(format!(
            "strong convexity {strong_convexity} must lie in [0, smoothness = {smoothness}]"
        )));
    }
    Ok((1.0 - strong_convexity / smoothness).powf(total_rounds as f64) * initial_gap)
}

/// Upper bound on `(1/I) sum_i E||grad L(m^i)||^2`; valid without convexity.
pub fn avg_sq_gradient_bound(
    rounds: u64,
    schedule_size: usize,
    theta: f64,
    local_steps: u64,
    params: &SystemParams,
) -> Result<f64> {
    check_schedule_size(schedule_size, params)?;
    if rounds == 0 || local_steps == 0 {
        return Err(Error::Domain(
            "rounds and local_steps must be at least 1".into(),
        ));
    }
    let part = 1.0 - schedule_size as f64 / params.n_devices as f64;
    let e1 = local_steps as f64 - 1.0;
    let kt = schedule_size as f64 * theta;
    let bracket = 8.0 * part * part
        + 2.0 * e1 * e1
        + params.model_dim as f64 * params.noise_std * params.noise_std / (kt * kt);
    Ok(
        2.0 / (params.learning_rate * rounds as f64) * params.initial_gap
            + params.grad_bound * params.grad_bound * bracket,
    )
}

impl BoundReport {
    fn build(
        kind: BoundKind,
        value: f64,
        params: &SystemParams,
        rounds: Option<u64>,
        schedule_size: Option<usize>,
        theta: Option<f64>,
        local_steps: Option<u64>,
    ) -> Self {
        Self {
            bound_kind: kind,
            value,
            inputs_echo: BoundInputs {
                params: params.clone(),
                rounds,
                schedule_size,
                theta,
                local_steps,
            },
        }
    }

    pub fn convex_gap(
        rounds: u64,
        schedule_size: usize,
        theta: f64,
        local_steps: u64,
        params: &SystemParams,
    ) -> Result<Self> {
        let v = optimality_gap_bound(rounds, schedule_size, theta, local_steps, params)?;
        Ok(Self::build(
            BoundKind::ConvexGap,
            v,
            params,
            Some(rounds),
            Some(schedule_size),
            Some(theta),
            Some(local_steps),
        ))
    }

    pub fn noiseless_gap(params: &SystemParams) -> Result<Self> {
        let v = noiseless_gap_bound(
            params.total_rounds,
            params.initial_gap,
            params.strong_convexity,
            params.smoothness,
        )?;
        Ok(Self::build(
            BoundKind::NoiselessGap,
            v,
            params,
            Some(params.total_rounds),
            None,
            None,
            None,
        ))
    }

    pub fn nonconvex_avg_grad(
        rounds: u64,
        schedule_size: usize,
        theta: f64,
        local_steps: u64,
        params: &SystemParams,
    ) -> Result<Self> {
        let v = avg_sq_gradient_bound(rounds, schedule_size, theta, local_steps, params)?;
        Ok(Self::build(
            BoundKind::NonconvexAvgGrad,
            v,
            params,
            Some(rounds),
            Some(schedule_size),
            Some(theta),
            Some(local_steps),
        ))
    }

    pub fn descent(
        grad_norm_sq: f64,
        params: &SystemParams,
        schedule_size: usize,
        nu: f64,
        local_steps: u64,
    ) -> Result<Self> {
        let v = descent_bound(grad_norm_sq, params, schedule_size, nu, local_steps)?;
        Ok(Self::build(
            BoundKind::Descent,
            v,
            params,
            None,
            Some(schedule_size),
            Some(nu * params.grad_bound),
            Some(local_steps),
        ))
    }
}
