//! Gaussian-mechanism accounting for the received over-the-air signal.
//!
//! The channel noise is the only privacy mechanism. Every scheduled device is
//! scaled to the same alignment coefficient, so the per-round loss is the
//! same for all of them. Reported values are upper bounds on the leakage, and
//! no composition across rounds is claimed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(2 ln(1.25 / delta))`.
pub fn gaussian_phi(delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            field: "delta".into(),
            reason: format!("must lie in (0, 1), got {delta}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    /// Per-round budget; infinite means unconstrained.
    #[serde(with = "crate::serde_inf")]
    pub epsilon: f64,
    pub delta: f64,
    pub phi: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParam {
                field: "epsilon".into(),
                reason: format!("must be positive, got {epsilon}"),
            });
        }
        Ok(Self {
            epsilon,
            delta,
            phi: gaussian_phi(delta),
        })
    }
}

/// Unchecked per-round epsilon, `2 w nu / sigma * phi`.
///
/// This expression order is shared by every feasibility check in the crate.
#[inline]
pub(crate) fn epsilon_raw(grad_bound: f64, nu: f64, noise_std: f64, phi: f64) -> f64 {
    2.0 * grad_bound * nu / noise_std * phi
}

/// Privacy loss of one round at alignment coefficient `nu`.
///
/// Infinite when `noise_std` is zero.
pub fn per_round_epsilon(grad_bound: f64, nu: f64, noise_std: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(grad_bound > 0.0) || !(nu >= 0.0) || !(noise_std >= 0.0) {
        return Err(Error::Domain(format!(
            "per_round_epsilon needs grad_bound > 0, nu >= 0, noise_std >= 0 (got {grad_bound}, {nu}, {noise_std})"
        )));
    }
    if nu == 0.0 {
        return Ok(0.0);
    }
    Ok(epsilon_raw(grad_bound, nu, noise_std, gaussian_phi(delta)))
}

/// Largest alignment factor `theta = nu * w` the budget admits, `eps sigma / (2 phi)`.
pub fn alignment_cap(budget: &PrivacyBudget, noise_std: f64) -> f64 {
    if budget.epsilon.is_infinite() {
        return f64::INFINITY;
    }
    budget.epsilon * noise_std / (2.0 * budget.phi)
}

/// Scales `v` onto the ball of radius `bound`. Returns whether it was clipped.
pub fn clip_to_norm(v: &mut [f64], bound: f64) -> bool {
    let norm = l2_norm(v);
    if norm > bound {
        let s = bound / norm;
        v.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sensitivity of the scaled upload to swapping one sample:
/// `nu * ||clip(g(D)) - clip(g(D'))||`.
pub fn empirical_sensitivity<S, F>(
    model_grad: F,
    dataset: &[S],
    swap_index: usize,
    replacement: S,
    nu: f64,
    grad_bound: f64,
) -> Result<f64>
where
    S: Clone,
    F: Fn(&[S]) -> Vec<f64>,
{
    if swap_index >= dataset.len() {
        return Err(Error::Domain(format!(
            "swap index {swap_index} out of range for dataset of {}",
            dataset.len()
        )));
    }
    let mut g = model_grad(dataset);
    let mut adjacent = dataset.to_vec();
    adjacent[swap_index] = replacement;
    let mut g_adj = model_grad(&adjacent);
    if g.len() != g_adj.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            got: g_adj.len(),
        });
    }
    clip_to_norm(&mut g, grad_bound);
    clip_to_norm(&mut g_adj, grad_bound);
    let diff: Vec<f64> = g.iter().zip(&g_adj).map(|(a, b)| a - b).collect();
    Ok(nu * l2_norm(&diff))
}

/// Per-round privacy statement attached to plans and simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    /// Upper bound on the loss of each individual round.
    #[serde(with = "crate::serde_inf")]
    pub epsilon_per_round: f64,
    pub delta: f64,
    /// Number of rounds the bound applies to. Not composed.
    pub rounds: u64,
    pub note: String,
}

impl PrivacyLedger {
    pub fn new(epsilon_per_round: f64, delta: f64, rounds: u64) -> Self {
        Self {
            epsilon_per_round,
            delta,
            rounds,
            note: "per-round (epsilon, delta) upper bound; no composition across rounds is claimed"
                .into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn epsilon_examples() {
        let e = per_round_epsilon(1.0, 1.0, 2.0, 0.0125).unwrap();
        assert_relative_eq!(e, 3.034854258770293, max_relative = 1e-14);
        assert_eq!(per_round_epsilon(1.0, 0.0, 2.0, 0.0125).unwrap(), 0.0);
        let tiny = per_round_epsilon(1.0, 1e-300, 2.0, 0.0125).unwrap();
        assert!(tiny < 1e-299);
        let half = per_round_epsilon(1.0, 1.0, 4.0, 0.0125).unwrap();
        assert_relative_eq!(half, e / 2.0, max_relative = 1e-15);
        assert!(per_round_epsilon(1.0, 1.0, 0.0, 0.0125)
            .unwrap()
            .is_infinite());
        assert!(per_round_epsilon(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(per_round_epsilon(0.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn cap_examples() {
        let b = PrivacyBudget::new(3.034854258770293, 0.0125).unwrap();
        assert_relative_eq!(alignment_cap(&b, 2.0), 1.0, max_relative = 1e-14);
        let inf = PrivacyBudget::new(f64::INFINITY, 0.0125).unwrap();
        assert!(alignment_cap(&inf, 2.0).is_infinite());
        assert!(alignment_cap(&inf, 0.0).is_infinite());
        let b = PrivacyBudget::new(1.0, 0.05).unwrap();
        // 1 / (2 sqrt(2 ln 25)), evaluated at 30 digits
        assert_relative_eq!(
            alignment_cap(&b, 1.0),
            0.197062003973307,
            max_relative = 1e-13
        );
    }

    #[test]
    fn cap_inverts_epsilon() {
        let b = PrivacyBudget::new(0.7, 0.01).unwrap();
        let theta = alignment_cap(&b, 1.3);
        let w = 2.5;
        let e = per_round_epsilon(w, theta / w, 1.3, 0.01).unwrap();
        assert_relative_eq!(e, 0.7, max_relative = 1e-12);
    }

    #[test]
    fn sensitivity_extremal_and_zero() {
        let grad = |d: &[f64]| vec![d[0], 0.0];
        let s = empirical_sensitivity(grad, &[1.0], 0, -1.0, 0.5, 1.0).unwrap();
        assert_relative_eq!(s, 1.0, max_relative = 1e-15);
        // clipping keeps the antipodal case at the bound
        let s = empirical_sensitivity(grad, &[5.0], 0, -5.0, 0.5, 1.0).unwrap();
        assert_relative_eq!(s, 1.0, max_relative = 1e-15);
        let s = empirical_sensitivity(grad, &[0.3], 0, 0.3, 0.5, 1.0).unwrap();
        assert_eq!(s, 0.0);
        assert!(empirical_sensitivity(grad, &[0.3], 1, 0.3, 0.5, 1.0).is_err());
    }

    #[test]
    fn clip_scales_only_when_needed() {
        let mut v = vec![3.0, 4.0];
        assert!(clip_to_norm(&mut v, 1.0));
        assert_relative_eq!(l2_norm(&v), 1.0, max_relative = 1e-15);
        let mut v = vec![0.3, 0.4];
        assert!(!clip_to_norm(&mut v, 1.0));
        assert_eq!(v, vec![0.3, 0.4]);
    }

    #[test]
    fn ledger_serializes_infinite_epsilon_as_null() {
        let l = PrivacyLedger::new(f64::INFINITY, 0.01, 10);
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.contains("\"epsilon_per_round\":null"));
        let back: PrivacyLedger = serde_json::from_str(&s).unwrap();
        assert!(back.epsilon_per_round.is_infinite());
    }
}
