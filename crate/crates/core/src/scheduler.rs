//! Joint choice of the scheduled set, the alignment factor and the number of
//! aggregation rounds.
//!
//! The problem is split in two. For a fixed round count the set/alignment
//! sub-problem has a small list of closed-form candidate pairs whose best
//! member is optimal; the round count is then found by an exhaustive integer
//! scan, and the two steps alternate until the objective settles.
//!
//! With per-device peak powers the closed-form list is not always optimal, so
//! it is extended by an exact threshold enumeration (see [`CandidateOrigin`]).

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::aggregation::{power_scaling_factors, round_power, scaling_raw};
use crate::bounds::{avg_sq_gradient_bound, convex_bracket, convex_gap_value, require_convex};
use crate::error::{Error, Result};
use crate::privacy::{alignment_cap, epsilon_raw, PrivacyBudget, PrivacyLedger};
use crate::system_model::{
    compute_channel_vectors, theta_max_at, ChannelVectors, DeviceId, Fleet, PowerMode, SystemParams,
};

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_CONV_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateOrigin {
    /// One of the `|Q| + 1` closed-form pairs.
    ClosedForm,
    /// Best set of a given size among `{k : c_k >= t}` for a threshold `t`;
    /// only generated with per-device peak powers.
    Refinement,
}

/// Outcome of the sufficient condition for a pair to beat full participation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SufficientCondition {
    Beats,
    DoesNotBeat,
    /// The radicand `1/(N^2 c_1^2) - 8/(d sigma^2)` is not positive.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub rank: usize,
    pub origin: CandidateOrigin,
    /// `+inf` (`null`) for the empty final candidate when privacy is unconstrained.
    #[serde(with = "crate::serde_inf")]
    pub theta: f64,
    pub schedule: Vec<DeviceId>,
    #[serde(with = "crate::serde_inf")]
    pub psi: f64,
    /// False for an empty set; such candidates are never selected.
    pub feasible: bool,
    /// The closed-form alignment exceeded the set's admissible maximum and was reduced.
    pub clipped: bool,
    /// Sufficient-condition verdict; absent when full participation is privacy-limited.
    pub sufficient_condition: Option<SufficientCondition>,
    /// Whether `psi` is at most the full-participation objective.
    pub beats_full: Option<bool>,
}

/// Solution of the set/alignment sub-problem at a fixed round count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Solution {
    pub schedule: Vec<DeviceId>,
    pub theta: f64,
    pub psi: f64,
    /// Best objective over closed-form candidates only.
    pub closed_form_psi: f64,
    pub candidates: Vec<CandidatePair>,
    pub rounds_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Optimality-gap objective over (set, alignment, rounds).
    ConvexGap,
    /// Average squared gradient bound at caller-fixed rounds.
    NonconvexAvgGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rounds_in: u64,
    pub schedule_size: usize,
    pub theta: f64,
    pub rounds_out: u64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub schedule: Vec<DeviceId>,
    pub theta: f64,
    pub nu: f64,
    pub rounds: u64,
    pub local_steps: u64,
    pub power_scaling: BTreeMap<DeviceId, f64>,
    pub predicted_objective: f64,
    pub objective_kind: ObjectiveKind,
    /// False when the alternation hit its iteration limit.
    pub converged: bool,
    pub iterations: usize,
    pub mode: PowerMode,
    #[serde(with = "crate::serde_inf")]
    pub alignment_cap: f64,
    pub round_power: f64,
    pub privacy: PrivacyLedger,
    pub closed_form_psi: f64,
    pub candidates: Vec<CandidatePair>,
    pub history: Vec<IterationRecord>,
}

impl SchedulePlan {
    pub fn schedule_size(&self) -> usize {
        self.schedule.len()
    }
}

pub(crate) fn psi_raw(k: usize, theta: f64, params: &SystemParams) -> f64 {
    let part = 1.0 - k as f64 / params.n_devices as f64;
    let kt = k as f64 * theta;
    4.0 * part * part
        + params.model_dim as f64 * params.noise_std * params.noise_std / (2.0 * (kt * kt))
}

/// `4(1 - |K|/N)^2 + d sigma^2 / (2 |K|^2 theta^2)`.
pub fn objective_psi(schedule_size: usize, theta: f64, params: &SystemParams) -> Result<f64> {
    if schedule_size == 0 {
        return Err(Error::Domain(
            "objective diverges for an empty schedule".into(),
        ));
    }
    if !(theta > 0.0) {
        return Err(Error::Domain(format!(
            "theta must be positive, got {theta}"
        )));
    }
    Ok(psi_raw(schedule_size, theta, params))
}

/// Optimality-gap objective with `T/I` treated as a continuous ratio.
pub fn objective_w(
    schedule_size: usize,
    theta: f64,
    rounds: u64,
    params: &SystemParams,
) -> Result<f64> {
    require_convex(
        params,
        "the round-count objective needs strong convexity; use the average squared gradient bound",
    )?;
    if rounds == 0 {
        return Err(Error::Domain("rounds must be at least 1".into()));
    }
    if schedule_size == 0 {
        return Err(Error::Domain(
            "objective diverges for an empty schedule".into(),
        ));
    }
    let ratio = params.total_rounds as f64 / rounds as f64;
    let bracket = convex_bracket(schedule_size, theta, ratio - 1.0, params);
    Ok(convex_gap_value(rounds, bracket, params))
}

fn check_fleet_size(fleet: &Fleet, params: &SystemParams) -> Result<()> {
    if fleet.len() != params.n_devices {
        return Err(Error::InvalidParam {
            field: "n_devices".into(),
            reason: format!(
                "is {} but the fleet has {} devices",
                params.n_devices,
                fleet.len()
            ),
        });
    }
    Ok(())
}

/// Evaluates the sufficient condition `|K| theta >= 1 / sqrt(1/(N^2 c_1^2) - 8/(d sigma^2))`.
pub fn beats_full_participation(
    schedule: &[DeviceId],
    theta: f64,
    params: &SystemParams,
    vectors: &ChannelVectors,
) -> SufficientCondition {
    sufficient_condition_at(schedule.len(), theta, params, vectors.c[0])
}

fn sufficient_condition_at(
    k: usize,
    theta: f64,
    params: &SystemParams,
    c1: f64,
) -> SufficientCondition {
    let n = params.n_devices as f64;
    let radicand = 1.0 / (n * n * c1 * c1)
        - 8.0 / (params.model_dim as f64 * params.noise_std * params.noise_std);
    if !(radicand > 0.0) || !radicand.is_finite() {
        return SufficientCondition::Undefined;
    }
    if k as f64 * theta >= 1.0 / radicand.sqrt() {
        SufficientCondition::Beats
    } else {
        SufficientCondition::DoesNotBeat
    }
}

/// Exact feasibility of `(schedule, theta)` at `rounds`, with `nu = theta / w`.
pub(crate) fn theta_is_feasible(
    fleet: &Fleet,
    schedule: &[DeviceId],
    theta: f64,
    rounds: u64,
    params: &SystemParams,
) -> Result<bool> {
    let nu = theta / params.grad_bound;
    for &id in schedule {
        let d = fleet.get(id)?;
        if !(scaling_raw(nu, params.grad_bound, d.channel_gain, d.peak_power) <= 1.0)
            || !(nu <= d.amplitude_limit() / params.grad_bound)
        {
            return Ok(false);
        }
    }
    if !(rounds as f64 * round_power(fleet, schedule, theta)? <= params.sum_power) {
        return Ok(false);
    }
    if params.epsilon.is_finite() {
        let phi = crate::privacy::gaussian_phi(params.delta);
        if !(epsilon_raw(params.grad_bound, nu, params.noise_std, phi) <= params.epsilon) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Nudges `theta` down by ulps until every constraint holds in floating point.
pub fn fit_theta(
    fleet: &Fleet,
    schedule: &[DeviceId],
    theta: f64,
    rounds: u64,
    params: &SystemParams,
) -> Result<f64> {
    let mut t = theta;
    for _ in 0..64 {
        if theta_is_feasible(fleet, schedule, t, rounds, params)? {
            return Ok(t);
        }
        t = t.next_down();
    }
    Err(Error::NumericalFailure {
        round: 0,
        detail: format!("alignment factor {theta} could not be made feasible"),
    })
}

struct Draft {
    origin: CandidateOrigin,
    positions: Vec<usize>,
    theta: f64,
    clipped: bool,
}

fn closed_form_drafts(fleet: &Fleet, v: &ChannelVectors, cap: f64, sum_power: f64) -> Vec<Draft> {
    let n = fleet.len();
    let all: Vec<usize> = (0..n).collect();
    if cap < v.c[0].min(v.q[0]) {
        return vec![Draft {
            origin: CandidateOrigin::ClosedForm,
            positions: all,
            theta: cap,
            clipped: false,
        }];
    }
    let q1 = v.c.iter().filter(|&&c| c < cap).count();
    let q2 = v.q.iter().filter(|&&q| q < cap).count();
    let big_q = q1.max(q2);
    let mut out = Vec::with_capacity(big_q + 1);
    for j in 0..big_q {
        let theta = v.c[j].min(v.q[j]);
        let positions: Vec<usize> = match v.mode {
            PowerMode::Equal => (j..n).collect(),
            PowerMode::Heterogeneous => {
                if v.c[j] <= v.q[j] {
                    (0..n).filter(|&p| v.c_by_position[p] >= v.c[j]).collect()
                } else {
                    (j..n).collect()
                }
            }
        };
        out.push(clip_draft(
            fleet, positions, theta, cap, sum_power, v.rounds,
        ));
    }
    out.push(clip_draft(
        fleet,
        (big_q..n).collect(),
        cap,
        cap,
        sum_power,
        v.rounds,
    ));
    out
}

fn clip_draft(
    fleet: &Fleet,
    positions: Vec<usize>,
    theta: f64,
    cap: f64,
    sum_power: f64,
    rounds: u64,
) -> Draft {
    if positions.is_empty() {
        return Draft {
            origin: CandidateOrigin::ClosedForm,
            positions,
            theta,
            clipped: false,
        };
    }
    let tmax = theta_max_at(fleet, &positions, cap, sum_power, rounds);
    Draft {
        origin: CandidateOrigin::ClosedForm,
        positions,
        theta: theta.min(tmax),
        clipped: tmax < theta,
    }
}

/// For every size, the best set among `{k : c_k >= t}` over all thresholds `t`.
fn refinement_drafts(fleet: &Fleet, v: &ChannelVectors, cap: f64, sum_power: f64) -> Vec<Draft> {
    let n = fleet.len();
    let scale = (sum_power / v.rounds as f64).sqrt();
    let mut best: Vec<Option<(f64, f64)>> = vec![None; n + 1];
    let mut thresholds = v.c.clone();
    thresholds.dedup();
    for &t in &thresholds {
        let mut inv_sq = 0.0;
        let mut c_min = f64::INFINITY;
        let mut size = 0;
        for p in (0..n).rev() {
            if v.c_by_position[p] < t {
                continue;
            }
            let h = fleet.devices()[p].channel_gain;
            inv_sq += 1.0 / (h * h);
            c_min = c_min.min(v.c_by_position[p]);
            size += 1;
            let theta = cap.min(c_min).min(scale / inv_sq.sqrt());
            if best[size].is_none_or(|(bt, _)| theta > bt) {
                best[size] = Some((theta, t));
            }
        }
    }
    let mut out = Vec::new();
    for (size, entry) in best.iter().enumerate() {
        let Some((_, t)) = *entry else { continue };
        let eligible: Vec<usize> = (0..n).filter(|&p| v.c_by_position[p] >= t).collect();
        let positions = eligible[eligible.len() - size..].to_vec();
        let theta = theta_max_at(fleet, &positions, cap, sum_power, v.rounds);
        out.push(Draft {
            origin: CandidateOrigin::Refinement,
            positions,
            theta,
            clipped: false,
        });
    }
    out
}

/// Solves the set/alignment sub-problem at a fixed round count.
pub fn solve_p2(
    fleet: &Fleet,
    cap: f64,
    sum_power: f64,
    rounds: u64,
    mode: PowerMode,
    params: &SystemParams,
) -> Result<P2Solution> {
    check_fleet_size(fleet, params)?;
    if !(cap > 0.0) {
        return Err(Error::Domain(format!(
            "alignment cap must be positive, got {cap}"
        )));
    }
    let v = compute_channel_vectors(fleet, sum_power, rounds, mode)?;
    let mut drafts = closed_form_drafts(fleet, &v, cap, sum_power);
    if mode == PowerMode::Heterogeneous {
        drafts.extend(refinement_drafts(fleet, &v, cap, sum_power));
    }
    let privacy_limited = cap < v.c[0].min(v.q[0]);
    let psi_full = psi_raw(fleet.len(), v.c[0].min(v.q[0]).min(cap), params);
    let fit_params = SystemParams {
        sum_power,
        ..params.clone()
    };

    let mut candidates: Vec<CandidatePair> = Vec::with_capacity(drafts.len());
    let mut best: Option<usize> = None;
    let mut closed_form_psi = f64::INFINITY;
    for (i, draft) in drafts.into_iter().enumerate() {
        let schedule = fleet.ids_at(&draft.positions);
        let k = schedule.len();
        let (theta, psi, feasible) = if k == 0 {
            (draft.theta, f64::INFINITY, false)
        } else {
            let theta = fit_theta(fleet, &schedule, draft.theta, rounds, &fit_params)?;
            (theta, psi_raw(k, theta, params), theta > 0.0)
        };
        let (sufficient_condition, beats_full) = if !feasible || privacy_limited {
            (None, None)
        } else {
            (
                Some(sufficient_condition_at(k, theta, params, v.c[0])),
                Some(psi <= psi_full),
            )
        };
        if sufficient_condition == Some(SufficientCondition::Beats) && beats_full == Some(false) {
            warn!(
                "sufficient condition holds but candidate {} does not beat full participation",
                i + 1
            );
        }
        if feasible {
            if draft.origin == CandidateOrigin::ClosedForm {
                closed_form_psi = closed_form_psi.min(psi);
            }
            if best.is_none_or(|b: usize| psi < candidates[b].psi) {
                best = Some(i);
            }
        }
        candidates.push(CandidatePair {
            rank: i + 1,
            origin: draft.origin,
            theta,
            schedule,
            psi,
            feasible,
            clipped: draft.clipped,
            sufficient_condition,
            beats_full,
        });
    }
    let b = best.ok_or(Error::NoFeasibleSchedule)?;
    let chosen = &candidates[b];
    debug!(
        "p2 at I={rounds}: |K|={} theta={} psi={} ({} candidates)",
        chosen.schedule.len(),
        chosen.theta,
        chosen.psi,
        candidates.len()
    );
    Ok(P2Solution {
        schedule: chosen.schedule.clone(),
        theta: chosen.theta,
        psi: chosen.psi,
        closed_form_psi,
        rounds_used: rounds,
        candidates,
    })
}

/// Largest `I <= T` with `I * round_power <= P_tot` in floating point.
pub fn max_feasible_rounds(
    fleet: &Fleet,
    schedule: &[DeviceId],
    theta: f64,
    params: &SystemParams,
) -> Result<u64> {
    let rp = round_power(fleet, schedule, theta)?;
    let power_cap = params.sum_power / rp;
    if !(power_cap >= 1.0) || !(rp <= params.sum_power) {
        return Err(Error::NoFeasibleRounds { power_cap });
    }
    let t = params.total_rounds;
    let mut i = if power_cap >= t as f64 {
        t
    } else {
        power_cap.floor() as u64
    };
    while i < t && ((i + 1) as f64 * rp) <= params.sum_power {
        i += 1;
    }
    while i > 0 && !((i as f64 * rp) <= params.sum_power) {
        i -= 1;
    }
    if i == 0 {
        return Err(Error::NoFeasibleRounds { power_cap });
    }
    Ok(i)
}

/// Exhaustive scan for the round count; ties go to the smaller count.
pub fn solve_p3(
    fleet: &Fleet,
    schedule: &[DeviceId],
    theta: f64,
    params: &SystemParams,
) -> Result<u64> {
    require_convex(
        params,
        "the round-count problem needs strong convexity; fix the rounds instead",
    )?;
    if schedule.is_empty() {
        return Err(Error::Domain("schedule must be nonempty".into()));
    }
    let i_max = max_feasible_rounds(fleet, schedule, theta, params)?;
    let k = schedule.len();
    let mut best = (1, objective_w(k, theta, 1, params)?);
    for i in 2..=i_max {
        let w = objective_w(k, theta, i, params)?;
        if w < best.1 {
            best = (i, w);
        }
    }
    Ok(best.0)
}

fn setup(fleet: &Fleet, params: &SystemParams) -> Result<(f64, PowerMode)> {
    params.validate()?;
    check_fleet_size(fleet, params)?;
    let budget = PrivacyBudget::new(params.epsilon, params.delta)?;
    Ok((alignment_cap(&budget, params.noise_std), fleet.power_mode()))
}

struct Assembled<'a> {
    p2: P2Solution,
    rounds: u64,
    objective: f64,
    kind: ObjectiveKind,
    cap: f64,
    mode: PowerMode,
    converged: bool,
    iterations: usize,
    history: Vec<IterationRecord>,
    fleet: &'a Fleet,
}

fn assemble(a: Assembled<'_>, params: &SystemParams) -> Result<SchedulePlan> {
    let theta = a.p2.theta;
    let nu = theta / params.grad_bound;
    let power_scaling = power_scaling_factors(a.fleet, &a.p2.schedule, nu, params.grad_bound)?;
    let eps = if params.noise_std == 0.0 {
        f64::INFINITY
    } else {
        epsilon_raw(
            params.grad_bound,
            nu,
            params.noise_std,
            crate::privacy::gaussian_phi(params.delta),
        )
    };
    Ok(SchedulePlan {
        round_power: round_power(a.fleet, &a.p2.schedule, theta)?,
        schedule: a.p2.schedule,
        theta,
        nu,
        rounds: a.rounds,
        local_steps: params.total_rounds / a.rounds,
        power_scaling,
        predicted_objective: a.objective,
        objective_kind: a.kind,
        converged: a.converged,
        iterations: a.iterations,
        mode: a.mode,
        alignment_cap: a.cap,
        privacy: PrivacyLedger::new(eps, params.delta, a.rounds),
        closed_form_psi: a.p2.closed_form_psi,
        candidates: a.p2.candidates,
        history: a.history,
    })
}

/// Alternates the set/alignment and round-count sub-problems, starting from `I = T`.
pub fn solve_p1(
    fleet: &Fleet,
    params: &SystemParams,
    conv_tol: f64,
    max_iters: usize,
) -> Result<SchedulePlan> {
    let (cap, mode) = setup(fleet, params)?;
    require_convex(
        params,
        "joint optimisation needs strong convexity; use solve_fixed_rounds",
    )?;
    if max_iters == 0 {
        return Err(Error::InvalidParam {
            field: "max_iters".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mut rounds_in = params.total_rounds;
    let mut reference: Option<f64> = None;
    let mut best: Option<(P2Solution, u64, f64)> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        let p2 = solve_p2(fleet, cap, params.sum_power, rounds_in, mode, params)?;
        let k = p2.schedule.len();
        let i_star = solve_p3(fleet, &p2.schedule, p2.theta, params)?;
        let w = objective_w(k, p2.theta, i_star, params)?;
        let prev = match reference {
            Some(r) => r,
            None => objective_w(k, p2.theta, params.total_rounds, params)?,
        };
        history.push(IterationRecord {
            iteration: it,
            rounds_in,
            schedule_size: k,
            theta: p2.theta,
            rounds_out: i_star,
            objective: w,
        });
        if best.as_ref().is_none_or(|b| w < b.2) {
            best = Some((p2, i_star, w));
        }
        if (w - prev).abs() <= conv_tol {
            converged = true;
            break;
        }
        reference = Some(w);
        rounds_in = i_star;
    }
    if !converged {
        warn!(
            "alternation did not converge within {max_iters} iterations; returning best plan seen"
        );
    }
    let (p2, rounds, objective) = best.expect("at least one iteration ran");
    assemble(
        Assembled {
            p2,
            rounds,
            objective,
            kind: ObjectiveKind::ConvexGap,
            cap,
            mode,
            converged,
            iterations,
            history,
            fleet,
        },
        params,
    )
}

/// Plans at caller-fixed `rounds`, scoring with the average squared gradient bound.
///
/// This is the only planner available without strong convexity.
pub fn solve_fixed_rounds(
    fleet: &Fleet,
    params: &SystemParams,
    rounds: u64,
) -> Result<SchedulePlan> {
    let (cap, mode) = setup(fleet, params)?;
    if rounds == 0 || rounds > params.total_rounds {
        return Err(Error::InvalidParam {
            field: "rounds".into(),
            reason: format!("must lie in [1, {}], got {rounds}", params.total_rounds),
        });
    }
    let p2 = solve_p2(fleet, cap, params.sum_power, rounds, mode, params)?;
    let k = p2.schedule.len();
    let e = params.total_rounds / rounds;
    let objective = avg_sq_gradient_bound(rounds, k, p2.theta, e, params)?;
    let history = vec![IterationRecord {
        iteration: 1,
        rounds_in: rounds,
        schedule_size: k,
        theta: p2.theta,
        rounds_out: rounds,
        objective,
    }];
    assemble(
        Assembled {
            p2,
            rounds,
            objective,
            kind: ObjectiveKind::NonconvexAvgGrad,
            cap,
            mode,
            converged: true,
            iterations: 1,
            history,
            fleet,
        },
        params,
    )
}

/// Full participation with the largest common alignment, at caller-fixed rounds.
pub fn full_participation_plan(
    fleet: &Fleet,
    params: &SystemParams,
    rounds: u64,
) -> Result<SchedulePlan> {
    let (cap, mode) = setup(fleet, params)?;
    let ids = fleet.ids();
    let all: Vec<usize> = (0..fleet.len()).collect();
    let theta0 = theta_max_at(fleet, &all, cap, params.sum_power, rounds);
    let theta = fit_theta(fleet, &ids, theta0, rounds, params)?;
    let psi = psi_raw(ids.len(), theta, params);
    let e = params.total_rounds / rounds;
    let objective = if params.is_convex() {
        objective_w(ids.len(), theta, rounds, params)?
    } else {
        avg_sq_gradient_bound(rounds, ids.len(), theta, e, params)?
    };
    let p2 = P2Solution {
        schedule: ids.clone(),
        theta,
        psi,
        closed_form_psi: psi,
        candidates: vec![],
        rounds_used: rounds,
    };
    assemble(
        Assembled {
            p2,
            rounds,
            objective,
            kind: if params.is_convex() {
                ObjectiveKind::ConvexGap
            } else {
                ObjectiveKind::NonconvexAvgGrad
            },
            cap,
            mode,
            converged: true,
            iterations: 0,
            history: vec![],
            fleet,
        },
        params,
    )
}
