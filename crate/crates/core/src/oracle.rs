//! Independent verifiers used by the test-suite and the `verify` command.
//!
//! Nothing here calls into the scheduler or the aggregation module: the
//! admissible alignment, the objective and every plan invariant are
//! re-derived from their definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system_model::{DeviceId, DeviceProfile, Fleet, SystemParams};

pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub schedule: Vec<DeviceId>,
    pub theta: f64,
    pub psi: f64,
    pub subsets_evaluated: u64,
}

/// Exhaustive search over every nonempty subset. Ties go to the
/// lexicographically smallest id list.
pub fn brute_force_p2(
    fleet: &Fleet,
    cap: f64,
    sum_power: f64,
    rounds: u64,
    params: &SystemParams,
) -> Result<BruteForceResult> {
    let devs = fleet.devices();
    let n = devs.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::OracleGuard {
            n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if rounds == 0 {
        return Err(Error::Domain("rounds must be at least 1".into()));
    }
    let per_round = sum_power / rounds as f64;
    let nn = params.n_devices as f64;
    let spread = params.model_dim as f64 * params.noise_std.powi(2);
    let mut best: Option<(f64, f64, Vec<DeviceId>)> = None;
    let mut evaluated = 0u64;
    for mask in 1u32..(1u32 << n) {
        let mut amp = f64::INFINITY;
        let mut inv = 0.0;
        let mut ids = Vec::new();
        for (i, d) in devs.iter().enumerate() {
            if mask >> i & 1 == 1 {
                amp = amp.min(d.channel_gain * d.peak_power.sqrt());
                inv += d.channel_gain.powi(-2);
                ids.push(d.id);
            }
        }
        ids.sort_unstable();
        let theta = cap.min(amp).min((per_round / inv).sqrt());
        let size = ids.len() as f64;
        let psi = 4.0 * (1.0 - size / nn).powi(2) + spread / (2.0 * size.powi(2) * theta.powi(2));
        evaluated += 1;
        let better = match &best {
            None => true,
            Some((bp, _, bids)) => psi < *bp || (psi == *bp && ids < *bids),
        };
        if better {
            best = Some((psi, theta, ids));
        }
    }
    let (psi, theta, schedule) = best.ok_or(Error::EmptyFleet)?;
    Ok(BruteForceResult {
        schedule,
        theta,
        psi,
        subsets_evaluated: evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Plan fields the audit needs; implemented by the scheduler's plan type.
pub trait AuditablePlan {
    fn schedule(&self) -> &[DeviceId];
    fn theta(&self) -> f64;
    fn nu(&self) -> f64;
    fn rounds(&self) -> u64;
    fn local_steps(&self) -> u64;
    fn power_scaling(&self) -> Vec<(DeviceId, f64)>;
}

impl AuditablePlan for crate::scheduler::SchedulePlan {
    fn schedule(&self) -> &[DeviceId] {
        &self.schedule
    }
    fn theta(&self) -> f64 {
        self.theta
    }
    fn nu(&self) -> f64 {
        self.nu
    }
    fn rounds(&self) -> u64 {
        self.rounds
    }
    fn local_steps(&self) -> u64 {
        self.local_steps
    }
    fn power_scaling(&self) -> Vec<(DeviceId, f64)> {
        self.power_scaling.iter().map(|(k, v)| (*k, *v)).collect()
    }
}

pub const CHECK_SCHEDULE: &str = "schedule-valid";
pub const CHECK_ALIGNMENT: &str = "alignment-consistent";
pub const CHECK_SCALING: &str = "power-scaling-range";
pub const CHECK_PEAK: &str = "peak-alignment";
pub const CHECK_SUM_POWER: &str = "sum-power";
pub const CHECK_STEPS: &str = "local-steps";
pub const CHECK_PRIVACY: &str = "privacy-budget";

/// Re-checks every plan invariant and reports each separately.
pub fn verify_plan<P: AuditablePlan>(
    plan: &P,
    fleet: &Fleet,
    params: &SystemParams,
) -> AuditReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(AuditCheck {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let mut members: Vec<&DeviceProfile> = Vec::new();
    let mut problems = Vec::new();
    let mut sorted = plan.schedule().to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() {
        problems.push("schedule is empty".to_string());
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        problems.push("schedule lists a device twice".to_string());
    }
    sorted.dedup();
    for id in &sorted {
        match fleet.devices().iter().find(|d| d.id == *id) {
            Some(d) => members.push(d),
            None => problems.push(format!("device {id} is not in the fleet")),
        }
    }
    push(CHECK_SCHEDULE, problems.is_empty(), problems.join("; "));

    let w = params.grad_bound;
    let theta = plan.theta();
    let nu = plan.nu();
    let rel = ((nu * w - theta) / theta).abs();
    push(
        CHECK_ALIGNMENT,
        theta > 0.0 && rel <= 1e-12,
        format!("theta = {theta}, nu * w = {}", nu * w),
    );

    let stored = plan.power_scaling();
    let mut bad = Vec::new();
    for d in &members {
        let phi = (nu * nu * w * w) / (d.channel_gain * d.channel_gain * d.peak_power);
        if !(phi > 0.0 && phi <= 1.0) {
            bad.push(format!("device {}: phi = {phi}", d.id));
        }
        match stored.iter().find(|(id, _)| *id == d.id) {
            Some((_, s)) if ((s - phi) / phi).abs() <= 1e-12 => {}
            Some((_, s)) => bad.push(format!("device {}: stored {s}, recomputed {phi}", d.id)),
            None => bad.push(format!("device {}: no stored scaling", d.id)),
        }
    }
    if stored.len() != members.len() {
        bad.push(format!(
            "{} stored scalings for {} scheduled devices",
            stored.len(),
            members.len()
        ));
    }
    push(CHECK_SCALING, bad.is_empty(), bad.join("; "));

    let worst = members
        .iter()
        .map(|d| d.channel_gain * d.peak_power.sqrt() / w)
        .fold(f64::INFINITY, f64::min);
    push(
        CHECK_PEAK,
        members
            .iter()
            .all(|d| nu <= d.channel_gain * d.peak_power.sqrt() / w),
        format!("nu = {nu}, limit = {worst}"),
    );

    let mut per_round = 0.0;
    for d in &members {
        per_round += theta * theta / (d.channel_gain * d.channel_gain);
    }
    let total = plan.rounds() as f64 * per_round;
    push(
        CHECK_SUM_POWER,
        total <= params.sum_power,
        format!(
            "I * per-round = {} * {per_round} = {total} vs budget {}",
            plan.rounds(),
            params.sum_power
        ),
    );

    let i = plan.rounds();
    let e = plan.local_steps();
    let t = params.total_rounds;
    push(
        CHECK_STEPS,
        i >= 1 && e >= 1 && i <= t && e == t / i && e * i <= t,
        format!("I = {i}, E = {e}, T = {t}"),
    );

    if params.epsilon.is_finite() {
        let phi = (2.0 * (1.25 / params.delta).ln()).sqrt();
        let eps = 2.0 * w * nu / params.noise_std * phi;
        push(
            CHECK_PRIVACY,
            eps <= params.epsilon,
            format!("per-round epsilon {eps} vs budget {}", params.epsilon),
        );
    } else {
        push(CHECK_PRIVACY, true, "unconstrained budget".into());
    }

    let passed = checks.iter().all(|c| c.passed);
    AuditReport { passed, checks }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: f64,
    pub variance: f64,
    pub expected_variance: f64,
    pub samples: usize,
}

/// Monte-Carlo moments of the post-processed noise `r / (|K| nu)` per coordinate.
pub fn mc_noise_stats(
    nu: f64,
    schedule_size: usize,
    noise_std: f64,
    samples: usize,
    seed: u64,
) -> Result<NoiseStats> {
    if samples < 10_000 {
        return Err(Error::Domain(format!(
            "need at least 1e4 samples, got {samples}"
        )));
    }
    if schedule_size == 0 || !(nu > 0.0) {
        return Err(Error::Domain("need |K| >= 1 and nu > 0".into()));
    }
    let scale = schedule_size as f64 * nu;
    let expected_variance = (noise_std / scale).powi(2);
    if noise_std == 0.0 {
        return Ok(NoiseStats {
            mean: 0.0,
            variance: 0.0,
            expected_variance,
            samples,
        });
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let x = normal.sample(&mut rng) / scale;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(NoiseStats {
        mean,
        variance: m2 / (samples - 1) as f64,
        expected_variance,
        samples,
    })
}

/// A randomized set/alignment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInstance {
    pub fleet: Vec<DeviceProfile>,
    pub params: SystemParams,
    pub rounds: u64,
    pub heterogeneous: bool,
}

/// Draws an instance with `|h|` log-uniform in `[0.05, 2]`, peak powers equal
/// or uniform in `[0.5, 2]` W, and a random privacy cap.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    heterogeneous: bool,
) -> RandomInstance {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
    let common = if rng.random_bool(0.5) {
        1.0
    } else {
        rng.random_range(0.5..2.0)
    };
    let fleet: Vec<DeviceProfile> = (0..n as u32)
        .map(|id| {
            let p = if heterogeneous {
                rng.random_range(0.5..2.0)
            } else {
                common
            };
            DeviceProfile::new(id, log_uniform(rng, 0.05, 2.0), p)
        })
        .collect();
    let model_dim = rng.random_range(1..=50);
    let noise_std = log_uniform(rng, 0.01, 2.0);
    let delta = log_uniform(rng, 1e-6, 0.5);
    let grad_bound = log_uniform(rng, 0.1, 10.0);
    let phi = (2.0 * (1.25f64 / delta).ln()).sqrt();
    let epsilon = if rng.random_bool(0.15) {
        f64::INFINITY
    } else {
        log_uniform(rng, 0.01, 5.0) * 2.0 * phi / noise_std
    };
    let rounds = rng.random_range(1..=50);
    let sum_power = rounds as f64 * log_uniform(rng, 0.01, 50.0);
    RandomInstance {
        params: SystemParams {
            n_devices: n,
            model_dim,
            noise_std,
            epsilon,
            delta,
            sum_power,
            total_rounds: 100,
            grad_bound,
            smoothness: 1.0,
            strong_convexity: 0.5,
            learning_rate: 1.0,
            initial_gap: 1.0,
        },
        fleet,
        rounds,
        heterogeneous,
    }
}
