//! `ota-fedavg`: plan, simulate, bound and audit private over-the-air FedAvg runs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ota_fedavg::bounds::{BoundKind, BoundReport};
use ota_fedavg::config::{Experiment, ExperimentConfig};
use ota_fedavg::fedavg_sim::{run_simulation, write_csv};
use ota_fedavg::oracle::{
    brute_force_p2, random_instance, verify_plan, AuditReport, BRUTE_FORCE_LIMIT,
};
use ota_fedavg::privacy::{alignment_cap, per_round_epsilon, PrivacyBudget};
use ota_fedavg::scheduler::{solve_p2, SchedulePlan};
use ota_fedavg::system_model::{DeviceId, Fleet, SystemParams};

const SEED_ENV: &str = "OTA_FEDAVG_SEED";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] ota_fedavg::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use ota_fedavg::Error as E;
        match self {
            CliError::Io { .. } => 1,
            CliError::Invalid(_) => 2,
            CliError::Mismatch(_) => 4,
            CliError::Core(e) => match e {
                E::NoFeasibleSchedule | E::NoFeasibleRounds { .. } => 3,
                E::PeakPowerViolation { .. } => 4,
                E::NumericalFailure { .. } => 5,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ota-fedavg",
    version,
    about = "Differentially private over-the-air FedAvg planner and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Choose the scheduled set, alignment factor and round count.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        /// Plan output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train under a plan over the simulated noisy channel.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Channel-noise seed; OTA_FEDAVG_SEED takes precedence, then this flag, then the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Evaluate the privacy level and convergence bounds of a plan.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a plan and/or compare the scheduler against exhaustive search.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires = "config")]
        plan: Option<PathBuf>,
        /// Random instances to cross-check (default 200 without a config, 0 with one).
        #[arg(long)]
        instances: Option<usize>,
        /// Largest random fleet size.
        #[arg(long, default_value_t = 12)]
        max_devices: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturbs the scheduler's answer to exercise mismatch reporting.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            }),
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    emit(out, text.as_bytes())
}

fn load_experiment(path: &Path) -> CliResult<Experiment> {
    let text = read(path)?;
    let cfg = ExperimentConfig::from_json_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(cfg.resolve(base)?)
}

fn load_plan(path: &Path) -> CliResult<SchedulePlan> {
    let text = read(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("plan {}: {e}", path.display())))
}

/// Environment over flag over config.
fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(config)),
    }
}

fn audit_or_fail(plan: &SchedulePlan, exp: &Experiment) -> CliResult<AuditReport> {
    let report = verify_plan(plan, &exp.fleet, &exp.params);
    if !report.passed {
        let text = serde_json::to_string_pretty(&report).unwrap_or_default();
        eprintln!("{text}");
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        return Err(CliError::Mismatch(format!(
            "plan audit failed: {}",
            names.join(", ")
        )));
    }
    Ok(report)
}

fn schedule(config: &Path, out: Option<&Path>) -> CliResult<()> {
    let exp = load_experiment(config)?;
    let plan = exp.plan()?;
    if !plan.converged {
        warn!(
            "alternation stopped after {} iterations without converging",
            plan.iterations
        );
    }
    info!(
        "|K|={} theta={} I={} E={} objective={}",
        plan.schedule.len(),
        plan.theta,
        plan.rounds,
        plan.local_steps,
        plan.predicted_objective
    );
    emit_json(out, &plan)
}

fn simulate(
    config: &Path,
    plan: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    format: Format,
) -> CliResult<()> {
    let exp = load_experiment(config)?;
    let plan = load_plan(plan)?;
    audit_or_fail(&plan, &exp)?;
    let model = exp
        .model
        .as_ref()
        .ok_or_else(|| CliError::Invalid("config has no `model` section to simulate".into()))?;
    let seed = resolve_seed(seed, exp.solver.seed)?;
    let run = run_simulation(&plan, &exp.fleet, model, &exp.params, seed)?;
    if run.total_clips > 0 {
        warn!(
            "{} uploads were clipped; the bounds assume clipping is inactive",
            run.total_clips
        );
    }
    match format {
        Format::Json => emit_json(out, &run),
        Format::Csv => {
            let mut buf = Vec::new();
            write_csv(&run.metrics, &mut buf)?;
            emit(out, &buf)
        }
    }
}

#[derive(Serialize)]
struct Unavailable {
    bound_kind: BoundKind,
    reason: String,
}

#[derive(Serialize)]
struct BoundsOutput {
    /// `null` when the channel is noise-free.
    epsilon_per_round: Option<f64>,
    delta: f64,
    rounds: u64,
    reports: Vec<BoundReport>,
    unavailable: Vec<Unavailable>,
}

fn bounds(config: &Path, plan: &Path, out: Option<&Path>) -> CliResult<()> {
    let exp = load_experiment(config)?;
    let plan = load_plan(plan)?;
    audit_or_fail(&plan, &exp)?;
    let p = &exp.params;
    let eps = per_round_epsilon(p.grad_bound, plan.nu, p.noise_std, p.delta)?;
    let k = plan.schedule.len();
    let mut reports = Vec::new();
    let mut unavailable = Vec::new();
    if p.is_convex() {
        reports.push(BoundReport::convex_gap(
            plan.rounds,
            k,
            plan.theta,
            plan.local_steps,
            p,
        )?);
        reports.push(BoundReport::noiseless_gap(p)?);
    } else {
        for kind in [BoundKind::ConvexGap, BoundKind::NoiselessGap] {
            unavailable.push(Unavailable {
                bound_kind: kind,
                reason: "strong convexity is zero".into(),
            });
        }
    }
    reports.push(BoundReport::nonconvex_avg_grad(
        plan.rounds,
        k,
        plan.theta,
        plan.local_steps,
        p,
    )?);
    emit_json(
        out,
        &BoundsOutput {
            epsilon_per_round: eps.is_finite().then_some(eps),
            delta: p.delta,
            rounds: plan.rounds,
            reports,
            unavailable,
        },
    )
}

#[derive(Serialize)]
struct Comparison {
    instance: usize,
    n_devices: usize,
    rounds: u64,
    scheduler_psi: f64,
    oracle_psi: f64,
    scheduler_schedule: Vec<DeviceId>,
    oracle_schedule: Vec<DeviceId>,
    matched: bool,
}

#[derive(Serialize)]
struct VerifyOutput {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<AuditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_instance: Option<Comparison>,
    instances: usize,
    matched: usize,
    mismatches: Vec<Comparison>,
}

const MATCH_TOL: f64 = 1e-9;

fn compare(
    instance: usize,
    fleet: &Fleet,
    params: &SystemParams,
    rounds: u64,
    fault: bool,
) -> CliResult<Comparison> {
    let budget = PrivacyBudget::new(params.epsilon, params.delta)?;
    let cap = alignment_cap(&budget, params.noise_std);
    let oracle = brute_force_p2(fleet, cap, params.sum_power, rounds, params)?;
    let s = solve_p2(
        fleet,
        cap,
        params.sum_power,
        rounds,
        fleet.power_mode(),
        params,
    )?;
    let psi = if fault { s.psi * (1.0 + 1e-6) } else { s.psi };
    let rel = (psi - oracle.psi).abs() / oracle.psi.abs().max(f64::MIN_POSITIVE);
    Ok(Comparison {
        instance,
        n_devices: fleet.len(),
        rounds,
        scheduler_psi: psi,
        oracle_psi: oracle.psi,
        scheduler_schedule: s.schedule,
        oracle_schedule: oracle.schedule,
        matched: rel <= MATCH_TOL,
    })
}

#[allow(clippy::too_many_arguments)]
fn verify(
    config: Option<&Path>,
    plan: Option<&Path>,
    instances: Option<usize>,
    max_devices: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    fault: bool,
) -> CliResult<()> {
    if max_devices > BRUTE_FORCE_LIMIT {
        return Err(ota_fedavg::Error::OracleGuard {
            n: max_devices,
            limit: BRUTE_FORCE_LIMIT,
        }
        .into());
    }
    if max_devices < 2 {
        return Err(CliError::Invalid("--max-devices must be at least 2".into()));
    }
    let exp = config.map(load_experiment).transpose()?;
    let seed = resolve_seed(seed, exp.as_ref().map_or(0, |e| e.solver.seed))?;
    let mut report = VerifyOutput {
        seed,
        audit: None,
        config_instance: None,
        instances: 0,
        matched: 0,
        mismatches: Vec::new(),
    };
    let mut failed = Vec::new();

    if let Some(exp) = &exp {
        let rounds = match plan {
            Some(path) => {
                let plan = load_plan(path)?;
                let audit = verify_plan(&plan, &exp.fleet, &exp.params);
                if !audit.passed {
                    failed.push("plan audit".to_string());
                }
                report.audit = Some(audit);
                plan.rounds
            }
            None => exp.solver.rounds.unwrap_or(exp.params.total_rounds),
        };
        let c = compare(0, &exp.fleet, &exp.params, rounds, fault)?;
        if !c.matched {
            failed.push("config instance".to_string());
        }
        report.config_instance = Some(c);
    }

    let n_instances = instances.unwrap_or(if exp.is_some() { 0 } else { 200 });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_instances {
        let n = rng.random_range(2..=max_devices);
        let inst = random_instance(&mut rng, n, i % 2 == 1);
        let fleet = Fleet::new(inst.fleet)?;
        let c = compare(i + 1, &fleet, &inst.params, inst.rounds, fault && i == 0)?;
        report.instances += 1;
        if c.matched {
            report.matched += 1;
        } else {
            report.mismatches.push(c);
        }
    }
    if !report.mismatches.is_empty() {
        failed.push(format!("{} random instances", report.mismatches.len()));
    }
    emit_json(out, &report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!(
            "verification failed: {}",
            failed.join("; ")
        )))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Schedule { config, out } => schedule(&config, out.as_deref()),
        Command::Simulate {
            config,
            plan,
            seed,
            out,
            format,
        } => simulate(&config, &plan, seed, out.as_deref(), format),
        Command::Bounds { config, plan, out } => bounds(&config, &plan, out.as_deref()),
        Command::Verify {
            config,
            plan,
            instances,
            max_devices,
            seed,
            out,
            inject_fault,
        } => verify(
            config.as_deref(),
            plan.as_deref(),
            instances,
            max_devices,
            seed,
            out.as_deref(),
            inject_fault,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
