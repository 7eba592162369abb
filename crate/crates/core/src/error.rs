use thiserror::Error;

use crate::system_model::DeviceId;

/// Errors produced by the scheduler, accounting and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("device fleet is empty")]
    EmptyFleet,

    #[error("invalid device record {record} (id {id}): {reason}")]
    InvalidDevice {
        record: usize,
        id: DeviceId,
        reason: String,
    },

    #[error("duplicate device id {0}")]
    DuplicateDevice(DeviceId),

    #[error("unknown device id {0}")]
    UnknownDevice(DeviceId),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("equal-power mode requires identical peak powers across the fleet")]
    MixedPeakPower,

    #[error("no feasible schedule: every candidate pair has an empty device set")]
    NoFeasibleSchedule,

    #[error("no feasible number of rounds: power budget admits {power_cap:.6} rounds (< 1)")]
    NoFeasibleRounds { power_cap: f64 },

    #[error("strong convexity is zero; {0}")]
    ConvexityRequired(&'static str),

    #[error("peak power violated by device {id}: power scaling factor {phi} > 1")]
    PeakPowerViolation { id: DeviceId, phi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical failure in round {round}: {detail}")]
    NumericalFailure { round: usize, detail: String },

    #[error("brute-force oracle refused fleet of {n} devices (limit {limit})")]
    OracleGuard { n: usize, limit: usize },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
