//! Devices, channel state and scalar system constants.
//!
//! Channels are static magnitudes `|h_k|` with the phase assumed perfectly
//! corrected at the transmitter, so only the gain enters the model.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One participant of the federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: DeviceId,
    /// Channel gain magnitude `|h_k|`.
    pub channel_gain: f64,
    /// Peak transmit power `P_k` in watts.
    pub peak_power: f64,
    /// Index of the local data partition held by this device.
    pub dataset: usize,
}

impl DeviceProfile {
    pub fn new(id: u32, channel_gain: f64, peak_power: f64) -> Self {
        Self {
            id: DeviceId(id),
            channel_gain,
            peak_power,
            dataset: id as usize,
        }
    }

    pub fn with_dataset(mut self, dataset: usize) -> Self {
        self.dataset = dataset;
        self
    }

    /// Largest alignment factor this device can support at full power, `|h_k| sqrt(P_k)`.
    pub fn amplitude_limit(&self) -> f64 {
        self.channel_gain * self.peak_power.sqrt()
    }
}

fn compare_devices(a: &DeviceProfile, b: &DeviceProfile) -> Ordering {
    a.channel_gain
        .total_cmp(&b.channel_gain)
        .then_with(|| a.id.cmp(&b.id))
}

/// Orders devices by ascending channel gain, breaking ties by ascending id.
pub fn sort_devices(mut devices: Vec<DeviceProfile>) -> Result<Vec<DeviceProfile>> {
    if devices.is_empty() {
        return Err(Error::EmptyFleet);
    }
    for (record, d) in devices.iter().enumerate() {
        if !(d.channel_gain > 0.0) || !d.channel_gain.is_finite() {
            return Err(Error::InvalidDevice {
                record,
                id: d.id,
                reason: format!(
                    "channel_gain must be positive and finite, got {}",
                    d.channel_gain
                ),
            });
        }
    }
    devices.sort_by(compare_devices);
    Ok(devices)
}

/// A validated fleet, stored in canonical (ascending gain) order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Fleet {
    devices: Vec<DeviceProfile>,
}

#[derive(Deserialize)]
struct DeviceRecord {
    id: u32,
    channel_gain: f64,
    #[serde(default = "default_peak_power")]
    peak_power: f64,
    #[serde(default)]
    dataset: Option<usize>,
}

/// Default per-device peak power in watts.
pub fn default_peak_power() -> f64 {
    1.0
}

impl Fleet {
    pub fn new(devices: Vec<DeviceProfile>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (record, d) in devices.iter().enumerate() {
            if !(d.peak_power > 0.0) || !d.peak_power.is_finite() {
                return Err(Error::InvalidDevice {
                    record,
                    id: d.id,
                    reason: format!(
                        "peak_power must be positive and finite, got {}",
                        d.peak_power
                    ),
                });
            }
            if !seen.insert(d.id) {
                return Err(Error::DuplicateDevice(d.id));
            }
        }
        Ok(Self {
            devices: sort_devices(devices)?,
        })
    }

    /// Parses a JSON array of `{id, channel_gain, peak_power}` records.
    ///
    /// `peak_power` defaults to 1 W and `dataset` to the record position.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let records: Vec<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_json_values(&records)
    }

    pub fn from_json_values(records: &[serde_json::Value]) -> Result<Self> {
        let mut devices = Vec::with_capacity(records.len());
        for (i, value) in records.iter().enumerate() {
            let rec: DeviceRecord = serde_json::from_value(value.clone())
                .map_err(|e| Error::Parse(format!("fleet record {i}: {e}")))?;
            devices.push(DeviceProfile {
                id: DeviceId(rec.id),
                channel_gain: rec.channel_gain,
                peak_power: rec.peak_power,
                dataset: rec.dataset.unwrap_or(i),
            });
        }
        Self::new(devices)
    }

    pub fn devices(&self) -> &[DeviceProfile] {
        &self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn ids(&self) -> Vec<DeviceId> {
        self.devices.iter().map(|d| d.id).collect()
    }

    pub fn position(&self, id: DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }

    pub fn get(&self, id: DeviceId) -> Result<&DeviceProfile> {
        self.devices
            .iter()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDevice(id))
    }

    /// Resolves ids to canonical positions, sorted ascending and deduplicated.
    pub fn positions_of(&self, ids: &[DeviceId]) -> Result<Vec<usize>> {
        let mut out = ids
            .iter()
            .map(|&id| self.position(id).ok_or(Error::UnknownDevice(id)))
            .collect::<Result<Vec<_>>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn ids_at(&self, positions: &[usize]) -> Vec<DeviceId> {
        let mut ids: Vec<DeviceId> = positions.iter().map(|&p| self.devices[p].id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn power_mode(&self) -> PowerMode {
        let p0 = self.devices[0].peak_power;
        if self.devices.iter().all(|d| d.peak_power == p0) {
            PowerMode::Equal
        } else {
            PowerMode::Heterogeneous
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMode {
    /// Every device has the same peak power.
    Equal,
    /// Per-device peak powers; `c` is re-sorted independently of `|h|`.
    Heterogeneous,
}

/// Scalar constants of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub n_devices: usize,
    pub model_dim: usize,
    /// Per-coordinate channel noise standard deviation.
    pub noise_std: f64,
    /// Per-round privacy budget; `null` in JSON means unconstrained.
    #[serde(with = "crate::serde_inf")]
    pub epsilon: f64,
    pub delta: f64,
    pub sum_power: f64,
    pub total_rounds: u64,
    pub grad_bound: f64,
    pub smoothness: f64,
    /// Zero selects the non-convex analysis.
    pub strong_convexity: f64,
    pub learning_rate: f64,
    pub initial_gap: f64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, reason: impl Into<String>) -> Error {
            Error::InvalidParam {
                field: field.to_string(),
                reason: reason.into(),
            }
        }
        if self.n_devices == 0 {
            return Err(bad("n_devices", "must be at least 1"));
        }
        if self.model_dim == 0 {
            return Err(bad("model_dim", "must be at least 1"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(bad("noise_std", "must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(bad("epsilon", "must be positive"));
        }
        if self.noise_std == 0.0 && self.epsilon.is_finite() {
            return Err(bad(
                "epsilon",
                "a noiseless channel gives no privacy; use an unconstrained (null) budget",
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(bad("delta", "must lie in (0, 1)"));
        }
        if !(self.sum_power > 0.0) || !self.sum_power.is_finite() {
            return Err(bad("sum_power", "must be positive and finite"));
        }
        if self.total_rounds == 0 {
            return Err(bad("total_rounds", "must be at least 1"));
        }
        if !(self.grad_bound > 0.0) || !self.grad_bound.is_finite() {
            return Err(bad("grad_bound", "must be positive and finite"));
        }
        if !(self.smoothness > 0.0) || !self.smoothness.is_finite() {
            return Err(bad("smoothness", "must be positive and finite"));
        }
        if !(self.strong_convexity >= 0.0) || self.strong_convexity > self.smoothness {
            return Err(bad(
                "strong_convexity",
                format!("must lie in [0, smoothness = {}]", self.smoothness),
            ));
        }
        if !(self.learning_rate > 0.0) || self.learning_rate > 1.0 / self.smoothness {
            return Err(bad(
                "learning_rate",
                format!("must lie in (0, 1/smoothness = {}]", 1.0 / self.smoothness),
            ));
        }
        if !(self.initial_gap >= 0.0) || !self.initial_gap.is_finite() {
            return Err(bad("initial_gap", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// `1 - strong_convexity / smoothness`, in `[0, 1)` for convex instances.
    pub fn convergence_coeff(&self) -> f64 {
        1.0 - self.strong_convexity / self.smoothness
    }

    pub fn is_convex(&self) -> bool {
        self.strong_convexity > 0.0
    }
}

/// The `c` and `q` vectors bounding the alignment factor of top-k schedules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelVectors {
    pub mode: PowerMode,
    /// Ascending. In heterogeneous mode this is `c` re-sorted.
    pub c: Vec<f64>,
    /// Ascending; depends on `rounds`.
    pub q: Vec<f64>,
    /// `c` in canonical (gain) order, before any re-sorting.
    pub c_by_position: Vec<f64>,
    /// For each rank of `c`, the canonical position of the device.
    pub c_rank_to_position: Vec<usize>,
    /// The number of rounds baked into `q`.
    pub rounds: u64,
}

/// `sqrt(P_tot / I) / sqrt(sum 1/|h|^2)` over the given canonical positions,
/// summed in ascending position order.
pub(crate) fn power_limited_theta(
    fleet: &Fleet,
    positions: &[usize],
    sum_power: f64,
    rounds: u64,
) -> f64 {
    let inv_sq: f64 = positions
        .iter()
        .map(|&p| {
            let h = fleet.devices[p].channel_gain;
            1.0 / (h * h)
        })
        .sum();
    (sum_power / rounds as f64).sqrt() / inv_sq.sqrt()
}

pub fn compute_channel_vectors(
    fleet: &Fleet,
    sum_power: f64,
    rounds: u64,
    mode: PowerMode,
) -> Result<ChannelVectors> {
    if rounds == 0 {
        return Err(Error::Domain("rounds must be at least 1".into()));
    }
    if mode == PowerMode::Equal && fleet.power_mode() != PowerMode::Equal {
        return Err(Error::MixedPeakPower);
    }
    let n = fleet.len();
    let c_by_position: Vec<f64> = fleet
        .devices
        .iter()
        .map(DeviceProfile::amplitude_limit)
        .collect();
    let q: Vec<f64> = (0..n)
        .map(|m| {
            let suffix: Vec<usize> = (m..n).collect();
            power_limited_theta(fleet, &suffix, sum_power, rounds)
        })
        .collect();
    let mut c_rank_to_position: Vec<usize> = (0..n).collect();
    if mode == PowerMode::Heterogeneous {
        c_rank_to_position.sort_by(|&a, &b| {
            c_by_position[a]
                .total_cmp(&c_by_position[b])
                .then(a.cmp(&b))
        });
    }
    let c = c_rank_to_position
        .iter()
        .map(|&p| c_by_position[p])
        .collect();
    Ok(ChannelVectors {
        mode,
        c,
        q,
        c_by_position,
        c_rank_to_position,
        rounds,
    })
}

/// Largest alignment factor admissible for an arbitrary subset:
/// `min{cap, min_k |h_k| sqrt(P_k), sqrt(P_tot/I) / sqrt(sum_k 1/|h_k|^2)}`.
pub fn theta_max(
    fleet: &Fleet,
    subset: &[DeviceId],
    cap: f64,
    sum_power: f64,
    rounds: u64,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Domain("theta_max of an empty schedule".into()));
    }
    if rounds == 0 {
        return Err(Error::Domain("rounds must be at least 1".into()));
    }
    let positions = fleet.positions_of(subset)?;
    Ok(theta_max_at(fleet, &positions, cap, sum_power, rounds))
}

pub(crate) fn theta_max_at(
    fleet: &Fleet,
    positions: &[usize],
    cap: f64,
    sum_power: f64,
    rounds: u64,
) -> f64 {
    let c_min = positions
        .iter()
        .map(|&p| fleet.devices[p].amplitude_limit())
        .fold(f64::INFINITY, f64::min);
    cap.min(c_min)
        .min(power_limited_theta(fleet, positions, sum_power, rounds))
}
