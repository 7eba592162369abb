//! Analog uplink: power scaling, superposition, post-processing and metering.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::system_model::{DeviceId, Fleet};

/// `phi_k = nu^2 w^2 / (|h_k|^2 P_k)`, in this exact evaluation order.
#[inline]
pub(crate) fn scaling_raw(nu: f64, grad_bound: f64, gain: f64, peak_power: f64) -> f64 {
    (nu * nu * grad_bound * grad_bound) / (gain * gain * peak_power)
}

/// Per-device power scaling that aligns every received gradient to `nu`.
pub fn power_scaling_factors(
    fleet: &Fleet,
    schedule: &[DeviceId],
    nu: f64,
    grad_bound: f64,
) -> Result<BTreeMap<DeviceId, f64>> {
    let mut out = BTreeMap::new();
    for &id in schedule {
        let d = fleet.get(id)?;
        let phi = scaling_raw(nu, grad_bound, d.channel_gain, d.peak_power);
        if !(phi > 0.0 && phi <= 1.0) {
            return Err(Error::PeakPowerViolation { id, phi });
        }
        out.insert(id, phi);
    }
    Ok(out)
}

/// Per-round sum power `sum_k theta^2 / |h_k|^2`, summed in ascending id order.
pub fn round_power(fleet: &Fleet, schedule: &[DeviceId], theta: f64) -> Result<f64> {
    let mut ids = schedule.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    for id in ids {
        let h = fleet.get(id)?.channel_gain;
        total += theta * theta / (h * h);
    }
    Ok(total)
}

/// Draws `dim` i.i.d. `N(0, sigma^2)` coordinates. Draws nothing when `sigma == 0`.
pub fn draw_noise<R: Rng + ?Sized>(dim: usize, noise_std: f64, rng: &mut R) -> Vec<f64> {
    if noise_std == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * noise_std
        })
        .collect()
}

fn common_dim(gradients: &BTreeMap<DeviceId, Vec<f64>>) -> Result<usize> {
    let mut it = gradients.values();
    let dim = it
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::Domain("no gradients to aggregate".into()))?;
    for g in it {
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: g.len(),
            });
        }
    }
    Ok(dim)
}

/// Aligned superposition `y = nu * sum_k g_k + r`. Returns `(y, r)`.
pub fn ota_aggregate<R: Rng + ?Sized>(
    gradients: &BTreeMap<DeviceId, Vec<f64>>,
    nu: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = common_dim(gradients)?;
    let mut sum = vec![0.0; dim];
    for g in gradients.values() {
        sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    let noise = draw_noise(dim, noise_std, rng);
    let received = sum.iter().zip(&noise).map(|(s, r)| nu * s + r).collect();
    Ok((received, noise))
}

/// Physical superposition: each device transmits `sqrt(phi_k P_k) / w * g_k`
/// through gain `|h_k|`, and `noise` is added at the receiver.
pub fn superpose(
    fleet: &Fleet,
    gradients: &BTreeMap<DeviceId, Vec<f64>>,
    power_scalings: &BTreeMap<DeviceId, f64>,
    grad_bound: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let dim = common_dim(gradients)?;
    if noise.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: noise.len(),
        });
    }
    let mut y = noise.to_vec();
    for (&id, g) in gradients {
        let coeff = amplitude(fleet, power_scalings, id, grad_bound)?;
        y.iter_mut().zip(g).for_each(|(acc, x)| *acc += coeff * x);
    }
    Ok(y)
}

fn amplitude(
    fleet: &Fleet,
    power_scalings: &BTreeMap<DeviceId, f64>,
    id: DeviceId,
    grad_bound: f64,
) -> Result<f64> {
    let d = fleet.get(id)?;
    let phi = *power_scalings.get(&id).ok_or(Error::UnknownDevice(id))?;
    Ok(d.channel_gain * (phi * d.peak_power).sqrt() / grad_bound)
}

/// `y / (|K| nu)`.
pub fn postprocess(received: &[f64], schedule_size: usize, nu: f64) -> Result<Vec<f64>> {
    if schedule_size == 0 || !(nu > 0.0) {
        return Err(Error::Domain(format!(
            "postprocess needs |K| >= 1 and nu > 0 (got {schedule_size}, {nu})"
        )));
    }
    let s = schedule_size as f64 * nu;
    Ok(received.iter().map(|y| y / s).collect())
}

/// Splits the aggregation error into fading and noise parts.
///
/// fading = `(1/|K|) sum_k (|h_k| sqrt(phi_k P_k) / (nu w) - 1) g_k`,
/// noise = `r / (|K| nu)`.
pub fn error_decomposition(
    fleet: &Fleet,
    gradients: &BTreeMap<DeviceId, Vec<f64>>,
    power_scalings: &BTreeMap<DeviceId, f64>,
    nu: f64,
    grad_bound: f64,
    noise_drawn: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = common_dim(gradients)?;
    let k = gradients.len() as f64;
    let mut fading = vec![0.0; dim];
    for (&id, g) in gradients {
        let coeff = amplitude(fleet, power_scalings, id, grad_bound)? / nu - 1.0;
        fading.iter_mut().zip(g).for_each(|(f, x)| *f += coeff * x);
    }
    fading.iter_mut().for_each(|f| *f /= k);
    let noise_error = postprocess(noise_drawn, gradients.len(), nu)?;
    Ok((fading, noise_error))
}

/// Everything observed during one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationRoundRecord {
    pub raw_gradients: BTreeMap<DeviceId, Vec<f64>>,
    pub received: Vec<f64>,
    pub estimate: Vec<f64>,
    pub fading_error: Vec<f64>,
    pub noise_error: Vec<f64>,
    /// `phi_k P_k` per device, in watts.
    pub power_spent: BTreeMap<DeviceId, f64>,
}

impl AggregationRoundRecord {
    pub fn true_mean(&self) -> Vec<f64> {
        let k = self.raw_gradients.len() as f64;
        let dim = self.received.len();
        let mut m = vec![0.0; dim];
        for g in self.raw_gradients.values() {
            m.iter_mut().zip(g).for_each(|(a, x)| *a += x);
        }
        m.iter_mut().for_each(|a| *a /= k);
        m
    }
}

/// Runs one full uplink with the physical channel model.
pub fn aggregate_round<R: Rng + ?Sized>(
    fleet: &Fleet,
    gradients: BTreeMap<DeviceId, Vec<f64>>,
    power_scalings: &BTreeMap<DeviceId, f64>,
    nu: f64,
    grad_bound: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<AggregationRoundRecord> {
    let dim = common_dim(&gradients)?;
    let noise = draw_noise(dim, noise_std, rng);
    let received = superpose(fleet, &gradients, power_scalings, grad_bound, &noise)?;
    let estimate = postprocess(&received, gradients.len(), nu)?;
    let (fading_error, noise_error) =
        error_decomposition(fleet, &gradients, power_scalings, nu, grad_bound, &noise)?;
    let mut power_spent = BTreeMap::new();
    for &id in gradients.keys() {
        let d = fleet.get(id)?;
        power_spent.insert(id, power_scalings[&id] * d.peak_power);
    }
    Ok(AggregationRoundRecord {
        raw_gradients: gradients,
        received,
        estimate,
        fading_error,
        noise_error,
        power_spent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system_model::DeviceProfile;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fleet() -> Fleet {
        Fleet::new(vec![
            DeviceProfile::new(1, 0.1, 1.0),
            DeviceProfile::new(2, 0.5, 1.0),
            DeviceProfile::new(3, 1.0, 1.0),
        ])
        .unwrap()
    }

    fn grads(pairs: &[(u32, Vec<f64>)]) -> BTreeMap<DeviceId, Vec<f64>> {
        pairs
            .iter()
            .map(|(i, g)| (DeviceId(*i), g.clone()))
            .collect()
    }

    #[test]
    fn scaling_examples() {
        let f = fleet();
        let phi = power_scaling_factors(&f, &[DeviceId(2), DeviceId(3)], 0.5, 1.0).unwrap();
        assert_eq!(phi[&DeviceId(2)], 1.0);
        assert_eq!(phi[&DeviceId(3)], 0.25);
        let err = power_scaling_factors(&f, &[DeviceId(1), DeviceId(2)], 0.5, 1.0).unwrap_err();
        assert!(matches!(
            err,
            Error::PeakPowerViolation {
                id: DeviceId(1),
                ..
            }
        ));
        let phi = power_scaling_factors(&f, &[DeviceId(1)], 0.1, 1.0).unwrap();
        assert_relative_eq!(phi[&DeviceId(1)], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn round_power_examples() {
        let f = fleet();
        assert_eq!(
            round_power(&f, &[DeviceId(3), DeviceId(2)], 0.5).unwrap(),
            1.25
        );
        assert_eq!(round_power(&f, &[DeviceId(2)], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn noiseless_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grads(&[(3, vec![1.0, -2.0])]);
        let (y, r) = ota_aggregate(&g, 2.0, 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![2.0, -4.0]);
        assert_eq!(r, vec![0.0, 0.0]);
        let g = grads(&[(2, vec![1.0, 0.0]), (3, vec![0.0, 1.0])]);
        let (y, _) = ota_aggregate(&g, 0.37, 0.0, &mut rng).unwrap();
        let est = postprocess(&y, 2, 0.37).unwrap();
        assert_relative_eq!(est[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(est[1], 0.5, max_relative = 1e-15);
        assert_eq!(postprocess(&[1.5, 2.5], 1, 1.0).unwrap(), vec![1.5, 2.5]);
    }

    #[test]
    fn dimension_mismatch_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grads(&[(2, vec![1.0, 0.0]), (3, vec![0.0])]);
        assert!(matches!(
            ota_aggregate(&g, 1.0, 0.0, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn aligned_round_has_no_fading_error() {
        let f = fleet();
        let ids = [DeviceId(2), DeviceId(3)];
        let phi = power_scaling_factors(&f, &ids, 0.5, 1.0).unwrap();
        let g = grads(&[(2, vec![0.6, -0.2]), (3, vec![0.1, 0.9])]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rec = aggregate_round(&f, g, &phi, 0.5, 1.0, 0.0, &mut rng).unwrap();
        assert!(rec.fading_error.iter().all(|x| x.abs() < 1e-15));
        let mean = rec.true_mean();
        for (e, m) in rec.estimate.iter().zip(&mean) {
            assert_relative_eq!(*e, *m, max_relative = 1e-14);
        }
        let total: f64 = rec.power_spent.values().sum();
        assert_relative_eq!(total, 1.25, max_relative = 1e-15);
    }

    #[test]
    fn misscaled_fading_coefficient() {
        let f = fleet();
        let ids = [DeviceId(2), DeviceId(3)];
        let mut phi = power_scaling_factors(&f, &ids, 0.5, 1.0).unwrap();
        phi.values_mut().for_each(|p| *p /= 2.0);
        let g = grads(&[(2, vec![1.0, 0.0]), (3, vec![0.0, 2.0])]);
        let (fading, noise) = error_decomposition(&f, &g, &phi, 0.5, 1.0, &[0.0, 0.0]).unwrap();
        let c = 0.5f64.sqrt() - 1.0;
        assert_relative_eq!(fading[0], c * 1.0 / 2.0, max_relative = 1e-14);
        assert_relative_eq!(fading[1], c * 2.0 / 2.0, max_relative = 1e-14);
        assert_eq!(noise, vec![0.0, 0.0]);
        let y = superpose(&f, &g, &phi, 1.0, &[0.0, 0.0]).unwrap();
        let est = postprocess(&y, 2, 0.5).unwrap();
        assert_relative_eq!(est[0] - 0.5, fading[0], max_relative = 1e-12);
        assert_relative_eq!(est[1] - 1.0, fading[1], max_relative = 1e-12);
    }
}
