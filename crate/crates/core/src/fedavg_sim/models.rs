//! Synthetic federated objectives with known curvature constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite-sum objective `L(m) = (1/N) sum_k L_k(m)` over `N` local datasets.
pub trait FederatedObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn n_devices(&self) -> usize;
    fn local_loss(&self, k: usize, m: &[f64]) -> f64;
    fn local_gradient(&self, k: usize, m: &[f64]) -> Vec<f64>;
    /// Smoothness constant valid for every local and the global objective.
    fn smoothness(&self) -> f64;
    /// Strong convexity constant of the global objective (zero if none).
    fn strong_convexity(&self) -> f64;
    /// Minimiser and minimum, when known.
    fn optimum(&self) -> Option<(Vec<f64>, f64)>;

    fn loss(&self, m: &[f64]) -> f64 {
        let n = self.n_devices();
        (0..n).map(|k| self.local_loss(k, m)).sum::<f64>() / n as f64
    }

    fn gradient(&self, m: &[f64]) -> Vec<f64> {
        let n = self.n_devices();
        let mut g = vec![0.0; self.dim()];
        for k in 0..n {
            for (a, x) in g.iter_mut().zip(self.local_gradient(k, m)) {
                *a += x;
            }
        }
        g.iter_mut().for_each(|a| *a /= n as f64);
        g
    }

    fn initial_model(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// `L(m0) - L*`, or `L(m0)` when the minimum is unknown and the loss is non-negative.
    fn initial_gap(&self) -> f64 {
        let l0 = self.loss(&self.initial_model());
        match self.optimum() {
            Some((_, v)) => l0 - v,
            None => l0,
        }
    }
}

/// `L_k(m) = 1/2 (m - a_k)^T A (m - a_k)` with a shared positive-definite `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    hessian: DMatrix<f64>,
    centers: Vec<DVector<f64>>,
    eig_min: f64,
    eig_max: f64,
    mean_center: DVector<f64>,
}

impl QuadraticModel {
    pub fn new(hessian: DMatrix<f64>, centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = hessian.nrows();
        if d == 0 || hessian.ncols() != d {
            return Err(Error::Domain(
                "hessian must be a nonempty square matrix".into(),
            ));
        }
        if centers.is_empty() {
            return Err(Error::EmptyFleet);
        }
        if (&hessian - hessian.transpose()).amax() > 1e-12 * hessian.amax().max(1.0) {
            return Err(Error::Domain("hessian must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
        let eig_min = eig.min();
        let eig_max = eig.max();
        if !(eig_min > 0.0) {
            return Err(Error::Domain(format!(
                "hessian must be positive definite (smallest eigenvalue {eig_min})"
            )));
        }
        let centers: Vec<DVector<f64>> = centers
            .into_iter()
            .map(|c| {
                if c.len() == d {
                    Ok(DVector::from_vec(c))
                } else {
                    Err(Error::DimensionMismatch {
                        expected: d,
                        got: c.len(),
                    })
                }
            })
            .collect::<Result<_>>()?;
        let mut mean_center = DVector::zeros(d);
        for c in &centers {
            mean_center += c;
        }
        mean_center /= centers.len() as f64;
        Ok(Self {
            hessian,
            centers,
            eig_min,
            eig_max,
            mean_center,
        })
    }

    pub fn identity(centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = centers.first().map_or(0, Vec::len);
        Self::new(DMatrix::identity(d, d), centers)
    }

    /// `1/2 abar^T A abar`, the gap at the zero initial model.
    pub fn closed_form_initial_gap(&self) -> f64 {
        0.5 * self.mean_center.dot(&(&self.hessian * &self.mean_center))
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        self.centers.iter().map(|c| c.as_slice().to_vec()).collect()
    }
}

impl FederatedObjective for QuadraticModel {
    fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    fn n_devices(&self) -> usize {
        self.centers.len()
    }

    fn local_loss(&self, k: usize, m: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(m) - &self.centers[k];
        0.5 * diff.dot(&(&self.hessian * &diff))
    }

    fn local_gradient(&self, k: usize, m: &[f64]) -> Vec<f64> {
        let diff = DVector::from_column_slice(m) - &self.centers[k];
        (&self.hessian * diff).as_slice().to_vec()
    }

    fn smoothness(&self) -> f64 {
        self.eig_max
    }

    fn strong_convexity(&self) -> f64 {
        self.eig_min
    }

    fn optimum(&self) -> Option<(Vec<f64>, f64)> {
        let m = self.mean_center.as_slice().to_vec();
        let v = self.loss(&m);
        Some((m, v))
    }
}

/// One labelled sample, label in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// `L_k(m) = (1/n) sum log(1 + exp(-y x^T m)) + (lambda/2) ||m||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    dim: usize,
    datasets: Vec<Vec<Sample>>,
    regularization: f64,
    smoothness: f64,
    optimum: Option<(Vec<f64>, f64)>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Tolerance on the gradient norm when locating the regularized minimum.
const OPTIMUM_TOL: f64 = 1e-10;

impl LogisticModel {
    pub fn new(datasets: Vec<Vec<Sample>>, regularization: f64) -> Result<Self> {
        let dim = datasets
            .first()
            .and_then(|d| d.first())
            .map(|s| s.x.len())
            .ok_or(Error::EmptyFleet)?;
        if dim == 0 {
            return Err(Error::Domain("feature dimension must be at least 1".into()));
        }
        if !(regularization >= 0.0) {
            return Err(Error::Domain("regularization must be non-negative".into()));
        }
        let mut smoothness: f64 = 0.0;
        for data in &datasets {
            if data.is_empty() {
                return Err(Error::Domain("every local dataset needs a sample".into()));
            }
            let mut gram = DMatrix::<f64>::zeros(dim, dim);
            for s in data {
                if s.x.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: s.x.len(),
                    });
                }
                let x = DVector::from_column_slice(&s.x);
                gram += &x * x.transpose();
            }
            let top = SymmetricEigen::new(gram).eigenvalues.max();
            smoothness = smoothness.max(top / (4.0 * data.len() as f64));
        }
        let mut model = Self {
            dim,
            datasets,
            regularization,
            smoothness: smoothness + regularization,
            optimum: None,
        };
        if regularization > 0.0 {
            model.optimum = Some(model.minimise()?);
        }
        Ok(model)
    }

    fn minimise(&self) -> Result<(Vec<f64>, f64)> {
        let step = 1.0 / self.smoothness;
        let mut m = vec![0.0; self.dim];
        for _ in 0..1_000_000 {
            let g = self.gradient(&m);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= OPTIMUM_TOL {
                let v = self.loss(&m);
                return Ok((m, v));
            }
            m.iter_mut().zip(&g).for_each(|(a, x)| *a -= step * x);
        }
        Err(Error::NumericalFailure {
            round: 0,
            detail: "logistic minimum did not converge".into(),
        })
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn datasets(&self) -> &[Vec<Sample>] {
        &self.datasets
    }

    /// Gradient of the average loss over an arbitrary sample list.
    pub fn batch_gradient(&self, samples: &[Sample], m: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = m.iter().map(|w| self.regularization * w).collect();
        let n = samples.len() as f64;
        for s in samples {
            let margin = s.y * dot(&s.x, m);
            let coeff = -s.y * sigmoid(-margin) / n;
            g.iter_mut().zip(&s.x).for_each(|(a, x)| *a += coeff * x);
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FederatedObjective for LogisticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_devices(&self) -> usize {
        self.datasets.len()
    }

    fn local_loss(&self, k: usize, m: &[f64]) -> f64 {
        let data = &self.datasets[k];
        let fit = data
            .iter()
            .map(|s| softplus(-s.y * dot(&s.x, m)))
            .sum::<f64>()
            / data.len() as f64;
        fit + 0.5 * self.regularization * dot(m, m)
    }

    fn local_gradient(&self, k: usize, m: &[f64]) -> Vec<f64> {
        self.batch_gradient(&self.datasets[k], m)
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn strong_convexity(&self) -> f64 {
        self.regularization
    }

    fn optimum(&self) -> Option<(Vec<f64>, f64)> {
        self.optimum.clone()
    }
}

/// Either built-in model family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Quadratic(QuadraticModel),
    Logistic(LogisticModel),
}

impl FederatedObjective for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Quadratic(m) => m.dim(),
            Model::Logistic(m) => m.dim(),
        }
    }
    fn n_devices(&self) -> usize {
        match self {
            Model::Quadratic(m) => m.n_devices(),
            Model::Logistic(m) => m.n_devices(),
        }
    }
    fn local_loss(&self, k: usize, x: &[f64]) -> f64 {
        match self {
            Model::Quadratic(m) => m.local_loss(k, x),
            Model::Logistic(m) => m.local_loss(k, x),
        }
    }
    fn local_gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Model::Quadratic(m) => m.local_gradient(k, x),
            Model::Logistic(m) => m.local_gradient(k, x),
        }
    }
    fn smoothness(&self) -> f64 {
        match self {
            Model::Quadratic(m) => m.smoothness(),
            Model::Logistic(m) => m.smoothness(),
        }
    }
    fn strong_convexity(&self) -> f64 {
        match self {
            Model::Quadratic(m) => m.strong_convexity(),
            Model::Logistic(m) => m.strong_convexity(),
        }
    }
    fn optimum(&self) -> Option<(Vec<f64>, f64)> {
        match self {
            Model::Quadratic(m) => m.optimum(),
            Model::Logistic(m) => m.optimum(),
        }
    }
    fn initial_gap(&self) -> f64 {
        match self {
            Model::Quadratic(m) => m.closed_form_initial_gap(),
            Model::Logistic(m) => m.initial_gap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Quadratic,
    Logistic,
}

/// Knobs of the synthetic fleet factory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: ModelKind,
    pub dim: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Quadratic: Hessian eigenvalues are spaced linearly in `[eig_min, eig_max]`.
    #[serde(default = "default_eig_min")]
    pub eig_min: f64,
    #[serde(default = "default_eig_max")]
    pub eig_max: f64,
    /// Logistic: l2 weight, also the strong convexity constant.
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    #[serde(default = "default_samples")]
    pub samples_per_device: usize,
}

fn default_spread() -> f64 {
    1.0
}
fn default_eig_min() -> f64 {
    1.0
}
fn default_eig_max() -> f64 {
    1.0
}
fn default_regularization() -> f64 {
    0.01
}
fn default_samples() -> usize {
    50
}

impl SyntheticSpec {
    pub fn quadratic(dim: usize, spread: f64, eig_min: f64, eig_max: f64) -> Self {
        Self {
            kind: ModelKind::Quadratic,
            dim,
            spread,
            eig_min,
            eig_max,
            regularization: default_regularization(),
            samples_per_device: default_samples(),
        }
    }

    pub fn logistic(
        dim: usize,
        spread: f64,
        regularization: f64,
        samples_per_device: usize,
    ) -> Self {
        Self {
            kind: ModelKind::Logistic,
            dim,
            spread,
            eig_min: default_eig_min(),
            eig_max: default_eig_max(),
            regularization,
            samples_per_device,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Builds `n_devices` local datasets of the requested family, deterministically from `seed`.
pub fn make_synthetic_fleet(spec: &SyntheticSpec, n_devices: usize, seed: u64) -> Result<Model> {
    if spec.dim == 0 || n_devices == 0 {
        return Err(Error::Domain("dim and n_devices must be at least 1".into()));
    }
    if !(spec.spread > 0.0) {
        return Err(Error::Domain("spread must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    match spec.kind {
        ModelKind::Quadratic => {
            if !(spec.eig_min > 0.0 && spec.eig_min <= spec.eig_max) {
                return Err(Error::Domain("need 0 < eig_min <= eig_max".into()));
            }
            let eigs: Vec<f64> = (0..d)
                .map(|i| {
                    if d == 1 {
                        spec.eig_max
                    } else {
                        spec.eig_min + (spec.eig_max - spec.eig_min) * i as f64 / (d - 1) as f64
                    }
                })
                .collect();
            let hessian = if spec.eig_min == spec.eig_max {
                DMatrix::identity(d, d) * spec.eig_min
            } else {
                let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
                let q = g.qr().q();
                let a: DMatrix<f64> =
                    q.transpose() * DMatrix::from_diagonal(&DVector::from_vec(eigs)) * &q;
                (&a + a.transpose()) * 0.5
            };
            let centers = (0..n_devices)
                .map(|_| {
                    let v = gaussian_vec(&mut rng, d);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let r = spec.spread * rng.random::<f64>();
                    v.iter().map(|x| x / norm * r).collect()
                })
                .collect();
            Ok(Model::Quadratic(QuadraticModel::new(hessian, centers)?))
        }
        ModelKind::Logistic => {
            if spec.samples_per_device == 0 {
                return Err(Error::Domain(
                    "samples_per_device must be at least 1".into(),
                ));
            }
            let dir = gaussian_vec(&mut rng, d);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mu: Vec<f64> = dir.iter().map(|x| x / norm * spec.spread).collect();
            let datasets = (0..n_devices)
                .map(|_| {
                    (0..spec.samples_per_device)
                        .map(|_| {
                            let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            let noise = gaussian_vec(&mut rng, d);
                            let x = mu.iter().zip(noise).map(|(m, z)| y * m + z).collect();
                            Sample { x, y }
                        })
                        .collect()
                })
                .collect();
            Ok(Model::Logistic(LogisticModel::new(
                datasets,
                spec.regularization,
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, m: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..m.len())
            .map(|i| {
                let mut a = m.to_vec();
                let mut b = m.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn identity_quadratic() {
        let q = QuadraticModel::identity(vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(q.smoothness(), 1.0);
        assert_eq!(q.strong_convexity(), 1.0);
        assert_eq!(q.optimum().unwrap().0, vec![1.0, 0.0]);
        assert_eq!(q.gradient(&[0.0, 0.0]), vec![-1.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_and_gap() {
        let spec = SyntheticSpec::quadratic(6, 2.0, 0.5, 3.0);
        let Model::Quadratic(q) = make_synthetic_fleet(&spec, 5, 11).unwrap() else {
            unreachable!()
        };
        assert_relative_eq!(q.strong_convexity(), 0.5, max_relative = 1e-10);
        assert_relative_eq!(q.smoothness(), 3.0, max_relative = 1e-10);
        let m = vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.05];
        let fd = finite_diff(|x| q.local_loss(2, x), &m);
        for (a, b) in q.local_gradient(2, &m).iter().zip(&fd) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6, epsilon = 1e-9);
        }
        let avg: f64 = (0..5).map(|k| q.local_loss(k, &m)).sum::<f64>() / 5.0;
        assert_relative_eq!(q.loss(&m), avg, max_relative = 1e-12);
        let (opt, v) = q.optimum().unwrap();
        let direct = q.loss(&[0.0; 6]) - q.loss(&opt);
        assert_relative_eq!(q.closed_form_initial_gap(), direct, max_relative = 1e-12);
        assert_eq!(v, q.loss(&opt));
        assert!(q.gradient(&opt).iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_device_objectives_coincide() {
        let spec = SyntheticSpec::quadratic(3, 1.0, 1.0, 2.0);
        let m = make_synthetic_fleet(&spec, 1, 4).unwrap();
        let x = [0.1, 0.2, 0.3];
        assert_eq!(m.loss(&x), m.local_loss(0, &x));
    }

    #[test]
    fn logistic_constants() {
        let spec = SyntheticSpec::logistic(4, 1.5, 0.05, 30);
        let Model::Logistic(l) = make_synthetic_fleet(&spec, 3, 2).unwrap() else {
            unreachable!()
        };
        assert_eq!(l.strong_convexity(), 0.05);
        let m = vec![0.2, -0.3, 0.1, 0.4];
        let fd = finite_diff(|x| l.local_loss(1, x), &m);
        for (a, b) in l.local_gradient(1, &m).iter().zip(&fd) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6, epsilon = 1e-9);
        }
        let (opt, v) = l.optimum().unwrap();
        assert!(v <= l.loss(&m));
        let gn: f64 = l.gradient(&opt).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(gn <= OPTIMUM_TOL);
        // Hessian along random directions never exceeds the smoothness constant
        for dir in [[1.0, 0.0, 0.0, 0.0], [0.5, 0.5, -0.5, 0.5]] {
            let h = 1e-4;
            let p: Vec<f64> = m.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let q: Vec<f64> = m.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let curv = (l.local_loss(0, &p) - 2.0 * l.local_loss(0, &m) + l.local_loss(0, &q))
                / (h * h * dot(&dir, &dir));
            assert!(curv <= l.smoothness() + 1e-6);
        }
    }

    #[test]
    fn factory_is_deterministic() {
        let spec = SyntheticSpec::logistic(3, 1.0, 0.1, 10);
        assert_eq!(
            make_synthetic_fleet(&spec, 2, 5).unwrap(),
            make_synthetic_fleet(&spec, 2, 5).unwrap()
        );
    }
}
