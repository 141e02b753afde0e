//! Random model generators shared by the unit tests, the integration tests
//! and the command-line verification suite.

use std::sync::Arc;

use rand::Rng;

use crate::bayes::{ClutterProcess, MeasurementSet, ObservationKernel};
use crate::error::Result;
use crate::finite_pp::{FiniteSpace, MultiObjectDensity, PoissonSpec};

pub fn space(prefix: &str, d: usize) -> Arc<FiniteSpace> {
    Arc::new(FiniteSpace::indexed(prefix, d).expect("d > 0"))
}

/// Normalized symmetric density with uniform random coefficients; each
/// multiset is zeroed with probability `sparsity`.
pub fn random_density<R: Rng + ?Sized>(
    space: Arc<FiniteSpace>,
    n_max: usize,
    sparsity: f64,
    rng: &mut R,
) -> Result<MultiObjectDensity<f64>> {
    loop {
        let raw = MultiObjectDensity::from_fn(space.clone(), n_max, |_| {
            if rng.gen::<f64>() < sparsity {
                0.0
            } else {
                rng.gen_range(0.05..1.0)
            }
        })?;
        if raw.total_mass() > 0.0 {
            return Ok(raw.normalized()?.0);
        }
    }
}

/// Kernel whose per-state tables are random densities of order `m_max`.
pub fn random_kernel<R: Rng + ?Sized>(
    state_space: Arc<FiniteSpace>,
    obs_space: Arc<FiniteSpace>,
    m_max: usize,
    rng: &mut R,
) -> Result<ObservationKernel<f64>> {
    let tables = (0..state_space.dim())
        .map(|_| random_density(obs_space.clone(), m_max, 0.2, rng))
        .collect::<Result<Vec<_>>>()?;
    ObservationKernel::new(state_space, tables)
}

pub fn random_stochastic<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Bernoulli-detection kernel with random detection probabilities and
/// likelihood rows.
pub fn random_detection_kernel<R: Rng + ?Sized>(
    state_space: Arc<FiniteSpace>,
    obs_space: Arc<FiniteSpace>,
    rng: &mut R,
) -> Result<ObservationKernel<f64>> {
    let dx = state_space.dim();
    let p_d: Vec<f64> = (0..dx).map(|_| rng.gen_range(0.3..0.95)).collect();
    let g: Vec<Vec<f64>> = (0..dx).map(|_| random_stochastic(obs_space.dim(), rng)).collect();
    ObservationKernel::bernoulli_detection(state_space, obs_space, &p_d, &g)
}

pub fn random_intensity<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(0.1..1.0) * scale).collect()
}

/// Poisson clutter stored up to order `n_max`.
pub fn random_poisson_clutter<R: Rng + ?Sized>(
    obs_space: Arc<FiniteSpace>,
    n_max: usize,
    rng: &mut R,
) -> Result<ClutterProcess<f64>> {
    let intensity = random_intensity(obs_space.dim(), 0.5, rng);
    ClutterProcess::poisson(obs_space, &PoissonSpec { intensity, tail_tol: 0.0 }, Some(n_max))
}

pub fn random_explicit_clutter<R: Rng + ?Sized>(
    obs_space: Arc<FiniteSpace>,
    n_max: usize,
    rng: &mut R,
) -> Result<ClutterProcess<f64>> {
    ClutterProcess::new(random_density(obs_space, n_max, 0.2, rng)?)
}

pub fn random_measurements<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> MeasurementSet {
    MeasurementSet::new((0..m).map(|_| rng.gen_range(0..d)).collect())
}

/// Size limits of a random Bayes-update instance.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_dx: usize,
    pub max_dz: usize,
    pub max_n: usize,
    pub max_m: usize,
    pub max_m_max: usize,
}

impl Limits {
    pub const FAST: Limits = Limits { max_dx: 2, max_dz: 2, max_n: 3, max_m: 3, max_m_max: 2 };
    pub const FULL: Limits = Limits { max_dx: 3, max_dz: 3, max_n: 4, max_m: 4, max_m_max: 2 };
}

/// Which clutter model a random instance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClutterKind {
    None,
    Poisson,
    Explicit,
}

/// A random prior, kernel, optional clutter and measurement set.
#[derive(Debug, Clone)]
pub struct Instance {
    pub prior: MultiObjectDensity<f64>,
    pub kernel: ObservationKernel<f64>,
    pub clutter: Option<ClutterProcess<f64>>,
    pub z: MeasurementSet,
}

pub fn random_instance<R: Rng + ?Sized>(limits: Limits, clutter: ClutterKind, rng: &mut R) -> Result<Instance> {
    let dx = rng.gen_range(1..=limits.max_dx);
    let dz = rng.gen_range(1..=limits.max_dz);
    let n_max = rng.gen_range(0..=limits.max_n);
    let m = rng.gen_range(0..=limits.max_m);
    let m_max = rng.gen_range(1..=limits.max_m_max);
    let sx = space("x", dx);
    let sz = space("z", dz);
    let prior = random_density(sx.clone(), n_max, 0.1, rng)?;
    let kernel = random_kernel(sx, sz.clone(), m_max, rng)?;
    let clutter = match clutter {
        ClutterKind::None => None,
        ClutterKind::Poisson => Some(random_poisson_clutter(sz, limits.max_m, rng)?),
        ClutterKind::Explicit => Some(random_explicit_clutter(sz, limits.max_m, rng)?),
    };
    let z = random_measurements(dz, m, rng);
    Ok(Instance { prior, kernel, clutter, z })
}

/// Random instance whose measurement set has positive likelihood: retries
/// until the direct evidence is nonzero.
pub fn random_feasible_instance<R: Rng + ?Sized>(limits: Limits, clutter: ClutterKind, rng: &mut R) -> Result<Instance> {
    loop {
        let inst = random_instance(limits, clutter, rng)?;
        let ok = crate::bayes::posterior_direct(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).is_ok();
        if ok {
            return Ok(inst);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_tensor_diff(a: &MultiObjectDensity<f64>, b: &MultiObjectDensity<f64>) -> f64 {
    assert_eq!(a.n_max(), b.n_max(), "compared densities differ in order");
    a.tensors().iter().zip(b.tensors()).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}
