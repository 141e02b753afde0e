//! Randomized oracle suite behind `pgfl verify`.
//!
//! Every property draws its cases from its own `ChaCha8Rng` stream, so a
//! report is reproducible. Cases run in parallel; the reported error is the
//! maximum over cases.

use std::sync::Arc;
use std::time::Instant;

use pgfl_core::bayes::{
    brute_force_intensity, posterior_bivariate, posterior_direct, posterior_intensity, posterior_intensity_clutter,
    posterior_partition, posterior_partition_clutter, poisson_posterior_intensity, poisson_posterior_pgfl,
};
use pgfl_core::functional_calculus::{
    compose, differential_of_variation, faa_di_bruno, leibniz, numeric_differential, variation_with_inner_increments,
    BlackBox, Functional, KernelOperator, NumericDiffOptions,
};
use pgfl_core::prediction::{build_multiplicative, predict_with_tol};
use pgfl_core::testkit::{self, ClutterKind, Instance, Limits};
use pgfl_core::{
    ClutterProcess, Error, FiniteSpace, MeasurementSet, MultiObjectDensity, MultiplicativeSpec, ObservationKernel,
    PoissonSpec, Posterior, TransitionModel, UpdateOptions,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

/// Sweep sizes of one suite run.
#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub limits: Limits,
    /// Cases per randomized property.
    pub cases: usize,
    pub seed: u64,
}

impl Level {
    pub fn settings(self) -> Settings {
        match self {
            Level::Fast => Settings { limits: Limits::FAST, cases: 40, seed: 1 },
            Level::Full => Settings { limits: Limits::FULL, cases: 200, seed: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub max_err: f64,
    pub tol: f64,
    pub cases: usize,
    pub failure: Option<String>,
    pub seconds: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_err <= self.tol
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {:<40} max_err={:<10.3e} tol={:<6.0e} cases={:<4} {:.2}s",
            self.name, self.max_err, self.tol, self.cases, self.seconds
        );
        if let Some(f) = &self.failure {
            s.push_str(&format!(" error: {f}"));
        }
        s
    }
}

type CaseResult = Result<f64, String>;

/// Runs `cases` independent cases of a property in parallel. Case `i` uses
/// the stream `seed_from_u64(seed + i)` salted by the property.
pub fn property(name: &'static str, tol: f64, cases: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng) -> CaseResult + Sync) -> Check {
    let start = Instant::now();
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let results: Vec<CaseResult> = (0..cases)
        .into_par_iter()
        .map(|i| f(&mut ChaCha8Rng::seed_from_u64(salt ^ seed.wrapping_add(i as u64))))
        .collect();
    let mut max_err = 0.0f64;
    let mut failure = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) if e.is_nan() => {
                failure.get_or_insert(format!("case {i}: NaN error"));
            }
            Ok(e) => max_err = max_err.max(e),
            Err(msg) => {
                failure.get_or_insert(format!("case {i}: {msg}"));
            }
        }
    }
    Check { name, max_err, tol, cases, failure, seconds: start.elapsed().as_secs_f64() }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    testkit::max_abs_diff(a, b)
}

fn posterior_diff(a: &Posterior<f64>, b: &Posterior<f64>) -> f64 {
    testkit::max_tensor_diff(&a.density, &b.density).max((a.log_evidence - b.log_evidence).abs())
}

fn instance(limits: Limits, kind: ClutterKind, rng: &mut ChaCha8Rng) -> Result<Instance, String> {
    testkit::random_feasible_instance(limits, kind, rng).map_err(fail)
}

fn partition_route(inst: &Instance, opts: UpdateOptions) -> pgfl_core::Result<Posterior<f64>> {
    match &inst.clutter {
        None => posterior_partition(&inst.prior, &inst.kernel, &inst.z, opts),
        Some(c) => posterior_partition_clutter(&inst.prior, &inst.kernel, c, &inst.z, opts),
    }
}

fn intensity_route(inst: &Instance, opts: UpdateOptions) -> pgfl_core::Result<Vec<f64>> {
    match &inst.clutter {
        None => posterior_intensity(&inst.prior, &inst.kernel, &inst.z, opts),
        Some(c) => posterior_intensity_clutter(&inst.prior, &inst.kernel, c, &inst.z, opts),
    }
}

/// Partition-sum posterior (tensors and log-evidence) against direct
/// evaluation of Bayes' rule.
pub fn update_vs_direct(name: &'static str, kind: ClutterKind, s: Settings) -> Check {
    property(name, 1e-10, s.cases, s.seed, |rng| {
        let inst = instance(s.limits, kind, rng)?;
        let direct = posterior_direct(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).map_err(fail)?;
        let part = partition_route(&inst, UpdateOptions::default()).map_err(fail)?;
        let logd = partition_route(&inst, UpdateOptions { log_domain: true, ..Default::default() }).map_err(fail)?;
        Ok(posterior_diff(&part, &direct).max(posterior_diff(&logd, &direct)))
    })
}

/// Update through products of generating functionals against direct
/// evaluation.
pub fn bivariate_vs_direct(s: Settings) -> Check {
    property("bivariate_update_vs_direct", 1e-10, s.cases, s.seed, |rng| {
        let kind = if rng.gen::<bool>() { ClutterKind::Poisson } else { ClutterKind::None };
        let inst = instance(s.limits, kind, rng)?;
        let direct = posterior_direct(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).map_err(fail)?;
        let biv = posterior_bivariate(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).map_err(fail)?;
        Ok(posterior_diff(&biv, &direct))
    })
}

/// Two-term intensity formula, moment of the partition-sum posterior and
/// brute-force moment of the direct posterior.
pub fn intensity_three_routes(s: Settings) -> Check {
    property("intensity_three_routes", 1e-9, s.cases, s.seed, |rng| {
        let kind = [ClutterKind::None, ClutterKind::Poisson, ClutterKind::Explicit][rng.gen_range(0..3)];
        let inst = instance(s.limits, kind, rng)?;
        let formula = intensity_route(&inst, UpdateOptions::default()).map_err(fail)?;
        let part = partition_route(&inst, UpdateOptions::default()).map_err(fail)?;
        let direct = posterior_direct(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).map_err(fail)?;
        let brute = brute_force_intensity(&direct.density);
        Ok(diff(&formula, &part.density.intensity()).max(diff(&formula, &brute)).max(diff(&part.intensity, &brute)))
    })
}

fn poisson_prior(space: Arc<FiniteSpace>, mu: &[f64], n_max: usize) -> Result<MultiObjectDensity<f64>, String> {
    MultiObjectDensity::poisson(space, &PoissonSpec { intensity: mu.to_vec(), tail_tol: 0.0 }, Some(n_max)).map_err(fail)
}

const POISSON_ORDER: usize = 16;

/// Closed-form Poisson posterior intensity and generating functional
/// against the generic update of a (finely truncated) Poisson prior.
pub fn poisson_closed_forms(s: Settings) -> Check {
    property("poisson_closed_forms", 1e-10, s.cases, s.seed, |rng| {
        let dx = rng.gen_range(1..=s.limits.max_dx.min(2));
        let dz = rng.gen_range(1..=s.limits.max_dz);
        let sx = testkit::space("x", dx);
        let kernel = testkit::random_kernel(sx.clone(), testkit::space("z", dz), rng.gen_range(1..=s.limits.max_m_max), rng)
            .map_err(fail)?;
        let mu = testkit::random_intensity(dx, 0.5, rng);
        let z = testkit::random_measurements(dz, rng.gen_range(0..=s.limits.max_m), rng);
        let prior = poisson_prior(sx, &mu, POISSON_ORDER)?;
        let opts = UpdateOptions { truncation_tol: 1.0, ..Default::default() };
        let generic = match posterior_partition(&prior, &kernel, &z, opts) {
            Ok(p) => p,
            Err(Error::ZeroEvidence) => {
                return match poisson_posterior_intensity(&mu, &kernel, &z) {
                    Err(Error::ZeroEvidence) => Ok(0.0),
                    other => Err(format!("generic route has zero evidence, closed form gave {other:?}")),
                }
            }
            Err(e) => return Err(fail(e)),
        };
        let closed = poisson_posterior_intensity(&mu, &kernel, &z).map_err(fail)?;
        let mut err = diff(&closed, &generic.intensity);
        for _ in 0..3 {
            let eta: Vec<f64> = (0..dx).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g = generic.density.evaluate(&eta).map_err(fail)?;
            let c = poisson_posterior_pgfl(&mu, &kernel, &z, &eta).map_err(fail)?;
            err = err.max((g - c).abs());
        }
        Ok(err)
    })
}

/// With no measurements the Poisson posterior intensity is `μ P_0`.
pub fn poisson_empty_measurements(s: Settings) -> Check {
    property("poisson_intensity_without_measurements", 1e-10, s.cases, s.seed, |rng| {
        let dx = rng.gen_range(1..=s.limits.max_dx.min(2));
        let dz = rng.gen_range(1..=s.limits.max_dz);
        let sx = testkit::space("x", dx);
        let kernel = testkit::random_kernel(sx.clone(), testkit::space("z", dz), rng.gen_range(1..=s.limits.max_m_max), rng)
            .map_err(fail)?;
        let mu = testkit::random_intensity(dx, 0.5, rng);
        let z = MeasurementSet::empty();
        let closed = poisson_posterior_intensity(&mu, &kernel, &z).map_err(fail)?;
        let p0 = kernel.p0_vector();
        let expect: Vec<f64> = mu.iter().zip(&p0).map(|(m, p)| m * p).collect();
        let prior = poisson_prior(sx, &mu, POISSON_ORDER)?;
        let generic = posterior_partition(&prior, &kernel, &z, UpdateOptions::default()).map_err(fail)?;
        Ok(diff(&closed, &expect).max(diff(&generic.intensity, &expect)))
    })
}

/// Bernoulli detection, Poisson prior and Poisson clutter: the generic
/// intensity update against the classical PHD formula.
pub fn classical_phd(s: Settings) -> Check {
    property("classical_phd_recovery", 1e-10, s.cases, s.seed, |rng| {
        let dx = rng.gen_range(1..=s.limits.max_dx.min(2));
        let dz = rng.gen_range(1..=s.limits.max_dz);
        let (sx, sz) = (testkit::space("x", dx), testkit::space("z", dz));
        let p_d: Vec<f64> = (0..dx).map(|_| rng.gen_range(0.2..0.95)).collect();
        let g: Vec<Vec<f64>> = (0..dx).map(|_| testkit::random_stochastic(dz, rng)).collect();
        let kernel = ObservationKernel::bernoulli_detection(sx.clone(), sz.clone(), &p_d, &g).map_err(fail)?;
        let mu = testkit::random_intensity(dx, 0.5, rng);
        let kappa = testkit::random_intensity(dz, 0.5, rng);
        let z = testkit::random_measurements(dz, rng.gen_range(0..=s.limits.max_m), rng);
        let clutter = ClutterProcess::poisson(sz, &PoissonSpec { intensity: kappa.clone(), tail_tol: 0.0 }, Some(z.len()))
            .map_err(fail)?;
        let prior = poisson_prior(sx, &mu, POISSON_ORDER)?;
        let got = posterior_intensity_clutter(&prior, &kernel, &clutter, &z, UpdateOptions::default()).map_err(fail)?;
        let mut err = 0.0f64;
        for x in 0..dx {
            let mut phd = (1.0 - p_d[x]) * mu[x];
            for &zj in z.points() {
                let den = kappa[zj] + (0..dx).map(|y| p_d[y] * g[y][zj] * mu[y]).sum::<f64>();
                phd += p_d[x] * g[x][zj] * mu[x] / den;
            }
            err = err.max((got[x] - phd).abs());
        }
        Ok(err)
    })
}

fn vector(d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(lo..hi)).collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn raw_density(space: &Arc<FiniteSpace>, n_max: usize, rng: &mut ChaCha8Rng) -> Result<MultiObjectDensity<f64>, String> {
    testkit::random_density(space.clone(), n_max, 0.1, rng).map_err(fail)
}

/// Composite variations by the set-partition chain rule against exact
/// variations of the symbolically composed tensor functional.
pub fn faa_di_bruno_vs_composite(s: Settings) -> Check {
    property("faa_di_bruno_vs_composite", 1e-9, s.cases, s.seed, |rng| {
        let dx = rng.gen_range(1..=s.limits.max_dx);
        let dz = rng.gen_range(1..=s.limits.max_dz);
        let (sx, sz) = (testkit::space("x", dx), testkit::space("z", dz));
        let outer = raw_density(&sx, 3, rng)?;
        let families = (0..dx).map(|_| raw_density(&sz, 2, rng)).collect::<Result<Vec<_>, _>>()?;
        let inner = KernelOperator::new(vector(dx, 0.1, 1.0, rng), families).map_err(fail)?;
        let composite = compose(&outer, &inner, 6).map_err(fail)?;
        let y = vector(dz, -0.5, 0.8, rng);
        let mut err = 0.0f64;
        for n in 0..=4 {
            let incs: Vec<Vec<f64>> = (0..n).map(|_| vector(dz, -1.0, 1.0, rng)).collect();
            let got = faa_di_bruno(&outer, &inner, &y, &refs(&incs), None).map_err(fail)?;
            let want = composite.variation(&y, &refs(&incs)).map_err(fail)?;
            err = err.max((got - want).abs());
        }
        Ok(err)
    })
}

/// Product rule against numeric differentials of the product evaluated
/// pointwise.
pub fn leibniz_vs_numeric(s: Settings) -> Check {
    property("leibniz_vs_numeric", 1e-8, s.cases, s.seed, |rng| {
        let d = rng.gen_range(1..=s.limits.max_dx);
        let sx = testkit::space("x", d);
        let f = raw_density(&sx, rng.gen_range(1..=3), rng)?;
        let g = raw_density(&sx, rng.gen_range(1..=2), rng)?;
        let product = BlackBox::new(d, |y: &[f64]| f.eval(y).unwrap() * g.eval(y).unwrap());
        let y = vector(d, -0.5, 1.0, rng);
        let mut err = 0.0f64;
        for n in 0..=3 {
            let incs: Vec<Vec<f64>> = (0..n).map(|_| vector(d, -1.0, 1.0, rng)).collect();
            let got = leibniz(&f, &g, &y, &refs(&incs)).map_err(fail)?;
            let want = numeric_differential(&product, &y, &refs(&incs), NumericDiffOptions::default()).map_err(fail)?;
            err = err.max((got - want).abs());
        }
        Ok(err)
    })
}

/// Differential of a composite variation with varying increments against
/// a numeric differential of the variation itself.
pub fn differential_of_variation_vs_numeric(s: Settings) -> Check {
    property("differential_of_variation_vs_numeric", 1e-8, s.cases, s.seed, |rng| {
        let dx = rng.gen_range(1..=s.limits.max_dx);
        let dz = rng.gen_range(1..=s.limits.max_dz);
        let (sx, sz) = (testkit::space("x", dx), testkit::space("z", dz));
        let f = raw_density(&sx, 4, rng)?;
        let families = (0..dx).map(|_| raw_density(&sz, rng.gen_range(1..=3), rng)).collect::<Result<Vec<_>, _>>()?;
        let g = KernelOperator::new(vector(dx, 0.2, 1.0, rng), families).map_err(fail)?;
        let y = vector(dz, -0.3, 0.9, rng);
        let eta = vector(dz, -1.0, 1.0, rng);
        let shapes: [&[usize]; 6] = [&[], &[1], &[2], &[1, 1], &[2, 1], &[1, 1, 1]];
        let shape = shapes[rng.gen_range(0..shapes.len())];
        let base: Vec<Vec<Vec<f64>>> =
            shape.iter().map(|&k| (0..k).map(|_| vector(dz, -1.0, 1.0, rng)).collect()).collect();
        let blocks: Vec<Vec<&[f64]>> = base.iter().map(|b| refs(b)).collect();
        let got = differential_of_variation(&f, &g, &y, &blocks, &eta).map_err(fail)?;
        let map = BlackBox::new(dz, |yy: &[f64]| variation_with_inner_increments(&f, &g, yy, &blocks).unwrap());
        let want = numeric_differential(&map, &y, &[&eta], NumericDiffOptions::default()).map_err(fail)?;
        Ok((got - want).abs())
    })
}

/// Every posterior route sums to one.
pub fn posterior_normalization(s: Settings) -> Check {
    property("posterior_normalization", 1e-10, s.cases, s.seed, |rng| {
        let kind = [ClutterKind::None, ClutterKind::Poisson, ClutterKind::Explicit][rng.gen_range(0..3)];
        let inst = instance(s.limits, kind, rng)?;
        let direct = posterior_direct(&inst.prior, &inst.kernel, inst.clutter.as_ref(), &inst.z).map_err(fail)?;
        let part = partition_route(&inst, UpdateOptions::default()).map_err(fail)?;
        Ok((direct.density.total_mass() - 1.0).abs().max((part.density.total_mass() - 1.0).abs()))
    })
}

/// Reordering the measurements reproduces the posterior bit for bit;
/// reported error is 1 on any difference.
pub fn permutation_invariance(s: Settings) -> Check {
    property("permutation_invariance_bitwise", 0.0, s.cases, s.seed, |rng| {
        let kind = [ClutterKind::None, ClutterKind::Poisson, ClutterKind::Explicit][rng.gen_range(0..3)];
        let inst = instance(s.limits, kind, rng)?;
        let base = partition_route(&inst, UpdateOptions::default()).map_err(fail)?;
        let mut points = inst.z.points().to_vec();
        let mut worst = 0.0f64;
        for _ in 0..3 {
            for i in (1..points.len()).rev() {
                points.swap(i, rng.gen_range(0..=i));
            }
            let permuted = Instance { z: MeasurementSet::new(points.clone()), ..inst.clone() };
            let other = partition_route(&permuted, UpdateOptions::default()).map_err(fail)?;
            if other != base {
                worst = 1.0;
            }
        }
        Ok(worst)
    })
}

/// Skipping partitions with oversized blocks or too many blocks changes no
/// bit of the result.
pub fn pruning_invariance(s: Settings) -> Check {
    property("pruning_bitwise", 0.0, s.cases, s.seed, |rng| {
        let kind = [ClutterKind::None, ClutterKind::Poisson, ClutterKind::Explicit][rng.gen_range(0..3)];
        let inst = instance(s.limits, kind, rng)?;
        let pruned = partition_route(&inst, UpdateOptions::default()).map_err(fail)?;
        let full = partition_route(&inst, UpdateOptions { prune: false, ..Default::default() }).map_err(fail)?;
        Ok(if pruned == full { 0.0 } else { 1.0 })
    })
}

fn random_motion(d: usize, birth: MultiObjectDensity<f64>, rng: &mut ChaCha8Rng) -> MultiplicativeSpec<f64> {
    MultiplicativeSpec {
        survival: vector(d, 0.0, 1.0, rng),
        motion: (0..d).map(|_| testkit::random_stochastic(d, rng)).collect(),
        birth,
    }
}

/// Predicted mass plus recorded truncation mass is one.
pub fn prediction_normalization(s: Settings) -> Check {
    property("prediction_normalization", 1e-9, s.cases, s.seed, |rng| {
        let d = rng.gen_range(1..=s.limits.max_dx);
        let sx = testkit::space("x", d);
        let n = rng.gen_range(0..=s.limits.max_n);
        let post = raw_density(&sx, n, rng)?;
        let birth = poisson_prior(sx.clone(), &testkit::random_intensity(d, 0.2, rng), n + 2)?;
        let spec = random_motion(d, birth, rng);
        let tables = build_multiplicative(&spec, n + 2, 1.0).map_err(fail)?;
        let out = predict_with_tol(&post, &TransitionModel::Explicit(tables), 1.0).map_err(fail)?;
        Ok((out.total_mass() + out.truncation_mass() - 1.0).abs())
    })
}

/// Poisson in, Poisson out: predicted intensity is `b + Σ_y p_S(y) f(·|y) μ(y)`.
pub fn poisson_prediction_intensity(s: Settings) -> Check {
    property("poisson_prediction_intensity", 1e-9, s.cases, s.seed, |rng| {
        let d = rng.gen_range(1..=s.limits.max_dx.min(2));
        let sx = testkit::space("x", d);
        let mu = testkit::random_intensity(d, 0.3, rng);
        let b = testkit::random_intensity(d, 0.1, rng);
        let order = 10;
        let post = poisson_prior(sx.clone(), &mu, order)?;
        let spec = random_motion(d, poisson_prior(sx, &b, order)?, rng);
        let out = predict_with_tol(&post, &TransitionModel::Multiplicative(spec.clone()), 1e-9).map_err(fail)?;
        let got = out.intensity();
        Ok((0..d)
            .map(|x| {
                let expect = b[x] + (0..d).map(|y| spec.survival[y] * spec.motion[y][x] * mu[y]).sum::<f64>();
                (got[x] - expect).abs()
            })
            .fold(0.0, f64::max))
    })
}

/// Every property of the suite at the given sizes, in report order.
pub fn suite(s: Settings) -> Vec<Check> {
    vec![
        update_vs_direct("partition_update_vs_direct", ClutterKind::None, s),
        update_vs_direct("clutter_update_vs_direct/poisson", ClutterKind::Poisson, s),
        update_vs_direct("clutter_update_vs_direct/explicit", ClutterKind::Explicit, s),
        bivariate_vs_direct(s),
        intensity_three_routes(s),
        poisson_closed_forms(s),
        poisson_empty_measurements(s),
        classical_phd(s),
        faa_di_bruno_vs_composite(s),
        leibniz_vs_numeric(s),
        differential_of_variation_vs_numeric(s),
        posterior_normalization(s),
        permutation_invariance(s),
        pruning_invariance(s),
        prediction_normalization(s),
        poisson_prediction_intensity(s),
    ]
}

/// Runs the suite, printing one line per property as it finishes plus a
/// summary; returns whether everything passed.
pub fn run(level: Level, out: &mut impl std::io::Write) -> std::io::Result<bool> {
    let start = Instant::now();
    let s = level.settings();
    writeln!(out, "verify level={level:?} cases={} seed={}", s.cases, s.seed)?;
    let checks = suite(s);
    for c in &checks {
        writeln!(out, "{}", c.line())?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    writeln!(
        out,
        "{} of {} properties passed in {:.2}s",
        checks.len() - failed,
        checks.len(),
        start.elapsed().as_secs_f64()
    )?;
    Ok(failed == 0)
}
