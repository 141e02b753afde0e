//! Multi-object Bayes update on finite spaces.
//!
//! Three independent routes compute the same posterior:
//!
//! * [`posterior_direct`] evaluates Bayes' rule configuration by
//!   configuration, with the joint likelihood obtained by enumerating every
//!   assignment of measurements to objects (and clutter).
//! * [`posterior_bivariate`] builds the likelihood functional as a product
//!   of single-object measurement functionals and recovers the posterior
//!   through a scalar product.
//! * [`posterior_partition`] and [`posterior_partition_clutter`] sum exact
//!   generating-functional variations over set partitions of the
//!   measurements, and [`posterior_intensity`] gives the first moment of the
//!   result without forming the posterior tensors.
//!
//! The Poisson-prior closed forms live in [`poisson_posterior`],
//! [`poisson_posterior_intensity`] and [`poisson_posterior_pgfl`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::combinatorics::{partitions, subsets, Partition};
use crate::error::{Error, Result};
use crate::finite_pp::{flat_index, for_each_tuple, FiniteSpace, MultiObjectDensity, PoissonSpec};
use crate::logspace::LogSumExp;
use crate::scalar::{factorial, inverse_factorials, Scalar};

const TABLE_TOL: f64 = 1e-10;

/// Per-object measurement model: for every state `x` a density
/// `r_{m|1}(z_1..z_m | x)` over the observation space, truncated at
/// `m_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationKernel<T> {
    state_space: Arc<FiniteSpace>,
    obs_space: Arc<FiniteSpace>,
    tables: Vec<MultiObjectDensity<T>>,
}

impl<T: Scalar> ObservationKernel<T> {
    /// One table per state, all over the same observation space and of the
    /// same order; each must be a normalized probability density.
    pub fn new(state_space: Arc<FiniteSpace>, tables: Vec<MultiObjectDensity<T>>) -> Result<Self> {
        if tables.len() != state_space.dim() {
            return Err(Error::SpaceMismatch { expected: state_space.dim(), found: tables.len() });
        }
        let first = tables
            .first()
            .ok_or_else(|| Error::InvalidModel("observation kernel needs a nonempty state space".into()))?;
        let obs_space = first.space().clone();
        let m_max = first.n_max();
        for (x, t) in tables.iter().enumerate() {
            if **t.space() != *obs_space {
                return Err(Error::SpaceMismatch { expected: obs_space.dim(), found: t.dim() });
            }
            if t.n_max() != m_max {
                return Err(Error::InvalidModel(format!(
                    "table for state {} has order {}, expected {m_max}",
                    state_space.label(x),
                    t.n_max()
                )));
            }
            t.validate_probability(T::lit(TABLE_TOL)).map_err(|e| {
                Error::InvalidModel(format!("table for state {}: {e}", state_space.label(x)))
            })?;
        }
        Ok(Self { state_space, obs_space, tables })
    }

    /// Bernoulli detection: an object at `x` is detected with probability
    /// `p_d[x]` and then produces a single measurement drawn from
    /// `likelihood[x]`.
    pub fn bernoulli_detection(
        state_space: Arc<FiniteSpace>,
        obs_space: Arc<FiniteSpace>,
        p_d: &[T],
        likelihood: &[Vec<T>],
    ) -> Result<Self> {
        let d = state_space.dim();
        if p_d.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: p_d.len() });
        }
        if likelihood.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: likelihood.len() });
        }
        let tables = p_d
            .iter()
            .zip(likelihood)
            .map(|(&p, g)| MultiObjectDensity::bernoulli(obs_space.clone(), p, g))
            .collect::<Result<Vec<_>>>()?;
        Self::new(state_space, tables)
    }

    /// Objects never produce measurements (`r_0 ≡ 1`).
    pub fn undetectable(state_space: Arc<FiniteSpace>, obs_space: Arc<FiniteSpace>) -> Result<Self> {
        let tables = (0..state_space.dim())
            .map(|_| MultiObjectDensity::unit(obs_space.clone(), 0))
            .collect::<Result<Vec<_>>>()?;
        Self::new(state_space, tables)
    }

    pub fn state_space(&self) -> &Arc<FiniteSpace> {
        &self.state_space
    }

    pub fn obs_space(&self) -> &Arc<FiniteSpace> {
        &self.obs_space
    }

    pub fn m_max(&self) -> usize {
        self.tables[0].n_max()
    }

    pub fn table(&self, x: usize) -> &MultiObjectDensity<T> {
        &self.tables[x]
    }

    pub fn tables(&self) -> &[MultiObjectDensity<T>] {
        &self.tables
    }

    /// `r_{|zs|}(zs | x)`, zero when more than `m_max` measurements are asked
    /// of one object.
    pub fn block_likelihood(&self, x: usize, zs: &[usize]) -> T {
        let t = &self.tables[x];
        if zs.len() > t.n_max() {
            return T::zero();
        }
        t.tensor(zs.len())[flat_index(self.obs_space.dim(), zs)]
    }

    /// Missed-detection function `P_0(x) = r_0(x)`.
    pub fn p0_vector(&self) -> Vec<T> {
        self.tables.iter().map(MultiObjectDensity::p0).collect()
    }

    /// `x ↦ r_{|zs|}(zs | x)`.
    pub fn block_vector(&self, zs: &[usize]) -> Vec<T> {
        (0..self.state_space.dim()).map(|x| self.block_likelihood(x, zs)).collect()
    }

    /// Expected number of measurements generated by one object at `x`.
    pub fn expected_measurements(&self, x: usize) -> T {
        self.tables[x].expected_cardinality()
    }
}

/// Measurements not generated by any object, independent of the objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ClutterProcess<T> {
    density: MultiObjectDensity<T>,
}

impl<T: Scalar> ClutterProcess<T> {
    pub fn new(density: MultiObjectDensity<T>) -> Result<Self> {
        density
            .validate_probability(T::lit(TABLE_TOL))
            .map_err(|e| Error::InvalidModel(format!("clutter process: {e}")))?;
        Ok(Self { density })
    }

    /// Poisson clutter. Only coefficients up to the largest measurement
    /// count matter for an update, so an explicit order is exact there;
    /// without one the order follows `spec.tail_tol`.
    pub fn poisson(obs_space: Arc<FiniteSpace>, spec: &PoissonSpec<T>, n_max: Option<usize>) -> Result<Self> {
        Self::new(MultiObjectDensity::poisson(obs_space, spec, n_max)?)
    }

    /// The process that never produces clutter.
    pub fn empty(obs_space: Arc<FiniteSpace>) -> Result<Self> {
        Self::new(MultiObjectDensity::unit(obs_space, 0)?)
    }

    pub fn density(&self) -> &MultiObjectDensity<T> {
        &self.density
    }

    /// `p_{|zs| | 0}(zs)`, zero beyond the stored order.
    pub fn prob(&self, zs: &[usize]) -> T {
        if zs.len() > self.density.n_max() {
            return T::zero();
        }
        self.density.tensor(zs.len())[flat_index(self.density.dim(), zs)]
    }
}

/// Measurements received in one scan, as points of the observation space.
/// Their order carries no meaning; the update routines sort them first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MeasurementSet {
    points: Vec<usize>,
}

impl MeasurementSet {
    pub fn new(points: Vec<usize>) -> Self {
        Self { points }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_labels<S: AsRef<str>>(space: &FiniteSpace, labels: &[S]) -> Result<Self> {
        let points = labels.iter().map(|l| space.index_of(l.as_ref())).collect::<Result<_>>()?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points in ascending order.
    pub fn canonical(&self) -> Vec<usize> {
        let mut z = self.points.clone();
        z.sort_unstable();
        z
    }

    fn check(&self, obs: &FiniteSpace) -> Result<()> {
        match self.points.iter().find(|&&z| z >= obs.dim()) {
            Some(&z) => Err(Error::PointOutOfRange { index: z, size: obs.dim() }),
            None => Ok(()),
        }
    }
}

/// Result of a Bayes update.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    /// Normalized posterior density, of the prior's order.
    pub density: MultiObjectDensity<T>,
    /// First factorial moment density of the posterior.
    pub intensity: Vec<T>,
    /// Log of the normalizing constant (the evidence of the measurements).
    pub log_evidence: T,
    /// Upper bound on posterior mass lost above the truncation order.
    pub truncation_bound: T,
}

/// Tuning of the partition-sum updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    /// Accumulate numerators and the evidence as log-sum-exp.
    pub log_domain: bool,
    /// Skip partitions whose blocks exceed `m_max` or that have more blocks
    /// than the prior has objects; those terms are exactly zero.
    pub prune: bool,
    /// Largest tolerated bound on posterior mass above the truncation order.
    pub truncation_tol: f64,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self { log_domain: false, prune: true, truncation_tol: 1e-6 }
    }
}

fn check_spaces<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    clutter: Option<&ClutterProcess<T>>,
    z: &MeasurementSet,
) -> Result<()> {
    if **prior.space() != *kernel.state_space {
        return Err(Error::SpaceMismatch { expected: kernel.state_space.dim(), found: prior.dim() });
    }
    if let Some(c) = clutter {
        if **c.density.space() != *kernel.obs_space {
            return Err(Error::SpaceMismatch { expected: kernel.obs_space.dim(), found: c.density.dim() });
        }
    }
    if prior.tensors().iter().flatten().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidDensity("prior must have finite nonnegative entries".into()));
    }
    z.check(&kernel.obs_space)
}

/// `p_{m|n}(Z | x_1..x_n)`: sum over every assignment of each measurement
/// to one object (or to clutter) of the product of group likelihoods.
pub fn joint_likelihood<T: Scalar>(
    kernel: &ObservationKernel<T>,
    clutter: Option<&ClutterProcess<T>>,
    x: &[usize],
    z: &MeasurementSet,
) -> T {
    let z = z.points();
    let n = x.len();
    let owners = n + usize::from(clutter.is_some());
    let m = z.len();
    if owners == 0 {
        return if m == 0 { T::one() } else { T::zero() };
    }
    let mut assign = vec![0usize; m];
    let mut groups: Vec<Vec<usize>> = vec![Vec::with_capacity(m); owners];
    let mut total = T::zero();
    loop {
        for g in groups.iter_mut() {
            g.clear();
        }
        for (j, &o) in assign.iter().enumerate() {
            groups[o].push(z[j]);
        }
        let mut term = T::one();
        for (i, &xi) in x.iter().enumerate() {
            term *= kernel.block_likelihood(xi, &groups[i]);
            if term == T::zero() {
                break;
            }
        }
        if let Some(c) = clutter {
            term *= c.prob(&groups[n]);
        }
        total += term;
        let mut pos = 0;
        loop {
            if pos == m {
                return total;
            }
            assign[pos] += 1;
            if assign[pos] < owners {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
    }
}

/// First factorial moment by explicit counting: every stored tuple adds
/// `q_n / n!` to each point it contains, once per occurrence.
pub fn brute_force_intensity<T: Scalar>(density: &MultiObjectDensity<T>) -> Vec<T> {
    let d = density.dim();
    let inv = inverse_factorials::<T>(density.n_max());
    let mut out = vec![T::zero(); d];
    for n in 1..=density.n_max() {
        let t = density.tensor(n);
        for_each_tuple(d, n, |idx, tuple| {
            for &x in tuple {
                out[x] += inv[n] * t[idx];
            }
        });
    }
    out
}

fn truncation_bound<T: Scalar>(prior: &MultiObjectDensity<T>, m: usize, log_evidence: T) -> T {
    let tm = prior.truncation_mass();
    if tm <= T::zero() {
        return T::zero();
    }
    (tm.ln() + factorial::<T>(m).ln() - log_evidence).exp().min(T::one())
}

fn check_truncation<T: Scalar>(bound: T, tol: f64) -> Result<()> {
    if bound.to_f64_lossy() > tol {
        return Err(Error::TruncationOverflow { mass: bound.to_f64_lossy(), tol });
    }
    Ok(())
}

/// Posterior by direct evaluation of Bayes' rule: every configuration's
/// prior weight is multiplied by its joint likelihood and the result
/// renormalized.
pub fn posterior_direct<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    clutter: Option<&ClutterProcess<T>>,
    z: &MeasurementSet,
) -> Result<Posterior<T>> {
    check_spaces(prior, kernel, clutter, z)?;
    let zc = MeasurementSet::new(z.canonical());
    let d = prior.dim();
    let numerator = MultiObjectDensity::from_fn_par(prior.space().clone(), prior.n_max(), |x| {
        let p = prior.tensor(x.len())[flat_index(d, x)];
        if p == T::zero() {
            return T::zero();
        }
        joint_likelihood(kernel, clutter, x, &zc) * p
    })?;
    let evidence = numerator.total_mass();
    if !(evidence > T::zero()) || !evidence.is_finite() {
        return Err(Error::ZeroEvidence);
    }
    let density = numerator.scale(T::one() / evidence);
    let log_evidence = evidence.ln();
    let bound = truncation_bound(prior, zc.len(), log_evidence);
    check_truncation(bound, UpdateOptions::default().truncation_tol)?;
    Ok(Posterior { intensity: brute_force_intensity(&density), density, log_evidence, truncation_bound: bound })
}

/// Posterior through the bivariate functional: the likelihood functional
/// `Λ_Z(x) = p_{m|n}(Z|x)` is read off the product of the single-object
/// measurement functionals (and the clutter functional), and the evidence
/// is its scalar product with the prior.
pub fn posterior_bivariate<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    clutter: Option<&ClutterProcess<T>>,
    z: &MeasurementSet,
) -> Result<Posterior<T>> {
    check_spaces(prior, kernel, clutter, z)?;
    let zc = z.canonical();
    let m = zc.len();
    let obs = kernel.obs_space.clone();
    let failure = std::sync::Mutex::new(None);
    let likelihood = MultiObjectDensity::from_fn_par(prior.space().clone(), prior.n_max(), |x| {
        let build = || -> Result<T> {
            let mut h = match clutter {
                Some(c) => MultiObjectDensity::product(&MultiObjectDensity::unit(obs.clone(), 0)?, c.density(), m)?,
                None => MultiObjectDensity::unit(obs.clone(), m)?,
            };
            for &xi in x {
                h = MultiObjectDensity::product(&h, kernel.table(xi), m)?;
            }
            h.janossy(&zc)
        };
        build().unwrap_or_else(|e| {
            failure.lock().expect("no panics while holding the lock").get_or_insert(e);
            T::zero()
        })
    })?;
    if let Some(e) = failure.into_inner().expect("no panics while holding the lock") {
        return Err(e);
    }
    let evidence = crate::finite_pp::scalar_product(&likelihood, prior)?;
    if !(evidence > T::zero()) || !evidence.is_finite() {
        return Err(Error::ZeroEvidence);
    }
    let numerator = prior.tensors().iter().zip(likelihood.tensors()).map(|(p, l)| {
        p.iter().zip(l).map(|(&a, &b)| a * b / evidence).collect::<Vec<T>>()
    });
    let density = MultiObjectDensity::from_tensors(prior.space().clone(), numerator.collect())?;
    let log_evidence = evidence.ln();
    let bound = truncation_bound(prior, m, log_evidence);
    check_truncation(bound, UpdateOptions::default().truncation_tol)?;
    Ok(Posterior { intensity: density.intensity(), density, log_evidence, truncation_bound: bound })
}

/// One `(W, π)` term of the partition sum: the clutter weight `P_κ(Z∖W)`
/// and one increment function per block of `π`.
struct Term<T> {
    weight: T,
    blocks: Vec<Vec<T>>,
}

impl<T: Scalar> Term<T> {
    fn increments(&self) -> Vec<&[T]> {
        self.blocks.iter().map(Vec::as_slice).collect()
    }
}

fn terms<T: Scalar>(
    kernel: &ObservationKernel<T>,
    clutter: Option<&ClutterProcess<T>>,
    z: &[usize],
    max_blocks: usize,
    prune: bool,
) -> Vec<Term<T>> {
    let m = z.len();
    let m_max = kernel.m_max();
    let mut out = Vec::new();
    let mut push_partitions = |weight: T, kept: &[usize]| {
        let w = kept.len();
        let parts: Box<dyn Iterator<Item = Partition>> = if !prune {
            Box::new(partitions(w, None))
        } else if m_max == 0 {
            Box::new(partitions(w, None).filter(|p| p.is_empty()))
        } else {
            Box::new(partitions(w, Some(m_max)).max_blocks(max_blocks))
        };
        for p in parts {
            let blocks = p
                .blocks()
                .iter()
                .map(|b| {
                    let zs: Vec<usize> = b.iter().map(|&i| z[kept[i]]).collect();
                    kernel.block_vector(&zs)
                })
                .collect();
            out.push(Term { weight, blocks });
        }
    };
    match clutter {
        None => push_partitions(T::one(), &(0..m).collect::<Vec<_>>()),
        Some(c) => {
            for split in subsets(m) {
                let zs: Vec<usize> = split.dropped.iter().map(|&i| z[i]).collect();
                let weight = c.prob(&zs);
                if weight == T::zero() {
                    continue;
                }
                push_partitions(weight, &split.kept);
            }
        }
    }
    out
}

/// Sum of nonnegative `weight · value` products, linear or log-sum-exp.
enum Acc<T> {
    Linear(T),
    Log(LogSumExp<T>),
}

impl<T: Scalar> Acc<T> {
    fn new(log_domain: bool) -> Self {
        if log_domain {
            Acc::Log(LogSumExp::new())
        } else {
            Acc::Linear(T::zero())
        }
    }

    fn push(&mut self, weight: T, value: T) {
        match self {
            Acc::Linear(s) => *s += weight * value,
            Acc::Log(l) => l.push_log(weight.ln() + value.ln()),
        }
    }

    fn ln(&self) -> T {
        match self {
            Acc::Linear(s) => s.ln(),
            Acc::Log(l) => l.value(),
        }
    }

    fn linear(&self) -> T {
        match self {
            Acc::Linear(s) => *s,
            Acc::Log(l) => l.value().exp(),
        }
    }
}

/// Coefficient of `s_1⋯s_j` in `Π_l (base(x_l) + Σ_i s_i u_i(x_l))`: the
/// Janossy coefficient at `x` of `η ↦ δ^j G(η·base; η·u_1, …, η·u_j)`
/// divided by `p_k(x)`.
fn multilinear_coefficient<T: Scalar>(x: &[usize], base: &[T], incs: &[Vec<T>]) -> T {
    let j = incs.len();
    if j > x.len() {
        return T::zero();
    }
    let full = (1usize << j) - 1;
    let mut dp = vec![T::zero(); full + 1];
    dp[0] = T::one();
    for &xl in x {
        for mask in (0..=full).rev() {
            let mut v = dp[mask] * base[xl];
            let mut rest = mask;
            while rest != 0 {
                let i = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                v += dp[mask ^ (1 << i)] * incs[i][xl];
            }
            dp[mask] = v;
        }
    }
    dp[full]
}

/// Shared machinery of the partition-sum updates.
struct PartitionUpdate<'a, T> {
    prior: &'a MultiObjectDensity<T>,
    p0: Vec<T>,
    terms: Vec<Term<T>>,
    log_evidence: T,
    m: usize,
    opts: UpdateOptions,
}

impl<'a, T: Scalar> PartitionUpdate<'a, T> {
    fn new(
        prior: &'a MultiObjectDensity<T>,
        kernel: &ObservationKernel<T>,
        clutter: Option<&ClutterProcess<T>>,
        z: &MeasurementSet,
        opts: UpdateOptions,
    ) -> Result<Self> {
        check_spaces(prior, kernel, clutter, z)?;
        let zc = z.canonical();
        let p0 = kernel.p0_vector();
        let terms = terms(kernel, clutter, &zc, prior.n_max(), opts.prune);
        let values = terms
            .par_iter()
            .map(|t| prior.variation(&p0, &t.increments()))
            .collect::<Result<Vec<T>>>()?;
        let mut acc = Acc::new(opts.log_domain);
        for (t, &v) in terms.iter().zip(&values) {
            acc.push(t.weight, v);
        }
        let log_evidence = acc.ln();
        if !log_evidence.is_finite() {
            return Err(Error::ZeroEvidence);
        }
        Ok(Self { prior, p0, terms, log_evidence, m: zc.len(), opts })
    }

    fn ratio(&self, acc: &Acc<T>, factor: T) -> T {
        if self.opts.log_domain {
            (factor.ln() + acc.ln() - self.log_evidence).exp()
        } else {
            factor * acc.linear() / self.log_evidence.exp()
        }
    }

    fn density(&self) -> Result<MultiObjectDensity<T>> {
        let d = self.prior.dim();
        MultiObjectDensity::from_fn_par(self.prior.space().clone(), self.prior.n_max(), |x| {
            let p = self.prior.tensor(x.len())[flat_index(d, x)];
            if p == T::zero() {
                return T::zero();
            }
            let mut acc = Acc::new(self.opts.log_domain);
            for t in &self.terms {
                acc.push(t.weight, multilinear_coefficient(x, &self.p0, &t.blocks));
            }
            self.ratio(&acc, p)
        })
    }

    /// Appended-increment term `P_0(x) δ^{j+1}G(P_0; u.., δ_x)` plus the
    /// replaced-increment terms `u_i(x) δ^j G(P_0; .., δ_x, ..)`.
    fn intensity(&self) -> Result<Vec<T>> {
        let d = self.prior.dim();
        let per_term = self
            .terms
            .par_iter()
            .map(|t| {
                let incs = t.increments();
                let mut out = self.prior.variation_density(&self.p0, &incs)?;
                for (x, o) in out.iter_mut().enumerate() {
                    *o *= self.p0[x];
                }
                for i in 0..incs.len() {
                    let mut rest = incs.clone();
                    rest.remove(i);
                    let replaced = self.prior.variation_density(&self.p0, &rest)?;
                    for (x, o) in out.iter_mut().enumerate() {
                        *o += incs[i][x] * replaced[x];
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<Vec<T>>>>()?;
        Ok((0..d)
            .map(|x| {
                let mut acc = Acc::new(self.opts.log_domain);
                for (t, v) in self.terms.iter().zip(&per_term) {
                    acc.push(t.weight, v[x]);
                }
                self.ratio(&acc, T::one())
            })
            .collect())
    }

    fn truncation_bound(&self) -> Result<T> {
        let bound = truncation_bound(self.prior, self.m, self.log_evidence);
        check_truncation(bound, self.opts.truncation_tol)?;
        Ok(bound)
    }

    fn posterior(&self) -> Result<Posterior<T>> {
        let truncation_bound = self.truncation_bound()?;
        Ok(Posterior {
            density: self.density()?,
            intensity: self.intensity()?,
            log_evidence: self.log_evidence,
            truncation_bound,
        })
    }
}

/// Partition-sum update without clutter: evidence and posterior are sums
/// over partitions `π` of the measurements of exact variations
/// `δ^{|π|} G(P_0; P(Z_{π,1}|·), …)` of the prior.
pub fn posterior_partition<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    z: &MeasurementSet,
    opts: UpdateOptions,
) -> Result<Posterior<T>> {
    PartitionUpdate::new(prior, kernel, None, z, opts)?.posterior()
}

/// Posterior intensity by the two-term partition sum, without forming the
/// posterior tensors.
pub fn posterior_intensity<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    z: &MeasurementSet,
    opts: UpdateOptions,
) -> Result<Vec<T>> {
    PartitionUpdate::new(prior, kernel, None, z, opts)?.intensity()
}

/// Partition-sum update with clutter: a double sum over subsets `W` of the
/// measurements attributed to objects, weighted by the clutter probability
/// of `Z∖W`, and partitions of `W`.
pub fn posterior_partition_clutter<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    clutter: &ClutterProcess<T>,
    z: &MeasurementSet,
    opts: UpdateOptions,
) -> Result<Posterior<T>> {
    PartitionUpdate::new(prior, kernel, Some(clutter), z, opts)?.posterior()
}

pub fn posterior_intensity_clutter<T: Scalar>(
    prior: &MultiObjectDensity<T>,
    kernel: &ObservationKernel<T>,
    clutter: &ClutterProcess<T>,
    z: &MeasurementSet,
    opts: UpdateOptions,
) -> Result<Vec<T>> {
    PartitionUpdate::new(prior, kernel, Some(clutter), z, opts)?.intensity()
}

/// Number of `(W, π)` terms the clutter update evaluates for `m`
/// measurements under pruning.
pub fn term_count<T: Scalar>(kernel: &ObservationKernel<T>, clutter: Option<&ClutterProcess<T>>, m: usize, n_max: usize) -> usize {
    let z = vec![0; m];
    terms(kernel, clutter, &z, n_max, true).len()
}

/// Partitions of `Z` with the weights `Π_i μ[P(Z_{π,i}|·)]` and increments.
struct PoissonTerms<T> {
    mu: Vec<T>,
    p0: Vec<T>,
    blocks: Vec<Vec<Vec<T>>>,
    /// `μ[u]` per block of each partition.
    masses: Vec<Vec<T>>,
    total: T,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> PoissonTerms<T> {
    fn new(mu: &[T], kernel: &ObservationKernel<T>, z: &MeasurementSet, prune: bool) -> Result<Self> {
        let d = kernel.state_space.dim();
        if mu.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: mu.len() });
        }
        if mu.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidDensity("poisson intensity must be finite and nonnegative".into()));
        }
        z.check(&kernel.obs_space)?;
        let zc = z.canonical();
        let m = zc.len();
        let blocks: Vec<Vec<Vec<T>>> = terms(kernel, None, &zc, m, prune)
            .into_iter()
            .map(|t| t.blocks)
            .collect();
        let masses: Vec<Vec<T>> = blocks.iter().map(|bs| bs.iter().map(|u| dot(mu, u)).collect()).collect();
        let total = masses.iter().map(|ms| ms.iter().fold(T::one(), |a, &b| a * b)).sum::<T>();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::ZeroEvidence);
        }
        Ok(Self { mu: mu.to_vec(), p0: kernel.p0_vector(), blocks, masses, total })
    }

    fn intensity(&self) -> Vec<T> {
        (0..self.mu.len())
            .map(|x| {
                let mut acc = T::zero();
                for (bs, ms) in self.blocks.iter().zip(&self.masses) {
                    let w = ms.iter().fold(T::one(), |a, &b| a * b);
                    let mut term = w * self.p0[x];
                    for j in 0..bs.len() {
                        let others = ms.iter().enumerate().filter(|&(i, _)| i != j).fold(T::one(), |a, (_, &b)| a * b);
                        term += bs[j][x] * others;
                    }
                    acc += term;
                }
                self.mu[x] * acc / self.total
            })
            .collect()
    }
}

/// Posterior for a Poisson prior with intensity `μ`, from the closed form
/// `q_k(x) = e^{-μ[P_0]} Π μ(x_l) Σ_π S_π(x) / Σ_π Π_i μ[P(Z_{π,i}|·)]`.
///
/// The order is `n_max` or, when absent, the smallest order whose neglected
/// posterior mass is below `opts.truncation_tol` (up to the Poisson hard
/// cap). The neglected mass is recorded as the density's truncation mass.
pub fn poisson_posterior<T: Scalar>(
    mu: &[T],
    n_max: Option<usize>,
    kernel: &ObservationKernel<T>,
    z: &MeasurementSet,
    opts: UpdateOptions,
) -> Result<Posterior<T>> {
    let pt = PoissonTerms::new(mu, kernel, z, opts.prune)?;
    let space = kernel.state_space.clone();
    let lambda: T = mu.iter().copied().sum();
    let mu_p0 = dot(mu, &pt.p0);
    let scale = (-mu_p0).exp() / pt.total;
    let build = |n: usize| {
        MultiObjectDensity::from_fn_par(space.clone(), n, |x| {
            let prod = x.iter().fold(scale, |a, &xl| a * mu[xl]);
            if prod == T::zero() {
                return T::zero();
            }
            let s = pt.blocks.iter().map(|bs| multilinear_coefficient(x, &pt.p0, bs)).sum::<T>();
            prod * s
        })
    };
    let tol = opts.truncation_tol;
    let density = match n_max {
        Some(n) => build(n)?,
        None => {
            let mut found = None;
            for n in 0..=crate::finite_pp::POISSON_HARD_CAP {
                let cand = build(n)?;
                if (T::one() - cand.total_mass()).to_f64_lossy() <= tol {
                    found = Some(cand);
                    break;
                }
            }
            found.ok_or(Error::TruncationOverflow { mass: f64::NAN, tol })?
        }
    };
    let lost = (T::one() - density.total_mass()).max(T::zero());
    check_truncation(lost, tol)?;
    Ok(Posterior {
        intensity: pt.intensity(),
        density: density.with_truncation_mass(lost),
        log_evidence: mu_p0 - lambda + pt.total.ln(),
        truncation_bound: lost,
    })
}

/// `M_1(x) = μ(x) Σ_π (w_π P_0(x) + Σ_j P(Z_{π,j}|x) Π_{i≠j} μ[P(Z_{π,i}|·)]) / Σ_π w_π`
/// with `w_π = Π_i μ[P(Z_{π,i}|·)]`.
pub fn poisson_posterior_intensity<T: Scalar>(
    mu: &[T],
    kernel: &ObservationKernel<T>,
    z: &MeasurementSet,
) -> Result<Vec<T>> {
    Ok(PoissonTerms::new(mu, kernel, z, true)?.intensity())
}

/// Posterior generating functional of a Poisson prior at `η`:
/// `exp(μ[(η−1)P_0]) Σ_π Π_i μ[η P(Z_{π,i}|·)] / Σ_π Π_i μ[P(Z_{π,i}|·)]`.
pub fn poisson_posterior_pgfl<T: Scalar>(
    mu: &[T],
    kernel: &ObservationKernel<T>,
    z: &MeasurementSet,
    eta: &[T],
) -> Result<T> {
    let pt = PoissonTerms::new(mu, kernel, z, true)?;
    if eta.len() != mu.len() {
        return Err(Error::SpaceMismatch { expected: mu.len(), found: eta.len() });
    }
    let shifted: T = (0..mu.len()).map(|x| mu[x] * (eta[x] - T::one()) * pt.p0[x]).sum();
    let num: T = pt
        .blocks
        .iter()
        .map(|bs| {
            bs.iter().fold(T::one(), |a, u| {
                a * (0..mu.len()).map(|x| mu[x] * eta[x] * u[x]).sum::<T>()
            })
        })
        .sum();
    Ok(shifted.exp() * num / pt.total)
}
