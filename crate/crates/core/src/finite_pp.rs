//! Point processes on finite spaces stored as truncated Janossy tensors.
//!
//! With counting measure on a [`FiniteSpace`] every integral of the
//! generating-functional calculus is a finite sum and a Dirac increment
//! `δ_x` is a one-hot vector. A [`MultiObjectDensity`] stores, for every
//! cardinality `n <= n_max`, the dense tensor `p_n(x_1, …, x_n)` over ordered
//! tuples in row-major order (the first coordinate is the most significant).
//! The same coefficients define the generating functional
//!
//! ```text
//! G(ψ) = Σ_n 1/n! Σ_{x_1..x_n} p_n(x_1, …, x_n) ψ(x_1)⋯ψ(x_n)
//! ```
//!
//! so a density doubles as an exact polynomial functional whose Gâteaux
//! differentials are obtained by slicing and contracting tensors.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{inverse_factorials, Scalar};

/// Upper bound on the number of stored tensor entries of one density.
pub const MAX_ENTRIES: usize = 1 << 24;

/// Hard cap on the automatically chosen Poisson truncation order.
pub const POISSON_HARD_CAP: usize = 16;

/// A labelled finite set of points carrying counting measure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiniteSpace {
    labels: Vec<String>,
}

impl FiniteSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidSpace("a space needs at least one point".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::InvalidSpace(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    /// A space with labels `prefix0, prefix1, …`.
    pub fn indexed(prefix: &str, d: usize) -> Result<Self> {
        Self::new((0..d).map(|i| format!("{prefix}{i}")))
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }
}

/// A real function on the points of a space (`ψ`, `η`, increments `h`).
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction<T>(pub Vec<T>);

impl<T: Scalar> TestFunction<T> {
    pub fn constant(d: usize, value: T) -> Self {
        Self(vec![value; d])
    }

    pub fn zeros(d: usize) -> Self {
        Self::constant(d, T::zero())
    }

    pub fn ones(d: usize) -> Self {
        Self::constant(d, T::one())
    }

    /// The Dirac increment `δ_x`.
    pub fn one_hot(d: usize, x: usize) -> Self {
        let mut v = vec![T::zero(); d];
        v[x] = T::one();
        Self(v)
    }

    pub fn scaled(&self, c: T) -> Self {
        Self(self.0.iter().map(|&v| v * c).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> Deref for TestFunction<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for TestFunction<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// Poisson process parameters: intensity `μ` and the tail mass tolerated
/// when the truncation order is chosen automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSpec<T> {
    pub intensity: Vec<T>,
    pub tail_tol: T,
}

/// Truncated sequence of symmetric Janossy tensors `p_0, …, p_{n_max}`.
///
/// Entries are nonnegative for probability densities; intermediate
/// functionals (differentials, numerators) may carry arbitrary finite
/// values. `truncation_mass` records probability mass known to have been
/// dropped at cardinalities above `n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiObjectDensity<T> {
    space: Arc<FiniteSpace>,
    tensors: Vec<Vec<T>>,
    truncation_mass: T,
}

/// Row-major flat index of an ordered tuple.
pub fn flat_index(d: usize, tuple: &[usize]) -> usize {
    tuple.iter().fold(0, |acc, &x| acc * d + x)
}

/// Decodes a flat index into `out` (whose length is the tuple order).
pub fn decode_index(d: usize, mut idx: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % d;
        idx /= d;
    }
}

/// Calls `f(flat_index, tuple)` for every ordered `n`-tuple in row-major
/// order.
pub fn for_each_tuple(d: usize, n: usize, mut f: impl FnMut(usize, &[usize])) {
    let mut tuple = vec![0usize; n];
    let total = d.pow(n as u32);
    for idx in 0..total {
        f(idx, &tuple);
        for slot in tuple.iter_mut().rev() {
            *slot += 1;
            if *slot < d {
                break;
            }
            *slot = 0;
        }
    }
}

fn storage_entries(d: usize, n_max: usize) -> Option<usize> {
    let mut total = 0usize;
    let mut len = 1usize;
    for _ in 0..=n_max {
        total = total.checked_add(len)?;
        len = len.checked_mul(d)?;
    }
    Some(total)
}

pub(crate) fn check_size(d: usize, n_max: usize) -> Result<()> {
    match storage_entries(d, n_max) {
        Some(e) if e <= MAX_ENTRIES => Ok(()),
        Some(e) => Err(Error::TooLarge { entries: e, limit: MAX_ENTRIES }),
        None => Err(Error::TooLarge { entries: usize::MAX, limit: MAX_ENTRIES }),
    }
}

/// Calls `f` with every `n`-bit mask of popcount `k`, in increasing order.
fn for_each_mask(n: usize, k: usize, mut f: impl FnMut(u64)) {
    if k == 0 {
        f(0);
        return;
    }
    let end = 1u64 << n;
    let mut mask = (1u64 << k) - 1;
    while mask < end {
        f(mask);
        let low = mask & mask.wrapping_neg();
        let ripple = mask + low;
        mask = (((ripple ^ mask) >> 2) / low) | ripple;
    }
}

/// Contracts the trailing axis of a row-major tensor with `v`.
fn contract_last<T: Scalar>(t: &[T], v: &[T]) -> Vec<T> {
    t.chunks_exact(v.len())
        .map(|row| row.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

/// `Σ_{n > n_max} e^{-λ} λ^n / n!`, summed directly rather than as
/// `1 - head` so tiny tails keep their relative precision.
pub fn poisson_tail(lambda: f64, n_max: usize) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let mut term = (-lambda).exp();
    for n in 1..=n_max + 1 {
        term *= lambda / n as f64;
    }
    let mut sum = 0.0;
    let mut n = n_max + 1;
    loop {
        sum += term;
        n += 1;
        term *= lambda / n as f64;
        if term <= sum * 1e-18 || n > n_max + 2000 {
            break;
        }
    }
    sum
}

impl<T: Scalar> MultiObjectDensity<T> {
    /// The zero functional.
    pub fn zeros(space: Arc<FiniteSpace>, n_max: usize) -> Result<Self> {
        let d = space.dim();
        check_size(d, n_max)?;
        let tensors = (0..=n_max).map(|n| vec![T::zero(); d.pow(n as u32)]).collect();
        Ok(Self { space, tensors, truncation_mass: T::zero() })
    }

    /// The constant functional `G ≡ 1`: the process with no objects.
    pub fn unit(space: Arc<FiniteSpace>, n_max: usize) -> Result<Self> {
        let mut out = Self::zeros(space, n_max)?;
        out.tensors[0][0] = T::one();
        Ok(out)
    }

    /// Builds tensors from explicit row-major data, rejecting wrong shapes,
    /// non-finite entries and asymmetric tensors.
    pub fn from_tensors(space: Arc<FiniteSpace>, tensors: Vec<Vec<T>>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::InvalidDensity("at least the n = 0 coefficient is required".into()));
        }
        let d = space.dim();
        check_size(d, tensors.len() - 1)?;
        for (n, t) in tensors.iter().enumerate() {
            let want = d.pow(n as u32);
            if t.len() != want {
                return Err(Error::InvalidDensity(format!(
                    "cardinality {n} tensor has {} entries, expected {want}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDensity(format!("cardinality {n} tensor has non-finite entries")));
            }
        }
        let out = Self { space, tensors, truncation_mass: T::zero() };
        if !out.is_symmetric(T::lit(1e-12)) {
            return Err(Error::InvalidDensity("tensors are not symmetric".into()));
        }
        Ok(out)
    }

    /// Builds a symmetric density by evaluating `f` once per multiset; `f`
    /// only ever sees ascending tuples.
    pub fn from_fn(space: Arc<FiniteSpace>, n_max: usize, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let d = space.dim();
        check_size(d, n_max)?;
        let mut tensors = Vec::with_capacity(n_max + 1);
        let mut sorted = Vec::with_capacity(n_max);
        for n in 0..=n_max {
            let mut t = vec![T::zero(); d.pow(n as u32)];
            for_each_tuple(d, n, |idx, tuple| {
                sorted.clear();
                sorted.extend_from_slice(tuple);
                sorted.sort_unstable();
                // the sorted representative precedes every permutation of it
                let rep = flat_index(d, &sorted);
                t[idx] = if rep == idx { f(&sorted) } else { t[rep] };
            });
            tensors.push(t);
        }
        Ok(Self { space, tensors, truncation_mass: T::zero() })
    }

    /// Parallel [`from_fn`](Self::from_fn): `f` is evaluated concurrently on
    /// the ascending tuples; the result does not depend on scheduling.
    pub fn from_fn_par(space: Arc<FiniteSpace>, n_max: usize, f: impl Fn(&[usize]) -> T + Sync) -> Result<Self> {
        let d = space.dim();
        check_size(d, n_max)?;
        let mut tensors = Vec::with_capacity(n_max + 1);
        for n in 0..=n_max {
            let mut reps = Vec::new();
            for_each_tuple(d, n, |idx, tuple| {
                if tuple.windows(2).all(|w| w[0] <= w[1]) {
                    reps.push((idx, tuple.to_vec()));
                }
            });
            let values: Vec<T> = reps.par_iter().map(|(_, tuple)| f(tuple)).collect();
            let mut t = vec![T::zero(); d.pow(n as u32)];
            for ((idx, _), v) in reps.iter().zip(&values) {
                t[*idx] = *v;
            }
            let mut sorted = Vec::with_capacity(n);
            for_each_tuple(d, n, |idx, tuple| {
                sorted.clear();
                sorted.extend_from_slice(tuple);
                sorted.sort_unstable();
                let rep = flat_index(d, &sorted);
                if rep != idx {
                    t[idx] = t[rep];
                }
            });
            tensors.push(t);
        }
        Ok(Self { space, tensors, truncation_mass: T::zero() })
    }

    /// Poisson process `p_n = e^{-λ} Π μ(x_i)` with `λ = Σ μ`.
    ///
    /// Without an explicit `n_max` the smallest order whose tail mass is
    /// below `spec.tail_tol` is used, up to [`POISSON_HARD_CAP`]. The tail
    /// beyond the chosen order is recorded as truncation mass.
    pub fn poisson(space: Arc<FiniteSpace>, spec: &PoissonSpec<T>, n_max: Option<usize>) -> Result<Self> {
        let d = space.dim();
        if spec.intensity.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: spec.intensity.len() });
        }
        if spec.intensity.iter().any(|&m| !(m >= T::zero()) || !m.is_finite()) {
            return Err(Error::InvalidDensity("poisson intensity must be finite and nonnegative".into()));
        }
        let lambda: T = spec.intensity.iter().copied().sum();
        let lam = lambda.to_f64_lossy();
        let n_max = match n_max {
            Some(n) => n,
            None => {
                let tol = spec.tail_tol.to_f64_lossy();
                (0..=POISSON_HARD_CAP)
                    .find(|&n| {
                        let tail = poisson_tail(lam, n);
                        tail == 0.0 || tail < tol
                    })
                    .ok_or(Error::TailUnreachable {
                        tail: poisson_tail(lam, POISSON_HARD_CAP),
                        tol,
                        cap: POISSON_HARD_CAP,
                    })?
            }
        };
        let scale = (-lambda).exp();
        let mut out = Self::from_fn(space, n_max, |tuple| {
            tuple.iter().fold(scale, |acc, &x| acc * spec.intensity[x])
        })?;
        out.truncation_mass = T::lit(poisson_tail(lam, n_max));
        Ok(out)
    }

    /// Bernoulli process: empty with probability `1 - q`, otherwise one
    /// object distributed by `f`.
    pub fn bernoulli(space: Arc<FiniteSpace>, q: T, f: &[T]) -> Result<Self> {
        let d = space.dim();
        if f.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: f.len() });
        }
        if !(q >= T::zero() && q <= T::one()) {
            return Err(Error::Range(format!("existence probability {q} outside [0, 1]")));
        }
        if f.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::InvalidDensity("bernoulli density must be nonnegative".into()));
        }
        let total: T = f.iter().copied().sum();
        let tol = T::lit(1e-10);
        if (total - T::one()).abs() > tol {
            return Err(Error::NotNormalized { mass: total.to_f64_lossy(), tol: 1e-10 });
        }
        Ok(Self {
            space,
            tensors: vec![vec![T::one() - q], f.iter().map(|&v| q * v).collect()],
            truncation_mass: T::zero(),
        })
    }

    pub fn space(&self) -> &Arc<FiniteSpace> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn n_max(&self) -> usize {
        self.tensors.len() - 1
    }

    /// Row-major tensor `p_n`; empty slice when `n > n_max`.
    pub fn tensor(&self, n: usize) -> &[T] {
        self.tensors.get(n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn truncation_mass(&self) -> T {
        self.truncation_mass
    }

    pub fn with_truncation_mass(mut self, mass: T) -> Self {
        self.truncation_mass = mass;
        self
    }

    pub fn p0(&self) -> T {
        self.tensors[0][0]
    }

    fn check_fn(&self, psi: &[T]) -> Result<()> {
        if psi.len() != self.dim() {
            return Err(Error::SpaceMismatch { expected: self.dim(), found: psi.len() });
        }
        Ok(())
    }

    fn check_point(&self, x: usize) -> Result<()> {
        if x >= self.dim() {
            return Err(Error::PointOutOfRange { index: x, size: self.dim() });
        }
        Ok(())
    }

    fn check_same_space(&self, other: &Self) -> Result<()> {
        if self.space != other.space && *self.space != *other.space {
            return Err(Error::SpaceMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }

    /// `G(ψ) = Σ_n 1/n! Σ p_n(x_1..x_n) Π ψ(x_i)`.
    pub fn evaluate(&self, psi: &[T]) -> Result<T> {
        self.check_fn(psi)?;
        let inv = inverse_factorials::<T>(self.n_max());
        let mut total = T::zero();
        for (n, t) in self.tensors.iter().enumerate() {
            let mut cur = t.clone();
            for _ in 0..n {
                cur = contract_last(&cur, psi);
            }
            total += inv[n] * cur[0];
        }
        Ok(total)
    }

    /// `δ^j G(y; h_1, …, h_j)` for arbitrary increments, computed exactly by
    /// contracting each tensor with the increments and with `y`.
    pub fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<T> {
        self.check_fn(y)?;
        for h in increments {
            self.check_fn(h)?;
        }
        let j = increments.len();
        if j > self.n_max() {
            return Ok(T::zero());
        }
        let inv = inverse_factorials::<T>(self.n_max());
        let mut total = T::zero();
        for n in j..=self.n_max() {
            let mut cur = self.tensors[n].clone();
            for _ in j..n {
                cur = contract_last(&cur, y);
            }
            for h in increments.iter().rev() {
                cur = contract_last(&cur, h);
            }
            total += inv[n - j] * cur[0];
        }
        Ok(total)
    }

    /// `δ^{j+1} G(y; δ_x, h_1, …, h_j)` for every point `x` at once.
    pub fn variation_density(&self, y: &[T], increments: &[&[T]]) -> Result<Vec<T>> {
        self.check_fn(y)?;
        for h in increments {
            self.check_fn(h)?;
        }
        let j = increments.len();
        let mut total = vec![T::zero(); self.dim()];
        if j + 1 > self.n_max() {
            return Ok(total);
        }
        let inv = inverse_factorials::<T>(self.n_max());
        for n in j + 1..=self.n_max() {
            let mut cur = self.tensors[n].clone();
            for _ in j + 1..n {
                cur = contract_last(&cur, y);
            }
            for h in increments.iter().rev() {
                cur = contract_last(&cur, h);
            }
            for (t, &c) in total.iter_mut().zip(&cur) {
                *t += inv[n - j - 1] * c;
            }
        }
        Ok(total)
    }

    /// The differential functional `ψ ↦ δG(ψ; δ_x)`, whose coefficients are
    /// `ζ'_n(x_1..x_n) = ζ_{n+1}(x, x_1..x_n)`. With `n_max = 0` the result is
    /// the zero functional.
    pub fn differentiate(&self, x: usize) -> Result<Self> {
        self.check_point(x)?;
        let d = self.dim();
        if self.n_max() == 0 {
            return Self::zeros(self.space.clone(), 0);
        }
        let tensors = (0..self.n_max())
            .map(|n| {
                let len = d.pow(n as u32);
                self.tensors[n + 1][x * len..(x + 1) * len].to_vec()
            })
            .collect();
        Ok(Self { space: self.space.clone(), tensors, truncation_mass: T::zero() })
    }

    /// The differential functional along a general increment `h`:
    /// `ζ'_n(w) = Σ_a h(a) ζ_{n+1}(a, w)`.
    pub fn differentiate_along(&self, h: &[T]) -> Result<Self> {
        self.check_fn(h)?;
        let d = self.dim();
        if self.n_max() == 0 {
            return Self::zeros(self.space.clone(), 0);
        }
        let tensors = (0..self.n_max())
            .map(|n| {
                let len = d.pow(n as u32);
                let src = &self.tensors[n + 1];
                (0..len)
                    .map(|w| (0..d).fold(T::zero(), |acc, a| acc + h[a] * src[a * len + w]))
                    .collect()
            })
            .collect();
        Ok(Self { space: self.space.clone(), tensors, truncation_mass: T::zero() })
    }

    /// The functional `η ↦ G(h η)`: coefficients `p_n(x) Π h(x_i)`.
    pub fn reweight(&self, h: &[T]) -> Result<Self> {
        self.check_fn(h)?;
        let d = self.dim();
        let mut tuple = Vec::new();
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(n, t)| {
                tuple.resize(n, 0);
                t.iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        decode_index(d, idx, &mut tuple);
                        tuple.iter().fold(v, |acc, &x| acc * h[x])
                    })
                    .collect()
            })
            .collect();
        Ok(Self { space: self.space.clone(), tensors, truncation_mass: T::zero() })
    }

    fn check_tuple(&self, tuple: &[usize]) -> Result<()> {
        if tuple.len() > self.n_max() {
            return Err(Error::TupleTooLong { len: tuple.len(), n_max: self.n_max() });
        }
        for &x in tuple {
            self.check_point(x)?;
        }
        Ok(())
    }

    /// Janossy density `p_k(x_1..x_k)`: the `k`-th differential at Dirac
    /// increments evaluated at `ψ ≡ 0`.
    pub fn janossy(&self, tuple: &[usize]) -> Result<T> {
        self.check_tuple(tuple)?;
        Ok(self.tensors[tuple.len()][flat_index(self.dim(), tuple)])
    }

    /// Factorial moment density `M_k(x_1..x_k)`: the `k`-th differential at
    /// Dirac increments evaluated at `ψ ≡ 1`.
    pub fn moment(&self, tuple: &[usize]) -> Result<T> {
        self.check_tuple(tuple)?;
        let d = self.dim();
        let k = tuple.len();
        let prefix = flat_index(d, tuple);
        let inv = inverse_factorials::<T>(self.n_max());
        let mut total = T::zero();
        for n in k..=self.n_max() {
            let len = d.pow((n - k) as u32);
            let block = &self.tensors[n][prefix * len..(prefix + 1) * len];
            total += inv[n - k] * block.iter().copied().sum::<T>();
        }
        Ok(total)
    }

    /// First factorial moment density (intensity) at every point.
    pub fn intensity(&self) -> Vec<T> {
        (0..self.dim())
            .map(|x| if self.n_max() == 0 { T::zero() } else { self.moment(&[x]).expect("x in range") })
            .collect()
    }

    /// Probability of each cardinality, `1/n! Σ p_n`.
    pub fn cardinality_distribution(&self) -> Vec<T> {
        let inv = inverse_factorials::<T>(self.n_max());
        self.tensors
            .iter()
            .zip(inv)
            .map(|(t, w)| w * t.iter().copied().sum::<T>())
            .collect()
    }

    /// `G(1)`, the stored mass.
    pub fn total_mass(&self) -> T {
        self.cardinality_distribution().into_iter().sum()
    }

    pub fn expected_cardinality(&self) -> T {
        self.cardinality_distribution()
            .into_iter()
            .enumerate()
            .map(|(n, p)| T::from_count(n) * p)
            .sum()
    }

    /// Checks that this is a probability density: nonnegative, symmetric and
    /// `G(1) + truncation_mass = 1` within `tol`.
    pub fn validate_probability(&self, tol: T) -> Result<()> {
        if self.tensors.iter().flatten().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidDensity("negative or non-finite Janossy entry".into()));
        }
        if !self.is_symmetric(tol) {
            return Err(Error::InvalidDensity("tensors are not symmetric".into()));
        }
        let mass = self.total_mass() + self.truncation_mass;
        if (mass - T::one()).abs() > tol {
            return Err(Error::NotNormalized { mass: mass.to_f64_lossy(), tol: tol.to_f64_lossy() });
        }
        Ok(())
    }

    /// Every entry equals the entry of its sorted permutation within `tol`.
    pub fn is_symmetric(&self, tol: T) -> bool {
        let d = self.dim();
        let mut sorted = Vec::new();
        self.tensors.iter().enumerate().all(|(n, t)| {
            let mut ok = true;
            for_each_tuple(d, n, |idx, tuple| {
                sorted.clear();
                sorted.extend_from_slice(tuple);
                sorted.sort_unstable();
                let a = t[idx];
                let b = t[flat_index(d, &sorted)];
                if (a - b).abs() > tol * T::one().max(a.abs()) {
                    ok = false;
                }
            });
            ok
        })
    }

    /// Divides every coefficient by the stored mass `G(1)`.
    pub fn normalized(&self) -> Result<(Self, T)> {
        let mass = self.total_mass();
        if !(mass > T::zero()) {
            return Err(Error::InvalidDensity("cannot normalize a density with zero mass".into()));
        }
        let mut out = self.scale(T::one() / mass);
        out.truncation_mass = self.truncation_mass / mass;
        Ok((out, mass))
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            space: self.space.clone(),
            tensors: self.tensors.iter().map(|t| t.iter().map(|&v| v * c).collect()).collect(),
            truncation_mass: self.truncation_mass * c,
        }
    }

    /// Coefficientwise sum, zero-padding the shorter operand.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_space(other)?;
        let n_max = self.n_max().max(other.n_max());
        let mut out = Self::zeros(self.space.clone(), n_max)?;
        for src in [self, other] {
            for (dst, t) in out.tensors.iter_mut().zip(&src.tensors) {
                for (a, &b) in dst.iter_mut().zip(t) {
                    *a += b;
                }
            }
        }
        out.truncation_mass = self.truncation_mass + other.truncation_mass;
        Ok(out)
    }

    /// Janossy coefficients of the product functional `G_a(ψ) G_b(ψ)` up to
    /// `n_max`: `r_n(x) = Σ_{S ⊆ 1..n} a_{|S|}(x_S) b_{n-|S|}(x_{S^c})`.
    pub fn product(a: &Self, b: &Self, n_max: usize) -> Result<Self> {
        a.check_same_space(b)?;
        let d = a.dim();
        check_size(d, n_max)?;
        let mut tensors = Vec::with_capacity(n_max + 1);
        let mut tuple = Vec::with_capacity(n_max);
        for n in 0..=n_max {
            let mut t = vec![T::zero(); d.pow(n as u32)];
            tuple.resize(n, 0);
            for (idx, slot) in t.iter_mut().enumerate() {
                decode_index(d, idx, &mut tuple);
                let mut acc = T::zero();
                for k in n.saturating_sub(b.n_max())..=n.min(a.n_max()) {
                    for_each_mask(n, k, |mask| {
                        let (mut ia, mut ib) = (0usize, 0usize);
                        for (i, &x) in tuple.iter().enumerate() {
                            if mask >> i & 1 == 1 {
                                ia = ia * d + x;
                            } else {
                                ib = ib * d + x;
                            }
                        }
                        acc += a.tensors[k][ia] * b.tensors[n - k][ib];
                    });
                }
                *slot = acc;
            }
            tensors.push(t);
        }
        Ok(Self { space: a.space.clone(), tensors, truncation_mass: T::zero() })
    }

    /// Superposition of two independent processes: the product of their
    /// generating functionals, truncated at the larger of the two orders.
    /// Mass of the product above that order is added to the recorded
    /// truncation mass.
    pub fn superpose(a: &Self, b: &Self) -> Result<Self> {
        let n_max = a.n_max().max(b.n_max());
        let mut out = Self::product(a, b, n_max)?;
        let (ca, cb) = (a.cardinality_distribution(), b.cardinality_distribution());
        let mut dropped = T::zero();
        for (i, &pa) in ca.iter().enumerate() {
            for (j, &pb) in cb.iter().enumerate() {
                if i + j > n_max {
                    dropped += pa * pb;
                }
            }
        }
        out.truncation_mass = a.truncation_mass + b.truncation_mass + dropped;
        Ok(out)
    }

    /// Draws one realization: a cardinality from the (renormalized)
    /// cardinality distribution, then an ordered tuple proportional to
    /// `p_n`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let card: Vec<f64> = self.cardinality_distribution().iter().map(|v| v.to_f64_lossy().max(0.0)).collect();
        let n = pick(rng, &card);
        let weights: Vec<f64> = self.tensors[n].iter().map(|v| v.to_f64_lossy().max(0.0)).collect();
        let idx = pick(rng, &weights);
        let mut tuple = vec![0; n];
        decode_index(self.dim(), idx, &mut tuple);
        tuple
    }

    pub fn to_doc(&self) -> DensityDoc {
        DensityDoc {
            labels: self.space.labels().to_vec(),
            n_max: self.n_max(),
            tensors: self.tensors.iter().map(|t| t.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
            truncation_mass: self.truncation_mass.to_f64_lossy(),
        }
    }

    pub fn from_doc(doc: &DensityDoc) -> Result<Self> {
        if doc.tensors.len() != doc.n_max + 1 {
            return Err(Error::InvalidDensity(format!(
                "n_max = {} but {} tensors given",
                doc.n_max,
                doc.tensors.len()
            )));
        }
        let space = Arc::new(FiniteSpace::new(doc.labels.iter().cloned())?);
        let tensors = doc.tensors.iter().map(|t| t.iter().map(|&v| T::lit(v)).collect()).collect();
        Ok(Self::from_tensors(space, tensors)?.with_truncation_mass(T::lit(doc.truncation_mass)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("density documents always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DensityDoc =
            serde_json::from_str(s).map_err(|e| Error::InvalidDensity(format!("malformed density document: {e}")))?;
        Self::from_doc(&doc)
    }
}

/// Weighted index draw; falls back to the last positive weight on round-off.
fn pick<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Scalar product `⟨Ψ_1, Ψ_2⟩ = Σ_n 1/n! Σ ψ_{1,n} ψ_{2,n}`; missing
/// cardinalities count as zero.
pub fn scalar_product<T: Scalar>(a: &MultiObjectDensity<T>, b: &MultiObjectDensity<T>) -> Result<T> {
    a.check_same_space(b)?;
    Ok(scalar_product_raw(&a.tensors, &b.tensors))
}

pub(crate) fn scalar_product_raw<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(a: &[A], b: &[B]) -> T {
    let n = a.len().min(b.len());
    let inv = inverse_factorials::<T>(n.saturating_sub(1));
    (0..n)
        .map(|k| {
            let dot = a[k].as_ref().iter().zip(b[k].as_ref()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            inv[k] * dot
        })
        .sum()
}

/// Text serialization of a density: labels, order, and one flattened
/// row-major tensor per cardinality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityDoc {
    pub labels: Vec<String>,
    pub n_max: usize,
    pub tensors: Vec<Vec<f64>>,
    #[serde(default)]
    pub truncation_mass: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(d: usize) -> Arc<FiniteSpace> {
        Arc::new(FiniteSpace::indexed("x", d).unwrap())
    }

    fn poisson(mu: &[f64], n_max: usize) -> MultiObjectDensity<f64> {
        let spec = PoissonSpec { intensity: mu.to_vec(), tail_tol: 1e-12 };
        MultiObjectDensity::poisson(space(mu.len()), &spec, Some(n_max)).unwrap()
    }

    fn random_density(d: usize, n_max: usize, seed: u64) -> MultiObjectDensity<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = MultiObjectDensity::from_fn(space(d), n_max, |_| rng.gen::<f64>()).unwrap();
        raw.normalized().unwrap().0
    }

    #[test]
    fn space_validation() {
        assert!(FiniteSpace::new(Vec::<String>::new()).is_err());
        assert!(FiniteSpace::new(["a", "a"]).is_err());
        let s = FiniteSpace::new(["a", "b"]).unwrap();
        assert_eq!(s.index_of("b").unwrap(), 1);
        assert!(matches!(s.index_of("c"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn evaluate_at_one_and_zero() {
        let p = random_density(3, 3, 1);
        assert!((p.evaluate(&[1.0; 3]).unwrap() - 1.0).abs() < 1e-10);
        assert_eq!(p.evaluate(&[0.0; 3]).unwrap(), p.p0());
        assert!(matches!(p.evaluate(&[1.0; 2]), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn poisson_void_probability() {
        let mu = [0.3, 0.5];
        let p = poisson(&mu, 6);
        assert!((p.evaluate(&[0.0, 0.0]).unwrap() - (-0.8f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn poisson_pgfl_closed_form() {
        let mu = [0.2, 0.4, 0.1];
        let spec = PoissonSpec { intensity: mu.to_vec(), tail_tol: 1e-14 };
        let p = MultiObjectDensity::poisson(space(3), &spec, None).unwrap();
        for psi in [[0.5, -0.3, 1.0], [1.0, 1.0, 1.0], [-1.0, 0.2, 0.9]] {
            let exact = mu.iter().zip(&psi).map(|(m, s)| m * (s - 1.0)).sum::<f64>().exp();
            let got = p.evaluate(&psi).unwrap();
            assert!((got - exact).abs() <= 1e-13 + p.truncation_mass(), "{got} vs {exact}");
        }
    }

    #[test]
    fn poisson_zero_intensity_is_empty() {
        let spec = PoissonSpec { intensity: vec![0.0, 0.0], tail_tol: 1e-12 };
        let p = MultiObjectDensity::poisson(space(2), &spec, None).unwrap();
        assert_eq!(p.n_max(), 0);
        assert_eq!(p.p0(), 1.0);
        let p = MultiObjectDensity::poisson(space(2), &spec, Some(3)).unwrap();
        assert_eq!(p.p0(), 1.0);
        assert!(p.tensors()[1..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_auto_order_matches_tail_sum() {
        // independent tail: 1 - partial sum in extended precision via exact series
        let spec = PoissonSpec { intensity: vec![1.0], tail_tol: 1e-12 };
        let p = MultiObjectDensity::poisson(space(1), &spec, None).unwrap();
        let n = p.n_max();
        let tail = |n: usize| (n + 1..60).map(|k| (-1.0f64).exp() / (1..=k).map(|i| i as f64).product::<f64>()).sum::<f64>();
        assert!(tail(n) < 1e-12);
        assert!(tail(n - 1) >= 1e-12);
        assert_eq!(n, 14);
        assert!((p.truncation_mass() - tail(n)).abs() < 1e-25);
    }

    #[test]
    fn poisson_tail_unreachable() {
        let spec = PoissonSpec { intensity: vec![5.0], tail_tol: 1e-12 };
        assert!(matches!(
            MultiObjectDensity::poisson(space(1), &spec, None),
            Err(Error::TailUnreachable { .. })
        ));
    }

    #[test]
    fn differentiate_poisson() {
        let mu = [0.3, 0.7];
        let p = poisson(&mu, 8);
        let psi = [0.4, -0.2];
        let base = mu.iter().zip(&psi).map(|(m, s)| m * (s - 1.0)).sum::<f64>().exp();
        for x in 0..2 {
            let got = p.differentiate(x).unwrap().evaluate(&psi).unwrap();
            assert!((got - base * mu[x]).abs() < 1e-7, "{got}");
        }
    }

    #[test]
    fn double_differential_recovers_janossy_and_commutes() {
        let p = random_density(3, 4, 7);
        for x in 0..3 {
            for y in 0..3 {
                let xy = p.differentiate(x).unwrap().differentiate(y).unwrap();
                let yx = p.differentiate(y).unwrap().differentiate(x).unwrap();
                assert_eq!(xy, yx);
                assert_eq!(xy.evaluate(&[0.0; 3]).unwrap(), p.janossy(&[x, y]).unwrap());
            }
        }
    }

    #[test]
    fn differentiate_order_zero_is_zero_functional() {
        let p = MultiObjectDensity::<f64>::unit(space(2), 0).unwrap();
        let dp = p.differentiate(1).unwrap();
        assert_eq!(dp.n_max(), 0);
        assert_eq!(dp.p0(), 0.0);
    }

    #[test]
    fn janossy_and_moment_of_poisson() {
        let mu = [0.3, 0.6];
        let p = poisson(&mu, 14);
        let e = (-0.9f64).exp();
        assert!((p.janossy(&[0, 1, 1]).unwrap() - e * 0.3 * 0.6 * 0.6).abs() < 1e-16);
        assert_eq!(p.janossy(&[]).unwrap(), p.p0());
        // brute force first moment: Σ_n 1/n! Σ_tuples p_n · #{i : x_i = x}
        for x in 0..2 {
            let mut brute = 0.0;
            let mut fact = 1.0;
            for n in 0..=p.n_max() {
                if n > 0 {
                    fact *= n as f64;
                }
                for_each_tuple(2, n, |idx, t| {
                    let count = t.iter().filter(|&&v| v == x).count() as f64;
                    brute += p.tensor(n)[idx] * count / fact;
                });
            }
            let diff = (p.moment(&[x]).unwrap() - brute).abs();
            assert!(diff < 1e-13, "{diff}");
            assert!((p.moment(&[x]).unwrap() - mu[x]).abs() < 1e-10);
        }
        assert!(matches!(p.janossy(&[0; 15]), Err(Error::TupleTooLong { .. })));
        let q = random_density(2, 3, 2);
        assert!((q.moment(&[]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_product_examples() {
        let p = random_density(2, 3, 3);
        let q = random_density(2, 2, 4);
        let unit = MultiObjectDensity::unit(space(2), 0).unwrap();
        assert_eq!(scalar_product(&p, &unit).unwrap(), p.p0());
        assert_eq!(scalar_product(&p, &q).unwrap(), scalar_product(&q, &p).unwrap());
        let ones = MultiObjectDensity::from_fn(space(2), 3, |_| 1.0).unwrap();
        assert!((scalar_product(&p, &ones).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_and_superpose() {
        let f = [0.25, 0.75];
        assert!(MultiObjectDensity::bernoulli(space(2), 1.5, &f).is_err());
        assert!(MultiObjectDensity::bernoulli(space(2), 0.5, &[0.5, 0.6]).is_err());
        let empty = MultiObjectDensity::bernoulli(space(2), 0.0, &f).unwrap();
        assert_eq!(empty.cardinality_distribution(), vec![1.0, 0.0]);

        let p = random_density(2, 3, 5);
        let unit = MultiObjectDensity::unit(space(2), 0).unwrap();
        assert_eq!(MultiObjectDensity::superpose(&p, &unit).unwrap(), p);

        let a = poisson(&[0.2, 0.1], 5);
        let b = poisson(&[0.05, 0.3], 5);
        let ab = MultiObjectDensity::superpose(&a, &b).unwrap();
        let c = poisson(&[0.25, 0.4], 5);
        for (x, y) in ab.tensors().iter().flatten().zip(c.tensors().iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn superpose_of_bernoullis() {
        let a = MultiObjectDensity::<f64>::bernoulli(space(2), 0.5, &[1.0, 0.0]).unwrap();
        let b = MultiObjectDensity::bernoulli(space(2), 0.4, &[0.0, 1.0]).unwrap();
        let ab = MultiObjectDensity::superpose(&a, &b).unwrap();
        // n_max = 1 keeps only 0 or 1 objects; the two-object mass is recorded
        assert!((ab.truncation_mass() - 0.2).abs() < 1e-15);
        assert!((ab.p0() - 0.3).abs() < 1e-15);
        let full = MultiObjectDensity::product(&a, &b, 2).unwrap();
        assert!((full.janossy(&[0, 1]).unwrap() - 0.2).abs() < 1e-15);
        assert!((full.janossy(&[1, 0]).unwrap() - 0.2).abs() < 1e-15);
        assert!((full.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn from_tensors_rejects_bad_input() {
        let s = space(2);
        assert!(MultiObjectDensity::from_tensors(s.clone(), vec![vec![1.0], vec![0.0]]).is_err());
        assert!(MultiObjectDensity::from_tensors(s.clone(), vec![vec![0.0], vec![0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).is_err());
        assert!(MultiObjectDensity::from_tensors(s, vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let p = random_density(3, 2, 9).with_truncation_mass(1e-13);
        let back = MultiObjectDensity::<f64>::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(MultiObjectDensity::<f64>::from_json("{\"labels\":[\"a\"],\"n_max\":1,\"tensors\":[[1.0]]}").is_err());
    }

    #[test]
    fn size_guard() {
        assert!(matches!(MultiObjectDensity::<f64>::zeros(space(6), 12), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn f32_instantiation() {
        let s = space(2);
        let spec = PoissonSpec { intensity: vec![0.2f32, 0.3], tail_tol: 1e-6 };
        let p = MultiObjectDensity::<f32>::poisson(s, &spec, None).unwrap();
        assert!((p.evaluate(&[1.0, 1.0]).unwrap() + p.truncation_mass() - 1.0).abs() < 1e-6);
    }
}
