//! Variational calculus on finite-space functionals.
//!
//! Two kinds of objects appear here:
//!
//! * scalar functionals `F(ψ)` ([`Functional`]); those that know their own
//!   higher-order Gâteaux differentials implement [`ExactFunctional`];
//! * operators `g` mapping a test function on one space to a test function
//!   on another ([`Operator`]), used as the inner map of a composite
//!   `f(g(y))`.
//!
//! The composite rules (Faà di Bruno over set partitions, Leibniz over
//! subsets, and the differential of a variation) are evaluated from the
//! exact differentials of their parts. [`numeric_differential`] is a
//! finite-difference oracle that only needs point evaluations.

use std::sync::Arc;

use crate::combinatorics::{partitions, subsets};
use crate::error::{Error, Result};
use crate::finite_pp::{FiniteSpace, MultiObjectDensity};
use crate::scalar::Scalar;

/// A functional of a test function.
pub trait Functional<T: Scalar> {
    fn dim(&self) -> usize;
    fn eval(&self, psi: &[T]) -> Result<T>;
}

/// A functional with exact differentials `δ^n F(y; h_1, …, h_n)`.
pub trait ExactFunctional<T: Scalar>: Functional<T> {
    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<T>;
}

impl<T: Scalar> Functional<T> for MultiObjectDensity<T> {
    fn dim(&self) -> usize {
        MultiObjectDensity::dim(self)
    }

    fn eval(&self, psi: &[T]) -> Result<T> {
        self.evaluate(psi)
    }
}

impl<T: Scalar> ExactFunctional<T> for MultiObjectDensity<T> {
    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<T> {
        MultiObjectDensity::variation(self, y, increments)
    }
}

/// Opaque evaluator wrapped as a functional; only point evaluations are
/// available, so it is differentiated numerically.
pub struct BlackBox<F> {
    dim: usize,
    f: F,
}

impl<F> BlackBox<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Scalar, F: Fn(&[T]) -> T> Functional<T> for BlackBox<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, psi: &[T]) -> Result<T> {
        if psi.len() != self.dim {
            return Err(Error::SpaceMismatch { expected: self.dim, found: psi.len() });
        }
        Ok((self.f)(psi))
    }
}

/// The untruncated Poisson functional `exp(μ[y - 1])`, whose differentials
/// are `exp(μ[y - 1]) Π μ[h_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonFunctional<T> {
    pub intensity: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> Functional<T> for PoissonFunctional<T> {
    fn dim(&self) -> usize {
        self.intensity.len()
    }

    fn eval(&self, psi: &[T]) -> Result<T> {
        self.variation(psi, &[])
    }
}

impl<T: Scalar> ExactFunctional<T> for PoissonFunctional<T> {
    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<T> {
        let d = self.intensity.len();
        for v in std::iter::once(y).chain(increments.iter().copied()) {
            if v.len() != d {
                return Err(Error::SpaceMismatch { expected: d, found: v.len() });
            }
        }
        let mass: T = self.intensity.iter().copied().sum();
        let base = (dot(&self.intensity, y) - mass).exp();
        Ok(increments.iter().fold(base, |acc, h| acc * dot(&self.intensity, h)))
    }
}

/// A map from test functions on an input space to test functions on an
/// output space, with exact differentials.
pub trait Operator<T: Scalar> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, y: &[T]) -> Result<Vec<T>>;
    /// `δ^n g(y; h_1, …, h_n)`, itself a test function on the output space.
    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<Vec<T>>;
}

/// `g(ψ)(x) = w(x) · H_x(ψ)`: one generating functional per output point,
/// scaled pointwise. With `H_x` the single-object measurement functional
/// and `w = η` this is the inner map `η G_{Z|x}(ψ|·)` of the Bayes update.
#[derive(Debug, Clone)]
pub struct KernelOperator<T> {
    pub weight: Vec<T>,
    pub families: Vec<MultiObjectDensity<T>>,
}

impl<T: Scalar> KernelOperator<T> {
    pub fn new(weight: Vec<T>, families: Vec<MultiObjectDensity<T>>) -> Result<Self> {
        if weight.len() != families.len() || families.is_empty() {
            return Err(Error::SpaceMismatch { expected: families.len(), found: weight.len() });
        }
        let d = families[0].dim();
        if let Some(f) = families.iter().find(|f| f.dim() != d) {
            return Err(Error::SpaceMismatch { expected: d, found: f.dim() });
        }
        Ok(Self { weight, families })
    }
}

impl<T: Scalar> Operator<T> for KernelOperator<T> {
    fn input_dim(&self) -> usize {
        self.families[0].dim()
    }

    fn output_dim(&self) -> usize {
        self.families.len()
    }

    fn apply(&self, y: &[T]) -> Result<Vec<T>> {
        self.variation(y, &[])
    }

    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<Vec<T>> {
        self.families
            .iter()
            .zip(&self.weight)
            .map(|(h, &w)| Ok(w * h.variation(y, increments)?))
            .collect()
    }
}

/// `g(y) = offset + A y`; every differential beyond the first vanishes.
#[derive(Debug, Clone)]
pub struct AffineOperator<T> {
    pub offset: Vec<T>,
    /// Row `x` holds the coefficients of output point `x`.
    pub matrix: Vec<Vec<T>>,
}

impl<T: Scalar> AffineOperator<T> {
    /// Pointwise multiplication `y ↦ h y`.
    pub fn multiply_by(h: &[T]) -> Self {
        let d = h.len();
        let matrix = (0..d)
            .map(|i| (0..d).map(|j| if i == j { h[i] } else { T::zero() }).collect())
            .collect();
        Self { offset: vec![T::zero(); d], matrix }
    }

    fn linear(&self, y: &[T]) -> Result<Vec<T>> {
        self.matrix
            .iter()
            .map(|row| {
                if row.len() != y.len() {
                    return Err(Error::SpaceMismatch { expected: row.len(), found: y.len() });
                }
                Ok(dot(row, y))
            })
            .collect()
    }
}

impl<T: Scalar> Operator<T> for AffineOperator<T> {
    fn input_dim(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    fn output_dim(&self) -> usize {
        self.offset.len()
    }

    fn apply(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(self.linear(y)?.into_iter().zip(&self.offset).map(|(a, &b)| a + b).collect())
    }

    fn variation(&self, y: &[T], increments: &[&[T]]) -> Result<Vec<T>> {
        match increments {
            [] => self.apply(y),
            [h] => self.linear(h),
            _ => Ok(vec![T::zero(); self.output_dim()]),
        }
    }
}

/// Step and extrapolation depth for [`numeric_differential`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericDiffOptions {
    /// Initial step `h`; each extrapolation level halves it.
    pub step: f64,
    /// Number of Richardson levels on top of the plain central difference.
    pub richardson_levels: usize,
}

impl Default for NumericDiffOptions {
    fn default() -> Self {
        Self { step: 0.1, richardson_levels: 3 }
    }
}

/// Mixed central difference `Σ_s (Π s_i) F(ψ + h Σ s_i η_i) / (2h)^n`.
fn central_difference<T: Scalar, F: Functional<T> + ?Sized>(
    f: &F,
    psi: &[T],
    increments: &[&[T]],
    h: T,
) -> Result<T> {
    let n = increments.len();
    let mut total = T::zero();
    let mut point = vec![T::zero(); psi.len()];
    for signs in 0u32..(1 << n) {
        point.copy_from_slice(psi);
        let mut sign = T::one();
        for (i, inc) in increments.iter().enumerate() {
            let s = if signs >> i & 1 == 1 { -T::one() } else { T::one() };
            sign *= s;
            for (p, &v) in point.iter_mut().zip(inc.iter()) {
                *p += s * h * v;
            }
        }
        let value = f.eval(&point)?;
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        total += sign * value;
    }
    Ok(total / (T::lit(2.0) * h).powi(n as i32))
}

/// Finite-difference approximation of `δ^n F(ψ; η_1, …, η_n)` by nested
/// central differences with Richardson extrapolation in `h²`.
///
/// Truncated generating functionals are polynomials, for which the
/// extrapolated estimate is exact up to round-off once the number of
/// levels covers the polynomial degree.
pub fn numeric_differential<T: Scalar, F: Functional<T> + ?Sized>(
    f: &F,
    psi: &[T],
    increments: &[&[T]],
    opts: NumericDiffOptions,
) -> Result<T> {
    let d = f.dim();
    for v in std::iter::once(psi).chain(increments.iter().copied()) {
        if v.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: v.len() });
        }
    }
    if increments.is_empty() {
        return f.eval(psi);
    }
    let levels = opts.richardson_levels;
    let mut table: Vec<T> = Vec::with_capacity(levels + 1);
    let mut h = T::lit(opts.step);
    for k in 0..=levels {
        let mut row = vec![central_difference(f, psi, increments, h)?];
        let mut factor = T::one();
        for j in 1..=k {
            factor *= T::lit(4.0);
            let improved = row[j - 1] + (row[j - 1] - table[j - 1]) / (factor - T::one());
            row.push(improved);
        }
        table = row;
        h /= T::lit(2.0);
    }
    Ok(*table.last().expect("at least one level"))
}

/// Variation of a composite `f(g(y))` by summing over set partitions of the
/// increments: each partition `π` contributes
/// `δ^{|π|} f(g(y); ξ_{π,1}, …, ξ_{π,|π|})` with
/// `ξ_{π,ω} = δ^{|ω|} g(y; increments in block ω)`.
///
/// `max_block` prunes partitions with larger blocks, which is sound when the
/// inner map has vanishing differentials beyond that order.
pub fn faa_di_bruno<T, F, G>(outer: &F, inner: &G, y: &[T], increments: &[&[T]], max_block: Option<usize>) -> Result<T>
where
    T: Scalar,
    F: ExactFunctional<T> + ?Sized,
    G: Operator<T> + ?Sized,
{
    let gy = inner.apply(y)?;
    let mut total = T::zero();
    let mut block_incs: Vec<&[T]> = Vec::with_capacity(increments.len());
    for pi in partitions(increments.len(), max_block) {
        let xis = pi
            .blocks()
            .iter()
            .map(|b| {
                block_incs.clear();
                block_incs.extend(b.iter().map(|&i| increments[i]));
                inner.variation(y, &block_incs)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[T]> = xis.iter().map(Vec::as_slice).collect();
        total += outer.variation(&gy, &refs)?;
    }
    Ok(total)
}

/// Variation of a product `f(y) g(y)`: a sum over every subset `Φ` of the
/// increments of `δ^{|Φ|} f(y; Φ) · δ^{n-|Φ|} g(y; rest)`.
pub fn leibniz<T, F, G>(f: &F, g: &G, y: &[T], increments: &[&[T]]) -> Result<T>
where
    T: Scalar,
    F: ExactFunctional<T> + ?Sized,
    G: ExactFunctional<T> + ?Sized,
{
    let mut total = T::zero();
    for split in subsets(increments.len()) {
        let kept: Vec<&[T]> = split.kept.iter().map(|&i| increments[i]).collect();
        let dropped: Vec<&[T]> = split.dropped.iter().map(|&i| increments[i]).collect();
        total += f.variation(y, &kept)? * g.variation(y, &dropped)?;
    }
    Ok(total)
}

/// `δ^n f(g(y); ξ_1(y), …, ξ_n(y))` where each increment is itself a
/// variation of the inner map, `ξ_i(y) = δ^{|B_i|} g(y; B_i)`.
pub fn variation_with_inner_increments<T, F, G>(f: &F, g: &G, y: &[T], blocks: &[Vec<&[T]>]) -> Result<T>
where
    T: Scalar,
    F: ExactFunctional<T> + ?Sized,
    G: Operator<T> + ?Sized,
{
    let gy = g.apply(y)?;
    let xis = blocks.iter().map(|b| g.variation(y, b)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[T]> = xis.iter().map(Vec::as_slice).collect();
    f.variation(&gy, &refs)
}

/// Differential along `η` of `y ↦ δ^n f(g(y); ξ_1(y), …, ξ_n(y))` with
/// `ξ_i(y) = δ^{|B_i|} g(y; B_i)`: the order-`n+1` term with the appended
/// increment `δg(y; η)`, plus one order-`n` term per increment with `ξ_i`
/// replaced by its own differential `δ^{|B_i|+1} g(y; B_i, η)`.
pub fn differential_of_variation<T, F, G>(f: &F, g: &G, y: &[T], blocks: &[Vec<&[T]>], eta: &[T]) -> Result<T>
where
    T: Scalar,
    F: ExactFunctional<T> + ?Sized,
    G: Operator<T> + ?Sized,
{
    let gy = g.apply(y)?;
    let mut xis = blocks.iter().map(|b| g.variation(y, b)).collect::<Result<Vec<_>>>()?;
    let appended = g.variation(y, &[eta])?;
    let mut total = {
        let mut refs: Vec<&[T]> = xis.iter().map(Vec::as_slice).collect();
        refs.push(&appended);
        f.variation(&gy, &refs)?
    };
    for (w, block) in blocks.iter().enumerate() {
        let mut extended = block.clone();
        extended.push(eta);
        let replaced = g.variation(y, &extended)?;
        let original = std::mem::replace(&mut xis[w], replaced);
        let refs: Vec<&[T]> = xis.iter().map(Vec::as_slice).collect();
        total += f.variation(&gy, &refs)?;
        xis[w] = original;
    }
    Ok(total)
}

/// Symbolic composite of a tensor functional with a [`KernelOperator`]:
/// the Janossy coefficients (up to `n_max`) of
/// `ψ ↦ F(g(ψ)) = Σ_n 1/n! Σ_x F_n(x) Π_i w(x_i) H_{x_i}(ψ)`.
///
/// Exact as long as `n_max` covers the degree of the composite.
pub fn compose<T: Scalar>(
    outer: &MultiObjectDensity<T>,
    inner: &KernelOperator<T>,
    n_max: usize,
) -> Result<MultiObjectDensity<T>> {
    if outer.dim() != inner.output_dim() {
        return Err(Error::SpaceMismatch { expected: outer.dim(), found: inner.output_dim() });
    }
    let space: Arc<FiniteSpace> = inner.families[0].space().clone();
    let d_out = outer.dim();
    let mut total = MultiObjectDensity::zeros(space.clone(), n_max)?;
    let mut inv_fact = T::one();
    for n in 0..=outer.n_max() {
        if n > 0 {
            inv_fact /= T::from_count(n);
        }
        let mut acc = MultiObjectDensity::zeros(space.clone(), n_max)?;
        let mut failure = None;
        crate::finite_pp::for_each_tuple(d_out, n, |idx, tuple| {
            if failure.is_some() {
                return;
            }
            let coef = outer.tensor(n)[idx];
            if coef == T::zero() {
                return;
            }
            let step = || -> Result<MultiObjectDensity<T>> {
                let mut prod = MultiObjectDensity::unit(space.clone(), 0)?;
                let mut scale = coef;
                for &x in tuple {
                    prod = MultiObjectDensity::product(&prod, &inner.families[x], n_max)?;
                    scale *= inner.weight[x];
                }
                Ok(prod.scale(scale))
            };
            match step().and_then(|term| acc.add(&term)) {
                Ok(sum) => acc = sum,
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        total = total.add(&acc.scale(inv_fact))?;
    }
    Ok(total.with_truncation_mass(T::zero()))
}
