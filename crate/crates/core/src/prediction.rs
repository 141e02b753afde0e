//! Time prediction of a multi-object density through a transition
//! functional: `p'_n(x) = Σ_m 1/m! Σ_y p_{n|m}(x | y) p_m(y)`, the scalar
//! product of the transition with the current density in its `y`
//! argument.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::finite_pp::{flat_index, for_each_tuple, FiniteSpace, MultiObjectDensity, MAX_ENTRIES};
use crate::scalar::{inverse_factorials, Scalar};

const TABLE_TOL: f64 = 1e-10;

/// Default bound on probability mass pushed above the truncation order by
/// one prediction.
pub const DEFAULT_PREDICT_TOL: f64 = 1e-9;

/// Explicit transition tables: for every input tuple `y` (of length up to
/// `n_in`) a density over output tuples of order `n_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTables<T> {
    space: Arc<FiniteSpace>,
    /// `columns[m][flat_index(y)]`
    columns: Vec<Vec<MultiObjectDensity<T>>>,
}

fn check_table_size(d: usize, n_in: usize, n_out: usize) -> Result<()> {
    let total = |n: usize| (0..=n).try_fold(0usize, |acc, k| acc.checked_add(d.checked_pow(k as u32)?));
    let entries = total(n_in).zip(total(n_out)).and_then(|(a, b)| a.checked_mul(b)).unwrap_or(usize::MAX);
    if entries > MAX_ENTRIES {
        return Err(Error::TooLarge { entries, limit: MAX_ENTRIES });
    }
    Ok(())
}

fn sorted_rep(d: usize, tuple: &[usize], scratch: &mut Vec<usize>) -> usize {
    scratch.clear();
    scratch.extend_from_slice(tuple);
    scratch.sort_unstable();
    flat_index(d, scratch)
}

impl<T: Scalar> TransitionTables<T> {
    /// `columns[m]` holds one density per ordered `m`-tuple `y` in
    /// row-major order. Each must be a probability density (stored mass
    /// plus recorded truncation mass equal to one), all of the same order,
    /// and permuting `y` must not change the column.
    pub fn new(space: Arc<FiniteSpace>, columns: Vec<Vec<MultiObjectDensity<T>>>) -> Result<Self> {
        let d = space.dim();
        if columns.is_empty() {
            return Err(Error::InvalidModel("transition needs at least the m = 0 column".into()));
        }
        let n_out = columns[0].first().map(|c| c.n_max()).unwrap_or(0);
        check_table_size(d, columns.len() - 1, n_out)?;
        let mut scratch = Vec::new();
        for (m, cols) in columns.iter().enumerate() {
            if cols.len() != d.pow(m as u32) {
                return Err(Error::InvalidModel(format!(
                    "{} columns for input cardinality {m}, expected {}",
                    cols.len(),
                    d.pow(m as u32)
                )));
            }
            for c in cols {
                if **c.space() != *space {
                    return Err(Error::SpaceMismatch { expected: d, found: c.dim() });
                }
                if c.n_max() != n_out {
                    return Err(Error::InvalidModel("transition columns differ in order".into()));
                }
                c.validate_probability(T::lit(TABLE_TOL))
                    .map_err(|e| Error::InvalidModel(format!("transition column: {e}")))?;
            }
            let mut bad = false;
            for_each_tuple(d, m, |idx, y| {
                let rep = sorted_rep(d, y, &mut scratch);
                let (a, b) = (&cols[idx], &cols[rep]);
                let close = a.tensors().iter().flatten().zip(b.tensors().iter().flatten()).all(|(&u, &v)| {
                    (u - v).abs() <= T::lit(1e-12) * T::one().max(u.abs())
                });
                bad |= !close;
            });
            if bad {
                return Err(Error::InvalidModel(format!("transition not symmetric in input tuples of length {m}")));
            }
        }
        Ok(Self { space, columns })
    }

    /// Every object stays where it is; nothing is born.
    pub fn identity(space: Arc<FiniteSpace>, n_max: usize) -> Result<Self> {
        let d = space.dim();
        check_table_size(d, n_max, n_max)?;
        let mut columns = Vec::with_capacity(n_max + 1);
        for m in 0..=n_max {
            let mut cols = Vec::with_capacity(d.pow(m as u32));
            let mut scratch = Vec::new();
            for_each_tuple(d, m, |_, y| {
                scratch.clear();
                scratch.extend_from_slice(y);
                scratch.sort_unstable();
                let target = scratch.clone();
                let col = MultiObjectDensity::from_fn(space.clone(), n_max, |x| {
                    if x == target.as_slice() {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .expect("size checked above");
                let mult = multiplicity_factorial::<T>(&target);
                cols.push(col.scale(mult));
            });
            columns.push(cols);
        }
        Ok(Self { space, columns })
    }

    pub fn space(&self) -> &Arc<FiniteSpace> {
        &self.space
    }

    /// Largest input cardinality.
    pub fn n_in(&self) -> usize {
        self.columns.len() - 1
    }

    /// Output truncation order.
    pub fn n_out(&self) -> usize {
        self.columns[0][0].n_max()
    }

    /// Output density given the input tuple `y`.
    pub fn column(&self, y: &[usize]) -> Result<&MultiObjectDensity<T>> {
        if y.len() > self.n_in() {
            return Err(Error::TupleTooLong { len: y.len(), n_max: self.n_in() });
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= self.space.dim()) {
            return Err(Error::PointOutOfRange { index: bad, size: self.space.dim() });
        }
        Ok(&self.columns[y.len()][flat_index(self.space.dim(), y)])
    }

    /// `p_{|x| | m}(x | y)`.
    pub fn entry(&self, x: &[usize], y: &[usize]) -> Result<T> {
        let col = self.column(y)?;
        col.janossy(x)
    }

    /// The functional over input tuples `y ↦ p_{|x| | |y|}(x | y)` for a
    /// fixed output tuple; its scalar product with the current density is
    /// the predicted Janossy coefficient at `x`.
    pub fn input_functional(&self, x: &[usize]) -> Result<MultiObjectDensity<T>> {
        if x.len() > self.n_out() {
            return Err(Error::TupleTooLong { len: x.len(), n_max: self.n_out() });
        }
        let d = self.space.dim();
        let xi = flat_index(d, x);
        let tensors = self
            .columns
            .iter()
            .map(|cols| cols.iter().map(|c| c.tensor(x.len())[xi]).collect())
            .collect();
        MultiObjectDensity::from_tensors(self.space.clone(), tensors)
    }
}

/// `Π_k (count of k)!`: the Janossy value of a point mass on a multiset.
fn multiplicity_factorial<T: Scalar>(sorted: &[usize]) -> T {
    let mut out = T::one();
    let mut run = 0usize;
    for (i, &v) in sorted.iter().enumerate() {
        run = if i > 0 && sorted[i - 1] == v { run + 1 } else { 1 };
        out *= T::from_count(run);
    }
    out
}

/// Independent survival and motion of every object plus an independent
/// birth process.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplicativeSpec<T> {
    /// `p_S(y)`.
    pub survival: Vec<T>,
    /// `motion[y][x] = f(x | y)`.
    pub motion: Vec<Vec<T>>,
    pub birth: MultiObjectDensity<T>,
}

impl<T: Scalar> MultiplicativeSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let d = self.birth.dim();
        if self.survival.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: self.survival.len() });
        }
        if self.motion.len() != d {
            return Err(Error::SpaceMismatch { expected: d, found: self.motion.len() });
        }
        if self.survival.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::InvalidModel("survival probabilities must lie in [0, 1]".into()));
        }
        for (y, row) in self.motion.iter().enumerate() {
            if row.len() != d {
                return Err(Error::SpaceMismatch { expected: d, found: row.len() });
            }
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&v| !(v >= T::zero())) || (total - T::one()).abs() > T::lit(TABLE_TOL) {
                return Err(Error::InvalidModel(format!("motion distribution from state {y} is not a probability vector")));
            }
        }
        self.birth
            .validate_probability(T::lit(TABLE_TOL))
            .map_err(|e| Error::InvalidModel(format!("birth process: {e}")))
    }
}

/// A transition model in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionModel<T> {
    Explicit(TransitionTables<T>),
    Multiplicative(MultiplicativeSpec<T>),
}

/// Expands a multiplicative spec into explicit tables: the column for `y`
/// is the birth process superposed with one Bernoulli(`p_S(y_i)`,
/// `f(·|y_i)`) process per input object, truncated at `n_max`. Mass pushed
/// above `n_max` is recorded per column as truncation mass.
///
/// Fails when the birth process alone already lost more than `tol` to its
/// own truncation.
pub fn build_multiplicative<T: Scalar>(spec: &MultiplicativeSpec<T>, n_max: usize, tol: f64) -> Result<TransitionTables<T>> {
    spec.validate()?;
    let space = spec.birth.space().clone();
    let d = space.dim();
    check_table_size(d, n_max, n_max)?;
    let birth = truncate(&spec.birth, n_max)?;
    let birth_lost = birth.truncation_mass().to_f64_lossy();
    if birth_lost > tol {
        return Err(Error::TruncationOverflow { mass: birth_lost, tol });
    }
    let factors = (0..d)
        .map(|y| MultiObjectDensity::bernoulli(space.clone(), spec.survival[y], &spec.motion[y]))
        .collect::<Result<Vec<_>>>()?;
    let mut columns = Vec::with_capacity(n_max + 1);
    for m in 0..=n_max {
        let mut reps = Vec::new();
        for_each_tuple(d, m, |idx, y| {
            if y.windows(2).all(|w| w[0] <= w[1]) {
                reps.push((idx, y.to_vec()));
            }
        });
        let built = reps
            .par_iter()
            .map(|(_, y)| {
                let mut col = birth.clone();
                for &yi in y {
                    col = MultiObjectDensity::product(&col, &factors[yi], n_max)?;
                }
                let lost = (T::one() - col.total_mass()).max(T::zero());
                Ok(col.with_truncation_mass(lost))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cols: Vec<Option<MultiObjectDensity<T>>> = vec![None; d.pow(m as u32)];
        for ((idx, _), col) in reps.iter().zip(built) {
            cols[*idx] = Some(col);
        }
        let mut scratch = Vec::new();
        let mut filled = Vec::with_capacity(cols.len());
        for_each_tuple(d, m, |idx, y| {
            let rep = sorted_rep(d, y, &mut scratch);
            filled.push(cols[if cols[idx].is_some() { idx } else { rep }].clone().expect("representative built"));
        });
        columns.push(filled);
    }
    Ok(TransitionTables { space, columns })
}

/// Copy of `p` truncated (or zero-padded) to order `n_max`; dropped mass is
/// added to the truncation mass.
fn truncate<T: Scalar>(p: &MultiObjectDensity<T>, n_max: usize) -> Result<MultiObjectDensity<T>> {
    let mut tensors: Vec<Vec<T>> = MultiObjectDensity::<T>::zeros(p.space().clone(), n_max)?.tensors().to_vec();
    for (n, t) in p.tensors().iter().enumerate().take(n_max + 1) {
        tensors[n].clone_from(t);
    }
    let dropped: T = p.cardinality_distribution().iter().skip(n_max + 1).copied().sum();
    let out = MultiObjectDensity::from_tensors(p.space().clone(), tensors)?;
    Ok(out.with_truncation_mass(p.truncation_mass() + dropped))
}

/// Predicted density with the default overflow tolerance.
pub fn predict<T: Scalar>(posterior: &MultiObjectDensity<T>, model: &TransitionModel<T>) -> Result<MultiObjectDensity<T>> {
    predict_with_tol(posterior, model, DEFAULT_PREDICT_TOL)
}

/// Chapman–Kolmogorov prediction. A multiplicative model is expanded at
/// the posterior's order. The mass the transition pushes above its output
/// order, weighted by the posterior, must not exceed `tol`; it is added to
/// the posterior's own truncation mass in the result.
pub fn predict_with_tol<T: Scalar>(
    posterior: &MultiObjectDensity<T>,
    model: &TransitionModel<T>,
    tol: f64,
) -> Result<MultiObjectDensity<T>> {
    let built;
    let tables = match model {
        TransitionModel::Explicit(t) => t,
        TransitionModel::Multiplicative(spec) => {
            built = build_multiplicative(spec, posterior.n_max(), tol)?;
            &built
        }
    };
    if **posterior.space() != *tables.space {
        return Err(Error::SpaceMismatch { expected: tables.space.dim(), found: posterior.dim() });
    }
    if posterior.n_max() > tables.n_in() {
        return Err(Error::TupleTooLong { len: posterior.n_max(), n_max: tables.n_in() });
    }
    let inv = inverse_factorials::<T>(posterior.n_max());
    let mut tensors: Vec<Vec<T>> = tables.columns[0][0].tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut dropped = T::zero();
    for (m, pm) in posterior.tensors().iter().enumerate() {
        for (yi, &p) in pm.iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let w = inv[m] * p;
            let col = &tables.columns[m][yi];
            for (dst, src) in tensors.iter_mut().zip(col.tensors()) {
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += w * b;
                }
            }
            dropped += w * col.truncation_mass();
        }
    }
    if dropped.to_f64_lossy() > tol {
        return Err(Error::TruncationOverflow { mass: dropped.to_f64_lossy(), tol });
    }
    Ok(MultiObjectDensity::from_tensors(posterior.space().clone(), tensors)?
        .with_truncation_mass(posterior.truncation_mass() + dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_pp::{scalar_product, PoissonSpec};
    use crate::testkit::{self, max_tensor_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(space: Arc<FiniteSpace>, p_s: Vec<f64>, motion: Vec<Vec<f64>>, birth: Option<Vec<f64>>) -> MultiplicativeSpec<f64> {
        let birth = match birth {
            Some(b) => MultiObjectDensity::poisson(space, &PoissonSpec { intensity: b, tail_tol: 0.0 }, Some(12)).unwrap(),
            None => MultiObjectDensity::unit(space, 0).unwrap(),
        };
        MultiplicativeSpec { survival: p_s, motion, birth }
    }

    #[test]
    fn everything_dies() {
        let s = testkit::space("x", 2);
        let t = build_multiplicative(&spec(s.clone(), vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], None), 3, 1e-9).unwrap();
        for m in 0..=3 {
            for_each_tuple(2, m, |_, y| {
                assert_eq!(t.entry(&[], y).unwrap(), 1.0);
            });
        }
    }

    #[test]
    fn identity_from_spec() {
        let s = testkit::space("x", 3);
        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let built = build_multiplicative(&spec(s.clone(), vec![1.0; 3], eye, None), 3, 1e-9).unwrap();
        let id = TransitionTables::identity(s, 3).unwrap();
        for m in 0..=3 {
            for_each_tuple(3, m, |_, y| {
                let (a, b) = (built.column(y).unwrap(), id.column(y).unwrap());
                assert!(max_tensor_diff(a, b) < 1e-15, "{y:?}");
            });
        }
    }

    #[test]
    fn single_object_expansion() {
        let s = testkit::space("x", 2);
        let t = build_multiplicative(&spec(s, vec![0.9, 0.9], vec![vec![0.5, 0.5], vec![0.5, 0.5]], None), 2, 1e-9).unwrap();
        assert!((t.entry(&[], &[0]).unwrap() - 0.1).abs() < 1e-15);
        assert!((t.entry(&[1], &[0]).unwrap() - 0.45).abs() < 1e-15);
        assert!((t.entry(&[0], &[1]).unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(t.entry(&[0, 1], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn identity_prediction() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = testkit::space("x", 3);
        let p = testkit::random_density(s.clone(), 3, 0.1, &mut r).unwrap();
        let out = predict(&p, &TransitionModel::Explicit(TransitionTables::identity(s, 3).unwrap())).unwrap();
        assert!(max_tensor_diff(&out, &p) < 1e-12);
    }

    #[test]
    fn empty_posterior_predicts_birth() {
        let s = testkit::space("x", 2);
        let sp = spec(s.clone(), vec![0.8, 0.6], vec![vec![0.7, 0.3], vec![0.2, 0.8]], Some(vec![0.2, 0.1]));
        let empty = MultiObjectDensity::unit(s.clone(), 8).unwrap();
        let out = predict(&empty, &TransitionModel::Multiplicative(sp.clone())).unwrap();
        let birth = truncate(&sp.birth, 8).unwrap();
        assert_eq!(out.tensors(), birth.tensors());
        let short = MultiObjectDensity::unit(s, 5).unwrap();
        assert!(matches!(predict(&short, &TransitionModel::Multiplicative(sp.clone())), Err(Error::TruncationOverflow { .. })));
    }

    #[test]
    fn poisson_in_poisson_out() {
        let s = testkit::space("x", 2);
        let mu = vec![0.1, 0.08];
        let b = vec![0.05, 0.04];
        let p_s = vec![0.9, 0.7];
        let f = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let post = MultiObjectDensity::poisson(s.clone(), &PoissonSpec { intensity: mu.clone(), tail_tol: 0.0 }, Some(9)).unwrap();
        let sp = spec(s, p_s.clone(), f.clone(), Some(b.clone()));
        let out = predict(&post, &TransitionModel::Multiplicative(sp)).unwrap();
        let got = out.intensity();
        for x in 0..2 {
            let expect = b[x] + (0..2).map(|y| p_s[y] * f[y][x] * mu[y]).sum::<f64>();
            assert!((got[x] - expect).abs() < 1e-9, "{} vs {expect}", got[x]);
        }
        assert!((out.total_mass() + out.truncation_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn predict_is_linear_and_normalized() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let s = testkit::space("x", 2);
        let motion = vec![testkit::random_stochastic(2, &mut r), testkit::random_stochastic(2, &mut r)];
        let sp = spec(s.clone(), vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)], motion, Some(vec![0.1, 0.05]));
        let model = TransitionModel::Explicit(build_multiplicative(&sp, 4, 1.0).unwrap());
        for _ in 0..10 {
            let p = testkit::random_density(s.clone(), 4, 0.1, &mut r).unwrap();
            let q = testkit::random_density(s.clone(), 4, 0.1, &mut r).unwrap();
            let a = r.gen_range(0.0..1.0);
            let mix = p.scale(a).add(&q.scale(1.0 - a)).unwrap();
            let (pp, pq) = (predict_with_tol(&p, &model, 1.0).unwrap(), predict_with_tol(&q, &model, 1.0).unwrap());
            let pm = predict_with_tol(&mix, &model, 1.0).unwrap();
            let lin = pp.scale(a).add(&pq.scale(1.0 - a)).unwrap();
            assert!(max_tensor_diff(&pm, &lin) < 1e-12);
            assert!((pp.total_mass() + pp.truncation_mass() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_product_consistency() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s = testkit::space("x", 2);
        let sp = spec(s.clone(), vec![0.7, 0.4], vec![vec![0.5, 0.5], vec![0.1, 0.9]], Some(vec![0.2, 0.3]));
        let tables = build_multiplicative(&sp, 3, 1.0).unwrap();
        let p = testkit::random_density(s, 3, 0.0, &mut r).unwrap();
        let out = predict_with_tol(&p, &TransitionModel::Explicit(tables.clone()), 1.0).unwrap();
        for n in 0..=3 {
            for_each_tuple(2, n, |idx, x| {
                let via = scalar_product(&tables.input_functional(x).unwrap(), &p).unwrap();
                assert!((via - out.tensor(n)[idx]).abs() < 1e-12);
            });
        }
    }

    #[test]
    fn overflow_and_validation_errors() {
        let s = testkit::space("x", 2);
        let sp = spec(s.clone(), vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], Some(vec![0.5, 0.5]));
        let full = MultiObjectDensity::from_fn(s.clone(), 2, |x| if x.len() == 2 { 1.0 } else { 0.0 }).unwrap();
        let (full, _) = full.normalized().unwrap();
        assert!(matches!(predict(&full, &TransitionModel::Multiplicative(sp.clone())), Err(Error::TruncationOverflow { .. })));
        let mut bad = sp.clone();
        bad.survival[0] = 1.5;
        assert!(matches!(build_multiplicative(&bad, 2, 1e-9), Err(Error::InvalidModel(_))));
        let mut bad = sp.clone();
        bad.motion[1] = vec![0.5, 0.6];
        assert!(matches!(build_multiplicative(&bad, 2, 1e-9), Err(Error::InvalidModel(_))));
        let heavy = MultiObjectDensity::poisson(s.clone(), &PoissonSpec { intensity: vec![2.0, 2.0], tail_tol: 0.0 }, Some(2)).unwrap();
        let sp2 = MultiplicativeSpec { birth: heavy, ..sp };
        assert!(matches!(build_multiplicative(&sp2, 2, 1e-9), Err(Error::TruncationOverflow { .. })));
        let other = testkit::space("y", 3);
        let p = MultiObjectDensity::<f64>::unit(other, 2).unwrap();
        assert!(matches!(
            predict(&p, &TransitionModel::Explicit(TransitionTables::identity(s, 2).unwrap())),
            Err(Error::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn explicit_tables_validation() {
        let s = testkit::space("x", 2);
        let id = TransitionTables::identity(s.clone(), 2).unwrap();
        assert!(TransitionTables::new(s.clone(), id.columns.clone()).is_ok());
        let mut cols = id.columns.clone();
        cols[1][0] = MultiObjectDensity::unit(s.clone(), 2).unwrap().scale(0.5);
        assert!(TransitionTables::new(s.clone(), cols).is_err());
        let mut cols = id.columns.clone();
        cols[2][1] = cols[2][0].clone();
        assert!(TransitionTables::new(s, cols).is_err());
    }
}
