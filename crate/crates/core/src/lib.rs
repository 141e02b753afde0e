//! Exact multi-object Bayesian filtering on finite state and observation
//! spaces.
//!
//! Point processes are stored as truncated Janossy tensors over a
//! [`FiniteSpace`]. Because every integral becomes a finite sum, every
//! Gâteaux differential of a probability generating functional is an exact
//! coefficient shift, so the partition-sum Bayes updates in [`bayes`] can be
//! checked term by term against a brute-force evaluation of Bayes' rule.
//!
//! All numerical code is generic over a [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the command-line
//! front end uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod combinatorics;
pub mod error;
pub mod finite_pp;
pub mod functional_calculus;
pub mod logspace;
pub mod prediction;
pub mod scalar;
pub mod testkit;

pub use bayes::{ClutterProcess, MeasurementSet, ObservationKernel, Posterior, UpdateOptions};
pub use combinatorics::{bell, partitions, subsets, Partition, SubsetSplit};
pub use error::{Error, Result};
pub use finite_pp::{FiniteSpace, MultiObjectDensity, PoissonSpec, TestFunction};
pub use prediction::{MultiplicativeSpec, TransitionModel, TransitionTables};

pub use scalar::Scalar;

/// Double-precision multi-object density.
pub type Density = MultiObjectDensity<f64>;
/// Single-precision multi-object density.
pub type DensityF32 = MultiObjectDensity<f32>;
/// Double-precision test function.
pub type Test = TestFunction<f64>;
/// Double-precision observation kernel.
pub type Kernel = ObservationKernel<f64>;
/// Double-precision clutter process.
pub type Clutter = ClutterProcess<f64>;
/// Double-precision posterior.
pub type PosteriorF64 = Posterior<f64>;
/// Double-precision transition model.
pub type Transition = TransitionModel<f64>;
