//! Estimand-aligned analysis of stepped-wedge cluster-randomized trials.
//!
//! The crate fits working linear mixed models and GEEs to long-format trial
//! data, maps the fits to marginal treatment-effect estimands through
//! g-computation and period weights, and reports cluster-robust sandwich
//! inference. A Monte Carlo engine regenerates benchmark designs for
//! calibration studies.
//!
//! Numerical kernels that are pure algebra (the structured covariance inverse
//! and the period weights) are generic over the scalar type; see [`Scalar`].
//! The iterative fitters work in `f64`.

pub mod data_model;
pub mod design_algebra;
pub mod error;
pub mod gee;
mod linalg;
pub mod lmm;
pub mod report;
pub mod simulation;
mod stacked;
pub mod structured_cov;

pub use data_model::{ClusterInfo, ColumnMap, Diagnostic, ObsRecord, RandomizationSpec, TrialData};
pub use design_algebra::{
    saturated_cell, saturated_index, summary_weights, Adjustment, ModelDesign, StructureKind,
    SummaryKind, TreatmentEffectSpec,
};
pub use error::{Error, Result};
pub use gee::{
    estimate_estimands_gee, fit_gee, g_compute_mu, lmm_g_estimands, CorrelationKind, GeeFit,
    GeeOptions, Link, RobustnessCondition, StackedEstimates, WorkingCorrelation,
};
pub use lmm::{
    extract_estimands, fit_lmm, lrt_fit, lrt_structures, CovStructure, LmmFit, LmmOptions,
    SummaryRequest,
};
pub use report::{EstimandReport, EstimateRow, LrtResult, Scale};
pub use structured_cov::{StructuredInverse, VarianceComponents};

use num_traits::{FromPrimitive, Num};
use std::fmt::Debug;

/// Scalar types accepted by the generic algebra kernels.
///
/// Any field-like number works: `f32`, `f64`, and exact rationals such as
/// [`Exact`]. Operations needing logarithms additionally require
/// [`num_traits::Float`].
pub trait Scalar: Num + Clone + PartialOrd + FromPrimitive + Debug {}

impl<T: Num + Clone + PartialOrd + FromPrimitive + Debug> Scalar for T {}

/// Working precision of the fitters.
pub type Real = f64;
/// Exact arithmetic for weight identities.
pub type Exact = num_rational::BigRational;

pub type VarianceComponents64 = VarianceComponents<f64>;
pub type VarianceComponents32 = VarianceComponents<f32>;
pub type StructuredInverse64 = StructuredInverse<f64>;
pub type StructuredInverse32 = StructuredInverse<f32>;
pub type StructuredInverseExact = StructuredInverse<Exact>;

/// Two-sided 95% normal quantile used for every interval.
pub const Z_975: f64 = 1.959963984540054;
