//! Cross-fitted higher-order debiased estimation of smooth matrix
//! functionals.
//!
//! The plug-in estimate `f(moment)` of a smooth functional of a mean
//! parameter carries a nonlinearity bias that dominates in high dimension.
//! This crate removes it to a chosen order `s` by anchoring a Taylor-type
//! expansion at a pilot fitted on the complementary half-sample and replacing
//! each differential with a completely degenerate U-statistic of the matching
//! order; averaging the two half-sample roles restores first-order
//! efficiency. For matrix functionals whose derivatives are permutation sums
//! of factor chains, a permutation-randomized dynamic program evaluates the
//! corrections in `O(b n s^2)` algebra operations instead of `C(n, s)`
//! enumeration.
//!
//! Module map:
//!
//! * [`element`], [`form`], [`ustat`] — carrier elements, multilinear forms,
//!   complete U-statistics and exact enumeration oracles;
//! * [`estimator`] — the generic one-sided and cross-fitted estimator with
//!   order schedules;
//! * [`product_dp`] — the chain recursion, the permutation-randomized
//!   estimator, and exact low-order chain sums;
//! * [`functionals`] — precision contrast, regression projection, log-det,
//!   penalized inverse trace, and derivative validation;
//! * [`pilots`], [`baselines`] — moment pilots and competitor estimators;
//! * [`simlab`] — data generators, the squared-error-ratio experiment, and
//!   normality studies behind the `simlab` binary.

pub mod baselines;
pub mod element;
pub mod error;
pub mod estimator;
pub mod form;
pub mod functionals;
pub mod pilots;
pub mod product_dp;
pub mod rng;
pub mod simlab;
pub mod ustat;

pub use element::{Element, ElementKind, ElementSignature};
pub use error::{Error, Result};
pub use estimator::{
    cross_fit, one_sided, resolve_order, CrossFitReport, DerivativeFamily, OneSidedReport,
    OrderSchedule,
};
pub use form::KLinearForm;
pub use product_dp::{
    dp_chain, exact_cross_fit, exact_one_sided, fk_bruteforce, fk_pi, pre_cross_fit,
    pre_one_sided, PermutationPlan, ProductStructure,
};
pub use ustat::{complete_ustat, mean_element, FiniteSupportDistribution};
