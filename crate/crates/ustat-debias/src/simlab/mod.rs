//! Simulation laboratory: data generators for the regression and Gaussian
//! gram models, the squared-error-ratio experiment, normality studies, and
//! report emission. The `simlab` binary is a thin front end over
//! [`run_ratio_experiment`] and [`run_ks_study`].

pub mod config;
pub mod datagen;
pub mod emit;
pub mod normality;
pub mod ratio;

pub use config::{
    EstimatorKind, EstimatorSpec, GramModelConfig, RegressionModelConfig, SigmaSpec,
    StandardizationSpec,
};
pub use datagen::{gen_gaussian, gen_regression, sigma_matrix, true_beta_eta};
pub use emit::{
    emit_ks_report, emit_ratio_table, format_sig, ks_report_to_string, ratio_table_to_string,
    write_output, EmitFormat,
};
pub use normality::{
    ks_distance_to_normal, oracle_sigma, run_ks_study, KSReport, PrecisionOracleModel,
    Standardization,
};
pub use ratio::{run_ratio_experiment, RatioCell, RatioRow, RatioTable};
