//! Experiment configurations. JSON keys mirror the field names; every field
//! has a default so partial configs stay valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::OrderSchedule;

/// Which estimator a roster entry runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Plug-in at the full-sample moment.
    Plugin,
    /// Delete-one jackknife.
    Jackknife,
    /// Same-sample higher-order expansion (no splitting).
    Hodse,
    /// Iterated Gaussian-multiplier bootstrap.
    Ib,
    /// Blockwise base-estimator construction.
    Kl,
    /// Cross-fitted estimator with exact correction terms.
    CkFull,
    /// Cross-fitted permutation-randomized estimator.
    CkPre,
}

impl EstimatorKind {
    pub fn id(self) -> &'static str {
        match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Jackknife => "jackknife",
            EstimatorKind::Hodse => "hodse",
            EstimatorKind::Ib => "ib",
            EstimatorKind::Kl => "kl",
            EstimatorKind::CkFull => "ck_full",
            EstimatorKind::CkPre => "ck_pre",
        }
    }
}

/// One roster entry: an estimator kind and its expansion order (ignored by
/// plug-in and jackknife).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub order: usize,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, order: usize) -> Self {
        Self { kind, order }
    }

    /// Column label such as `ck_pre(o2)`.
    pub fn label(&self) -> String {
        match self.kind {
            EstimatorKind::Plugin | EstimatorKind::Jackknife => self.kind.id().to_string(),
            _ => format!("{}(o{})", self.kind.id(), self.order),
        }
    }
}

fn default_n_total() -> usize {
    1000
}

fn default_gamma_grid() -> Vec<f64> {
    (0..13).map(|i| 0.15 + 0.05 * i as f64).collect()
}

fn default_rho() -> f64 {
    0.6
}

fn default_replications() -> usize {
    100
}

fn default_seed() -> u64 {
    42
}

fn default_b() -> usize {
    1
}

fn default_ib_mc() -> usize {
    40
}

fn default_roster() -> Vec<EstimatorSpec> {
    use EstimatorKind::*;
    vec![
        EstimatorSpec::new(Plugin, 0),
        EstimatorSpec::new(Jackknife, 0),
        EstimatorSpec::new(Hodse, 2),
        EstimatorSpec::new(Kl, 2),
        EstimatorSpec::new(CkFull, 2),
        EstimatorSpec::new(CkPre, 2),
    ]
}

/// Configuration of the regression squared-error-ratio experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModelConfig {
    /// Total sample size; cross-fitted estimators split it in two halves.
    #[serde(rename = "N_total", default = "default_n_total")]
    pub n_total: usize,
    /// Dimension exponents; each gamma yields `d = floor(N_total^gamma)`.
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
    /// Covariate autocorrelation (`Sigma_jk = rho^|j-k|`).
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_roster")]
    pub roster: Vec<EstimatorSpec>,
    /// Number of random permutations per order for the randomized estimator.
    #[serde(default = "default_b")]
    pub b: usize,
    /// Monte Carlo branches per level of the iterated bootstrap.
    #[serde(default = "default_ib_mc")]
    pub ib_mc: usize,
}

impl Default for RegressionModelConfig {
    fn default() -> Self {
        Self {
            n_total: default_n_total(),
            gamma_grid: default_gamma_grid(),
            rho: default_rho(),
            replications: default_replications(),
            seed: default_seed(),
            roster: default_roster(),
            b: default_b(),
            ib_mc: default_ib_mc(),
        }
    }
}

impl RegressionModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total < 4 {
            return Err(Error::Config("N_total must be at least 4".into()));
        }
        if self.n_total % 2 != 0 {
            return Err(Error::Config("N_total must be even for cross-fitting".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::Config("gamma_grid must be nonempty".into()));
        }
        if self.gamma_grid.iter().any(|&g| !(0.0 < g && g < 1.0)) {
            return Err(Error::Config("every gamma must lie in (0, 1)".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("estimator roster must be nonempty".into()));
        }
        if !self.roster.iter().any(|e| e.kind == EstimatorKind::Plugin) {
            return Err(Error::Config("the roster must include the plug-in estimator".into()));
        }
        if self.b == 0 {
            return Err(Error::Config("b must be at least 1".into()));
        }
        if self.ib_mc == 0 {
            return Err(Error::Config("ib_mc must be at least 1".into()));
        }
        Ok(())
    }
}

/// Population gram matrix of the Gaussian design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    Identity,
    Ar1 { rho: f64 },
}

/// How normality-study errors are standardized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationSpec {
    /// True-parameter Monte Carlo estimate of the influence variance.
    OracleSigma {
        #[serde(default = "default_oracle_draws")]
        draws: usize,
    },
    /// Per-replication plug-in estimate of the influence variance.
    PluginSigma,
}

fn default_oracle_draws() -> usize {
    1_000_000
}

fn default_n_per_split() -> usize {
    1000
}

fn default_d() -> usize {
    10
}

fn default_sigma_spec() -> SigmaSpec {
    SigmaSpec::Ar1 { rho: 0.6 }
}

fn default_order() -> OrderSchedule {
    OrderSchedule::Fixed(2)
}

fn default_ks_replications() -> usize {
    500
}

fn default_standardization() -> StandardizationSpec {
    StandardizationSpec::OracleSigma { draws: default_oracle_draws() }
}

/// Configuration of the precision-functional normality study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramModelConfig {
    #[serde(default = "default_n_per_split")]
    pub n_per_split: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_sigma_spec")]
    pub sigma_spec: SigmaSpec,
    /// Left contrast direction; defaults to the first basis vector.
    #[serde(default)]
    pub eta1: Option<Vec<f64>>,
    /// Right contrast direction; defaults to the first basis vector.
    #[serde(default)]
    pub eta2: Option<Vec<f64>>,
    #[serde(default = "default_order")]
    pub order: OrderSchedule,
    #[serde(default = "default_ks_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_standardization")]
    pub standardization: StandardizationSpec,
}

impl Default for GramModelConfig {
    fn default() -> Self {
        Self {
            n_per_split: default_n_per_split(),
            d: default_d(),
            sigma_spec: default_sigma_spec(),
            eta1: None,
            eta2: None,
            order: default_order(),
            replications: default_ks_replications(),
            seed: default_seed(),
            standardization: default_standardization(),
        }
    }
}

impl GramModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_split == 0 || self.d == 0 {
            return Err(Error::Config("n_per_split and d must be positive".into()));
        }
        if self.replications == 0 {
            return Err(Error::EmptyStudy);
        }
        if let SigmaSpec::Ar1 { rho } = self.sigma_spec {
            if !(-1.0 < rho && rho < 1.0) {
                return Err(Error::Config(format!("AR(1) rho must lie in (-1, 1), got {rho}")));
            }
        }
        for (name, eta) in [("eta1", &self.eta1), ("eta2", &self.eta2)] {
            if let Some(v) = eta {
                if v.len() != self.d {
                    return Err(Error::Config(format!("{name} must have length d = {}", self.d)));
                }
                if v.iter().all(|&x| x == 0.0) {
                    return Err(Error::Config(format!("{name} must be nonzero")));
                }
            }
        }
        if self.n_per_split <= self.d {
            eprintln!(
                "warning: n_per_split = {} is not larger than d = {}; moment pilots may be singular",
                self.n_per_split, self.d
            );
        }
        Ok(())
    }
}
