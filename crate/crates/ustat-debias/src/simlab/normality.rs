//! Desk-scale normality studies for the precision functional.
//!
//! Each replication draws `2 n` Gaussian rows, computes the cross-fitted
//! order-`s` debiased estimate of `eta1' Sigma^-1 eta2`, and standardizes the
//! error by `sqrt(N) / sigma` with `sigma` the influence-function standard
//! deviation. The study reports the Kolmogorov-Smirnov distance between the
//! empirical distribution of the standardized errors and the standard normal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::estimator::{resolve_order, CrossFitReport};
use crate::functionals::{build_precision_with_order, PrecisionSpec};
use crate::pilots::{floor_element, DEFAULT_EIG_FLOOR};
use crate::product_dp::exact_one_sided;
use crate::rng;
use crate::simlab::config::{GramModelConfig, StandardizationSpec};
use crate::simlab::datagen::{gen_gaussian, sigma_matrix};
use crate::ustat::mean_element;

/// The standardization actually applied to a study's errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    OracleSigma { value: f64 },
    PluginSigma,
}

/// Output of a normality study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSReport {
    pub estimator: String,
    pub d: usize,
    pub n_per_split: usize,
    pub s: usize,
    pub replications: usize,
    pub ks_statistic: f64,
    pub standardization: Standardization,
    pub seed: u64,
}

/// The true-parameter model behind a precision study: enough to draw fresh
/// observations and evaluate the influence function exactly.
#[derive(Clone, Debug)]
pub struct PrecisionOracleModel {
    pub sigma: DMatrix<f64>,
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
}

/// Monte Carlo estimate of the influence-function variance
/// `Var(eta1' Sigma^-1 X X' Sigma^-1 eta2)` under `X ~ N(0, Sigma)`,
/// together with the standard error of the variance estimate.
pub fn oracle_sigma(model: &PrecisionOracleModel, mc_draws: usize, seed: u64) -> Result<(f64, f64)> {
    if model.eta1.norm() == 0.0 || model.eta2.norm() == 0.0 {
        return Err(Error::Config("oracle directions must be nonzero".into()));
    }
    if mc_draws < 2 {
        return Err(Error::Config("oracle needs at least 2 draws".into()));
    }
    let d = model.sigma.nrows();
    let chol = model.sigma.clone().cholesky().ok_or(Error::SingularInput)?;
    let u = chol.solve(&model.eta1);
    let w = chol.solve(&model.eta2);
    let l = chol.l();

    let mut stream = rng::stream(seed, &[rng::tags::ORACLE]);
    let mut z = DVector::zeros(d);
    let (mut s1, mut s2, mut s3, mut s4) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..mc_draws {
        for zi in z.iter_mut() {
            *zi = stream.sample(StandardNormal);
        }
        let x = &l * &z;
        let v = u.dot(&x) * w.dot(&x);
        s1 += v;
        s2 += v * v;
        s3 += v * v * v;
        s4 += v * v * v * v;
    }
    let m = mc_draws as f64;
    let mean = s1 / m;
    let var = s2 / m - mean * mean;
    // central fourth moment via raw moments
    let mu4 = s4 / m - 4.0 * mean * (s3 / m) + 6.0 * mean * mean * (s2 / m)
        - 3.0 * mean.powi(4);
    let se_var = ((mu4 - var * var).max(0.0) / m).sqrt();
    Ok((var, se_var))
}

/// One-sample Kolmogorov-Smirnov distance between the values and the
/// standard normal CDF.
pub fn ks_distance_to_normal(values: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite standardized errors"));
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, &z) in sorted.iter().enumerate() {
        let cdf = normal.cdf(z);
        sup = sup.max(cdf - i as f64 / n).max((i + 1) as f64 / n - cdf);
    }
    sup
}

fn direction(v: &Option<Vec<f64>>, d: usize) -> DVector<f64> {
    match v {
        Some(values) => DVector::from_column_slice(values),
        None => {
            let mut e = DVector::zeros(d);
            e[0] = 1.0;
            e
        }
    }
}

/// Run the precision-functional normality study described by `cfg`.
pub fn run_ks_study(cfg: &GramModelConfig) -> Result<KSReport> {
    cfg.validate()?;
    let d = cfg.d;
    let n = cfg.n_per_split;
    let eta1 = direction(&cfg.eta1, d);
    let eta2 = direction(&cfg.eta2, d);
    let s = resolve_order(cfg.order, n);

    let spec = PrecisionSpec::new(eta1.clone(), eta2.clone())?;
    let max_order = s.max(crate::functionals::DEFAULT_MAX_ORDER);
    let (family, structure) = build_precision_with_order(&spec, max_order)?;
    let s = s.min(family.max_order());

    let sigma_pop = sigma_matrix(cfg.sigma_spec, d);
    let truth = {
        let chol = sigma_pop.clone().cholesky().ok_or(Error::SingularInput)?;
        eta1.dot(&chol.solve(&eta2))
    };

    let oracle = match cfg.standardization {
        StandardizationSpec::OracleSigma { draws } => {
            let model = PrecisionOracleModel {
                sigma: sigma_pop.clone(),
                eta1: eta1.clone(),
                eta2: eta2.clone(),
            };
            let (var, _se) = oracle_sigma(&model, draws, cfg.seed)?;
            Some(var.sqrt())
        }
        StandardizationSpec::PluginSigma => None,
    };

    let errors: Vec<f64> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let mut stream = rng::stream(cfg.seed, &[rng::tags::DATA, rep as u64]);
            let x = gen_gaussian(2 * n, d, cfg.sigma_spec, &mut stream);

            let elements: Vec<Element> = (0..2 * n)
                .map(|i| {
                    let row = x.row(i).transpose();
                    Element::Matrix(&row * row.transpose())
                })
                .collect();
            let (part1, part2) = (&elements[..n], &elements[n..]);
            let pilot_of = |part: &[Element]| -> Result<Element> {
                floor_element(&mean_element(part)?, DEFAULT_EIG_FLOOR)
            };
            let side_a = exact_one_sided(&family, &structure, &pilot_of(part2)?, part1, s)?;
            let side_b = exact_one_sided(&family, &structure, &pilot_of(part1)?, part2, s)?;
            let estimate = CrossFitReport::new(side_a, side_b).value;

            let sigma = match oracle {
                Some(sd) => sd,
                None => {
                    // plug-in influence variance at the full-sample moment
                    let moment = floor_element(
                        &mean_element(&elements)?,
                        DEFAULT_EIG_FLOOR,
                    )?;
                    let chol = moment
                        .as_matrix()?
                        .clone()
                        .cholesky()
                        .ok_or(Error::SingularInput)?;
                    let u = chol.solve(&eta1);
                    let w = chol.solve(&eta2);
                    let vals: Vec<f64> = (0..2 * n)
                        .map(|i| {
                            let row = x.row(i).transpose();
                            u.dot(&row) * w.dot(&row)
                        })
                        .collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / vals.len() as f64)
                        .sqrt()
                }
            };
            Ok(((2 * n) as f64).sqrt() * (estimate - truth) / sigma)
        })
        .collect::<Result<_>>()?;

    Ok(KSReport {
        estimator: format!("ck_full(o{s})"),
        d,
        n_per_split: n,
        s,
        replications: cfg.replications,
        ks_statistic: ks_distance_to_normal(&errors),
        standardization: match (cfg.standardization, oracle) {
            (StandardizationSpec::OracleSigma { .. }, Some(sd)) => {
                Standardization::OracleSigma { value: sd }
            }
            _ => Standardization::PluginSigma,
        },
        seed: cfg.seed,
    })
}
