//! Synthetic data generators.
//!
//! The regression model draws covariate rows from a stationary AR(1)
//! Gaussian process (`Sigma_jk = rho^|j-k|`, unit marginals) and responses
//! from the nonlinear heteroskedastic equation
//!
//! ```text
//!   Y = sin(X_1) + (X_2^2 - rho) / 2 + (1 + 0.3 X_1^2) eps,   eps ~ N(0,1).
//! ```
//!
//! Under this design the population projection of `Y` on `X` is
//! `exp(-1/2) e_1`: the sine term projects onto `X_1` through Stein's
//! identity (`E[X sin(X_1)] = Sigma e_1 E[cos(X_1)]`, and
//! `E[cos(X_1)] = exp(-1/2)` for a standard normal marginal), while the
//! even quadratic term and the noise are uncorrelated with `X`. The scalar
//! target `eta' beta` with `eta = e_1` is therefore `exp(-1/2)` in closed
//! form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::simlab::config::SigmaSpec;

/// Closed-form target `eta' beta = exp(-1/2)` of the regression experiment
/// (with `eta = e_1`).
pub fn true_beta_eta() -> f64 {
    (-0.5f64).exp()
}

/// One stationary AR(1) row: `x_0 = z_0`, `x_j = rho x_{j-1} +
/// sqrt(1 - rho^2) z_j`; exact unit marginals and `rho^|j-k|` correlation.
fn ar1_row(out: &mut [f64], rho: f64, rng: &mut impl Rng) {
    let scale = (1.0 - rho * rho).sqrt();
    let mut prev: f64 = rng.sample(StandardNormal);
    out[0] = prev;
    for slot in out.iter_mut().skip(1) {
        let innov: f64 = rng.sample(StandardNormal);
        prev = rho * prev + scale * innov;
        *slot = prev;
    }
}

/// I.i.d. rows from `N(0, Sigma)` for the supported gram specifications.
pub fn gen_gaussian(n: usize, d: usize, sigma: SigmaSpec, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        match sigma {
            SigmaSpec::Identity => {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            SigmaSpec::Ar1 { rho } => ar1_row(&mut row, rho, rng),
        }
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    x
}

/// Covariates and responses of the nonlinear heteroskedastic regression
/// model. Requires `d >= 2` (the response references the second coordinate).
pub fn gen_regression(
    n: usize,
    d: usize,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if d < 2 {
        return Err(Error::DimensionTooSmall { min: 2, got: d });
    }
    let x = gen_gaussian(n, d, SigmaSpec::Ar1 { rho }, rng);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let x1 = x[(i, 0)];
        let x2 = x[(i, 1)];
        let eps: f64 = rng.sample(StandardNormal);
        y[i] = x1.sin() + 0.5 * (x2 * x2 - rho) + (1.0 + 0.3 * x1 * x1) * eps;
    }
    Ok((x, y))
}

/// The explicit population gram matrix of a [`SigmaSpec`].
pub fn sigma_matrix(spec: SigmaSpec, d: usize) -> DMatrix<f64> {
    match spec {
        SigmaSpec::Identity => DMatrix::identity(d, d),
        SigmaSpec::Ar1 { rho } => {
            DMatrix::from_fn(d, d, |i, j| rho.powi((i as i32 - j as i32).abs()))
        }
    }
}
