//! Concrete derivative families and their chain realizations.
//!
//! Four functionals of a mean parameter are provided, each as a
//! [`DerivativeFamily`] (value, symmetric derivative forms, domain guard)
//! paired with a [`ProductStructure`] for the dynamic-programming path:
//!
//! * precision contrast `omega(S) = eta1' S^-1 eta2` on gram matrices, with
//!   `D^k omega(H)[h_1..h_k] = (-1)^k sum_pi eta1' H^-1 h_pi(1) H^-1 ..
//!   h_pi(k) H^-1 eta2`;
//! * regression projection `beta_eta(A, B) = eta' A^-1 B` on moment pairs,
//!   with `D^k beta_eta(H)[h_1..h_k] = (-1)^k sum_pi eta' A^-1 a_pi(1)
//!   A^-1 .. A^-1 (a_pi(k) A^-1 B - b_pi(k))`; its chain realization embeds
//!   pair increments `(a, b)` into `(d+1) x (d+1)` matrices `[[a, -b],[0,0]]`
//!   so that the terminal factor reproduces `a A^-1 B - b` exactly;
//! * matrix entropy `logdet(A)` with
//!   `D^k f(A)[..] = ((-1)^(k-1)/k) sum_sigma tr(A^-1 h_sigma(1) .. A^-1
//!   h_sigma(k))`;
//! * penalized inverse trace `f(A) = tr(B (A - zI)^-1)` for real `z <= 0`.
//!
//! A degree-2 polynomial functional is included for exactness tests, along
//! with central finite differences to validate the analytic forms.

use itertools::Itertools;
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::element::{Element, ElementSignature};
use crate::error::{Error, Result};
use crate::estimator::DerivativeFamily;
use crate::form::KLinearForm;
use crate::product_dp::{LeftFunctional, OrderStructure, ProductStructure};

/// Default maximum derivative order carried by the built families.
pub const DEFAULT_MAX_ORDER: usize = 8;

/// Relative eigenvalue floor of the SPD domain guards.
pub const DOMAIN_EIG_FLOOR: f64 = 1e-8;

/// Direction pair for the precision contrast `eta1' S^-1 eta2`.
#[derive(Clone, Debug)]
pub struct PrecisionSpec {
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
}

impl PrecisionSpec {
    pub fn new(eta1: DVector<f64>, eta2: DVector<f64>) -> Result<Self> {
        if eta1.len() != eta2.len() {
            return Err(Error::DimensionMismatch { expected: eta1.len(), got: eta2.len() });
        }
        if eta1.norm() == 0.0 || eta2.norm() == 0.0 {
            return Err(Error::Config("direction vectors must be nonzero".into()));
        }
        Ok(Self { eta1, eta2 })
    }

    /// Both directions equal to the first basis vector.
    pub fn e1(dim: usize) -> Self {
        let mut e = DVector::zeros(dim);
        e[0] = 1.0;
        Self { eta1: e.clone(), eta2: e }
    }
}

/// Direction for the regression projection `eta' beta`.
#[derive(Clone, Debug)]
pub struct RegressionSpec {
    pub eta: DVector<f64>,
}

impl RegressionSpec {
    pub fn new(eta: DVector<f64>) -> Result<Self> {
        if eta.norm() == 0.0 {
            return Err(Error::Config("direction vector must be nonzero".into()));
        }
        Ok(Self { eta })
    }

    pub fn e1(dim: usize) -> Self {
        let mut e = DVector::zeros(dim);
        e[0] = 1.0;
        Self { eta: e }
    }
}

/// Weight matrix and real shift for `tr(B (A - zI)^-1)`.
#[derive(Clone, Debug)]
pub struct StieltjesSpec {
    pub b_mat: DMatrix<f64>,
    pub z: f64,
}

impl StieltjesSpec {
    /// Real arithmetic restricts the shift to `z <= 0`, which keeps `A - zI`
    /// positive definite on the SPD domain.
    pub fn new(b_mat: DMatrix<f64>, z: f64) -> Result<Self> {
        if !b_mat.is_square() {
            return Err(Error::DimensionMismatch { expected: b_mat.nrows(), got: b_mat.ncols() });
        }
        if z > 0.0 {
            return Err(Error::Config(format!("shift z must be <= 0, got {z}")));
        }
        Ok(Self { b_mat, z })
    }
}

fn spd_guard(m: &DMatrix<f64>) -> Result<()> {
    // fast path: a Cholesky probe of M - floor I with the row-sum upper
    // bound on the operator norm; the exact eigenvalue check only runs when
    // the probe fails
    let norm_upper = m.abs().column_sum().max().max(1.0);
    let probe = m - DMatrix::identity(m.nrows(), m.ncols()) * (DOMAIN_EIG_FLOOR * norm_upper);
    if Cholesky::new(probe).is_some() {
        return Ok(());
    }
    let sym = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &ev in sym.eigenvalues.iter() {
        lo = lo.min(ev);
        hi = hi.max(ev.abs());
    }
    if lo <= DOMAIN_EIG_FLOOR * hi.max(1.0) {
        return Err(Error::SingularInput);
    }
    Ok(())
}

fn cholesky_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| c.inverse()).ok_or(Error::SingularInput)
}

/// Sum over all argument permutations of a chain evaluator, with the
/// short-cut `k! * chain(identity)` when the argument list is constant.
fn permutation_sum(args: &[&Element], mut chain: impl FnMut(&[usize]) -> f64) -> f64 {
    let k = args.len();
    let identity: Vec<usize> = (0..k).collect();
    let all_equal = k > 1 && args.windows(2).all(|w| w[0] == w[1]);
    if all_equal {
        let factorial: f64 = (1..=k).map(|i| i as f64).product();
        return factorial * chain(&identity);
    }
    if k == 1 {
        return chain(&identity);
    }
    identity.iter().copied().permutations(k).map(|p| chain(&p)).sum()
}

/// Precision contrast family and its chain structure.
///
/// The structure realizes `Lambda_k(Y) = (-1)^k eta1' Y eta2` with every
/// factor equal to `x^-1`.
pub fn build_precision(spec: &PrecisionSpec) -> Result<(DerivativeFamily, ProductStructure)> {
    build_precision_with_order(spec, DEFAULT_MAX_ORDER)
}

pub fn build_precision_with_order(
    spec: &PrecisionSpec,
    max_order: usize,
) -> Result<(DerivativeFamily, ProductStructure)> {
    let dim = spec.eta1.len();
    let signature = ElementSignature::dense(dim);
    let (eta1, eta2) = (spec.eta1.clone(), spec.eta2.clone());

    let value = {
        let (eta1, eta2) = (eta1.clone(), eta2.clone());
        move |x: &Element| -> Result<f64> {
            let m = x.as_matrix()?;
            let chol = Cholesky::new(m.clone()).ok_or(Error::SingularInput)?;
            Ok(eta1.dot(&chol.solve(&eta2)))
        }
    };

    let derivative = {
        let (eta1, eta2) = (eta1.clone(), eta2.clone());
        move |x: &Element, k: usize| -> Result<KLinearForm> {
            let inv = cholesky_inverse(x.as_matrix()?)?;
            let u = (eta1.transpose() * &inv).transpose(); // x^-1 eta1 (x symmetric in use)
            let v = &inv * &eta2;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            Ok(KLinearForm::new(k, true, ElementSignature::dense(dim), move |args| {
                sign * permutation_sum(args, |perm| {
                    let mut row = u.transpose();
                    for (slot, &p) in perm.iter().enumerate() {
                        row = row * args[p].as_matrix().expect("checked dense");
                        if slot + 1 < perm.len() {
                            row = row * &inv;
                        }
                    }
                    (row * &v)[(0, 0)]
                })
            }))
        }
    };

    let family = DerivativeFamily::new(
        signature,
        max_order,
        value,
        derivative,
        |x| spd_guard(x.as_matrix()?),
    );

    let structure = ProductStructure::new_matrix(max_order, signature, move |x, k| {
        let inv = cholesky_inverse(x.as_matrix()?)?;
        let weight = if k % 2 == 0 { 1.0 } else { -1.0 };
        Ok(OrderStructure {
            lam: LeftFunctional::Bilinear { left: eta1.clone(), right: eta2.clone(), weight },
            factors: vec![inv; k + 1],
        })
    });

    Ok((family, structure))
}

/// Embed a moment-pair increment `(a, b)` as the `(d+1) x (d+1)` block
/// matrix `[[a, -b], [0, 0]]`; the carrier on which the regression chain
/// structure operates.
pub fn augment_pair_increment(increment: &Element) -> Result<DMatrix<f64>> {
    let (a, b) = increment.as_pair()?;
    let d = a.nrows();
    let mut out = DMatrix::zeros(d + 1, d + 1);
    out.view_mut((0, 0), (d, d)).copy_from(a);
    for i in 0..d {
        out[(i, d)] = -b[i];
    }
    Ok(out)
}

/// Regression projection family on moment pairs, with the chain structure on
/// augmented matrices.
pub fn build_regression(spec: &RegressionSpec) -> Result<(DerivativeFamily, ProductStructure)> {
    build_regression_with_order(spec, DEFAULT_MAX_ORDER)
}

pub fn build_regression_with_order(
    spec: &RegressionSpec,
    max_order: usize,
) -> Result<(DerivativeFamily, ProductStructure)> {
    let dim = spec.eta.len();
    let signature = ElementSignature::pair(dim);
    let eta = spec.eta.clone();

    let value = {
        let eta = eta.clone();
        move |x: &Element| -> Result<f64> {
            let (a, b) = x.as_pair()?;
            let chol = Cholesky::new(a.clone()).ok_or(Error::SingularInput)?;
            Ok(eta.dot(&chol.solve(b)))
        }
    };

    let derivative = {
        let eta = eta.clone();
        move |x: &Element, k: usize| -> Result<KLinearForm> {
            let (a_mat, b_vec) = x.as_pair()?;
            let inv = cholesky_inverse(a_mat)?;
            let u = (eta.transpose() * &inv).transpose(); // A^-1 eta
            let c = &inv * b_vec; // A^-1 B
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            Ok(KLinearForm::new(k, true, ElementSignature::pair(dim), move |args| {
                sign * permutation_sum(args, |perm| {
                    let mut row = u.transpose();
                    for (slot, &p) in perm.iter().enumerate() {
                        let (a_j, b_j) = args[p].as_pair().expect("checked pair");
                        if slot + 1 < perm.len() {
                            row = row * a_j;
                            row = row * &inv;
                        } else {
                            // terminal slot contributes a A^-1 B - b
                            return (&row * a_j * &c)[(0, 0)] - (&row * b_j)[(0, 0)];
                        }
                    }
                    unreachable!("terminal slot returns")
                })
            }))
        }
    };

    let family = DerivativeFamily::new(signature, max_order, value, derivative, |x| {
        spd_guard(x.as_pair()?.0)
    });

    let structure = ProductStructure::new_embedded(
        max_order,
        signature,
        |increment| augment_pair_increment(increment).expect("pair carrier"),
        move |x, k| {
            let (a_mat, b_vec) = x.as_pair()?;
            let d = a_mat.nrows();
            let inv = cholesky_inverse(a_mat)?;

            let mut interior = DMatrix::zeros(d + 1, d + 1);
            interior.view_mut((0, 0), (d, d)).copy_from(&inv);

            let mut terminal = DMatrix::zeros(d + 1, d + 1);
            let inv_b = &inv * b_vec;
            for i in 0..d {
                terminal[(i, d)] = inv_b[i];
            }
            terminal[(d, d)] = 1.0;

            let mut left = DVector::zeros(d + 1);
            let inv_eta = &inv * &eta;
            for i in 0..d {
                left[i] = inv_eta[i];
            }
            let mut right = DVector::zeros(d + 1);
            right[d] = 1.0;

            let weight = if k % 2 == 0 { 1.0 } else { -1.0 };
            let mut factors = vec![DMatrix::identity(d + 1, d + 1)];
            for _ in 1..k {
                factors.push(interior.clone());
            }
            factors.push(terminal);
            Ok(OrderStructure {
                lam: LeftFunctional::Bilinear { left, right, weight },
                factors,
            })
        },
    );

    Ok((family, structure))
}

/// Matrix entropy `logdet(A)` on SPD matrices.
pub fn build_logdet(dim: usize) -> (DerivativeFamily, ProductStructure) {
    build_logdet_with_order(dim, DEFAULT_MAX_ORDER)
}

pub fn build_logdet_with_order(
    dim: usize,
    max_order: usize,
) -> (DerivativeFamily, ProductStructure) {
    let signature = ElementSignature::dense(dim);

    let value = move |x: &Element| -> Result<f64> {
        let m = x.as_matrix()?;
        let chol = Cholesky::new(m.clone()).ok_or(Error::NonPositiveDeterminant)?;
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    };

    let derivative = move |x: &Element, k: usize| -> Result<KLinearForm> {
        let inv = cholesky_inverse(x.as_matrix()?)?;
        let weight = if k % 2 == 0 { -1.0 } else { 1.0 } / k as f64;
        Ok(KLinearForm::new(k, true, ElementSignature::dense(dim), move |args| {
            weight
                * permutation_sum(args, |perm| {
                    let mut acc = &inv * args[perm[0]].as_matrix().expect("checked dense");
                    for &p in &perm[1..] {
                        acc = acc * &inv;
                        acc = acc * args[p].as_matrix().expect("checked dense");
                    }
                    acc.trace()
                })
        }))
    };

    let family = DerivativeFamily::new(signature, max_order, value, derivative, |x| {
        spd_guard(x.as_matrix()?)
    });

    let structure = ProductStructure::new_matrix(max_order, signature, move |x, k| {
        let inv = cholesky_inverse(x.as_matrix()?)?;
        let weight = if k % 2 == 0 { -1.0 } else { 1.0 } / k as f64;
        let mut factors = vec![inv.clone()];
        for _ in 1..k {
            factors.push(inv.clone());
        }
        factors.push(DMatrix::identity(x.dim(), x.dim()));
        Ok(OrderStructure { lam: LeftFunctional::WeightedTrace { weight }, factors })
    });

    (family, structure)
}

/// Penalized inverse trace `f(A) = tr(B (A - zI)^-1)` with real `z <= 0`.
pub fn build_stieltjes(spec: &StieltjesSpec) -> Result<(DerivativeFamily, ProductStructure)> {
    build_stieltjes_with_order(spec, DEFAULT_MAX_ORDER)
}

pub fn build_stieltjes_with_order(
    spec: &StieltjesSpec,
    max_order: usize,
) -> Result<(DerivativeFamily, ProductStructure)> {
    let dim = spec.b_mat.nrows();
    let signature = ElementSignature::dense(dim);
    let z = spec.z;
    let b_mat = spec.b_mat.clone();

    let resolvent = move |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let shifted = m - DMatrix::identity(m.nrows(), m.nrows()) * z;
        Cholesky::new(shifted).map(|c| c.inverse()).ok_or(Error::SingularShift)
    };

    let value = {
        let b_mat = b_mat.clone();
        let resolvent = resolvent.clone();
        move |x: &Element| -> Result<f64> {
            let r = resolvent(x.as_matrix()?)?;
            Ok((&b_mat * r).trace())
        }
    };

    let derivative = {
        let b_mat = b_mat.clone();
        let resolvent = resolvent.clone();
        move |x: &Element, k: usize| -> Result<KLinearForm> {
            let r = resolvent(x.as_matrix()?)?;
            let br = &b_mat * &r;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let r_inner = r.clone();
            Ok(KLinearForm::new(k, true, ElementSignature::dense(dim), move |args| {
                sign * permutation_sum(args, |perm| {
                    let mut acc = &br * args[perm[0]].as_matrix().expect("checked dense");
                    for &p in &perm[1..] {
                        acc = acc * &r_inner;
                        acc = acc * args[p].as_matrix().expect("checked dense");
                    }
                    (acc * &r_inner).trace()
                })
            }))
        }
    };

    let guard = {
        let resolvent = resolvent.clone();
        move |x: &Element| -> Result<()> {
            let m = x.as_matrix()?;
            let max_asym = (m - m.transpose()).abs().max();
            if max_asym > 1e-8 * m.abs().max().max(1.0) {
                return Err(Error::NonSymmetric);
            }
            resolvent(m).map(|_| ())
        }
    };

    let family = DerivativeFamily::new(signature, max_order, value, derivative, guard);

    let structure = ProductStructure::new_matrix(max_order, signature, move |x, k| {
        let r = resolvent(x.as_matrix()?)?;
        let weight = if k % 2 == 0 { 1.0 } else { -1.0 };
        let mut factors = vec![&b_mat * &r];
        for _ in 1..k {
            factors.push(r.clone());
        }
        factors.push(r.clone());
        Ok(OrderStructure { lam: LeftFunctional::WeightedTrace { weight }, factors })
    });

    Ok((family, structure))
}

/// Degree-2 polynomial functional `f(S) = eta1' S^2 eta2` with exact
/// derivatives and `D^k = 0` for `k >= 3`; the driver for the polynomial
/// exactness checks.
pub fn quadratic_test_functional(eta1: DVector<f64>, eta2: DVector<f64>) -> DerivativeFamily {
    assert_eq!(eta1.len(), eta2.len());
    assert!(eta1.norm() > 0.0 && eta2.norm() > 0.0, "directions must be nonzero");
    let dim = eta1.len();
    let signature = ElementSignature::dense(dim);

    let value = {
        let (eta1, eta2) = (eta1.clone(), eta2.clone());
        move |x: &Element| -> Result<f64> {
            let m = x.as_matrix()?;
            Ok((eta1.transpose() * m * m * &eta2)[(0, 0)])
        }
    };

    let derivative = move |x: &Element, k: usize| -> Result<KLinearForm> {
        let m = x.as_matrix()?.clone();
        let (e1, e2) = (eta1.clone(), eta2.clone());
        Ok(match k {
            1 => KLinearForm::new(1, true, signature, move |args| {
                let h = args[0].as_matrix().expect("checked dense");
                (e1.transpose() * (h * &m + &m * h) * &e2)[(0, 0)]
            }),
            2 => KLinearForm::new(2, true, signature, move |args| {
                let h = args[0].as_matrix().expect("checked dense");
                let g = args[1].as_matrix().expect("checked dense");
                (e1.transpose() * (h * g + g * h) * &e2)[(0, 0)]
            }),
            _ => KLinearForm::new(k, true, signature, |_| 0.0),
        })
    };

    DerivativeFamily::new(signature, 6, value, derivative, |_| Ok(()))
}

/// Characteristic scale of a point, used to size finite-difference steps.
pub fn element_scale(x: &Element) -> f64 {
    match x {
        Element::Matrix(m) => m.abs().max().max(1.0),
        Element::Pair { mat, vec } => mat.abs().max().max(vec.abs().max()).max(1.0),
    }
}

fn shifted(x: &Element, dirs: &[(&Element, f64)]) -> Result<Element> {
    let mut out = x.clone();
    for (d, w) in dirs {
        out.axpy(*w, d)?;
    }
    Ok(out)
}

/// Maximum relative disagreement between analytic derivatives of order
/// `k in {1, 2}` and central finite differences of the value along the given
/// directions.
pub fn finite_difference_gap(
    family: &DerivativeFamily,
    x: &Element,
    k: usize,
    directions: &[Element],
    step: f64,
) -> Result<f64> {
    if !(1..=2).contains(&k) {
        return Err(Error::Config("finite differences support k in {1, 2}".into()));
    }
    if directions.is_empty() {
        return Err(Error::EmptySample);
    }
    let form = family.derivative(x, k)?;
    let mut worst = 0.0f64;

    let probe = |dirs: &[(&Element, f64)]| -> Result<f64> {
        let point = shifted(x, dirs)?;
        family.guard(&point).map_err(|_| Error::DomainTooTight)?;
        family.value(&point)
    };

    match k {
        1 => {
            for dir in directions {
                let analytic = form.evaluate(&[dir])?;
                let numeric =
                    (probe(&[(dir, step)])? - probe(&[(dir, -step)])?) / (2.0 * step);
                let scale = analytic.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
        2 => {
            for (i, d1) in directions.iter().enumerate() {
                for d2 in &directions[i..] {
                    let analytic = form.evaluate(&[d1, d2])?;
                    let numeric = (probe(&[(d1, step), (d2, step)])?
                        - probe(&[(d1, step), (d2, -step)])?
                        - probe(&[(d1, -step), (d2, step)])?
                        + probe(&[(d1, -step), (d2, -step)])?)
                        / (4.0 * step * step);
                    let scale = analytic.abs().max(numeric.abs()).max(1.0);
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::product_dp::LeftFunctional;
    use crate::ustat::for_each_combination;
    use itertools::Itertools as _;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rng_for(seed: u64) -> rand_chacha::ChaCha8Rng {
        crate::rng::stream(seed, &[17])
    }

    fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        &a * a.transpose() + DMatrix::identity(d, d) * (d as f64)
    }

    fn random_symmetric(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        (&a + a.transpose()) * 0.5
    }

    fn random_vec(d: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn precision_value_at_identity() {
        let (family, _) = build_precision(&PrecisionSpec::e1(3)).unwrap();
        let x = Element::Matrix(DMatrix::identity(3, 3));
        assert_eq!(family.value(&x).unwrap(), 1.0);
    }

    #[test]
    fn precision_first_derivative_at_identity() {
        let mut rng = rng_for(1);
        let d = 3;
        let eta1 = random_vec(d, &mut rng);
        let eta2 = random_vec(d, &mut rng);
        let (family, _) =
            build_precision(&PrecisionSpec::new(eta1.clone(), eta2.clone()).unwrap()).unwrap();
        let x = Element::Matrix(DMatrix::identity(d, d));
        let h = random_symmetric(d, &mut rng);
        let form = family.derivative(&x, 1).unwrap();
        let got = form.evaluate(&[&Element::Matrix(h.clone())]).unwrap();
        let expect = -(eta1.transpose() * &h * &eta2)[(0, 0)];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn precision_second_derivative_at_two_identity() {
        // at H = 2I the two-permutation sum gives eta1' h h eta2 / 4
        let mut rng = rng_for(2);
        let d = 3;
        let eta1 = random_vec(d, &mut rng);
        let eta2 = random_vec(d, &mut rng);
        let (family, _) =
            build_precision(&PrecisionSpec::new(eta1.clone(), eta2.clone()).unwrap()).unwrap();
        let x = Element::Matrix(DMatrix::identity(d, d) * 2.0);
        let h = random_symmetric(d, &mut rng);
        let form = family.derivative(&x, 2).unwrap();
        let he = Element::Matrix(h.clone());
        let got = form.evaluate(&[&he, &he]).unwrap();
        let expect = (eta1.transpose() * &h * &h * &eta2)[(0, 0)] / 4.0;
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn precision_positive_on_matching_directions() {
        let mut rng = rng_for(3);
        let d = 4;
        let eta = random_vec(d, &mut rng);
        let (family, _) =
            build_precision(&PrecisionSpec::new(eta.clone(), eta).unwrap()).unwrap();
        for _ in 0..10 {
            let x = Element::Matrix(random_spd(d, &mut rng));
            assert!(family.value(&x).unwrap() > 0.0);
        }
    }

    #[test]
    fn regression_value_at_identity_gram() {
        let mut rng = rng_for(4);
        let d = 3;
        let eta = random_vec(d, &mut rng);
        let gamma = random_vec(d, &mut rng);
        let (family, _) = build_regression(&RegressionSpec::new(eta.clone()).unwrap()).unwrap();
        let x = Element::Pair { mat: DMatrix::identity(d, d), vec: gamma.clone() };
        assert!((family.value(&x).unwrap() - eta.dot(&gamma)).abs() < 1e-12);
    }

    #[test]
    fn regression_first_derivative_hand_formula() {
        // D^1 beta_eta(I, B)[(a, b)] = -eta' (a B - b)
        let mut rng = rng_for(5);
        let d = 3;
        let eta = random_vec(d, &mut rng);
        let b_vec = random_vec(d, &mut rng);
        let (family, _) = build_regression(&RegressionSpec::new(eta.clone()).unwrap()).unwrap();
        let x = Element::Pair { mat: DMatrix::identity(d, d), vec: b_vec.clone() };
        let a = random_symmetric(d, &mut rng);
        let b = random_vec(d, &mut rng);
        let form = family.derivative(&x, 1).unwrap();
        let got = form.evaluate(&[&Element::Pair { mat: a.clone(), vec: b.clone() }]).unwrap();
        let expect = -(eta.transpose() * (&a * &b_vec - &b))[(0, 0)];
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    /// Direct evaluation of the regression derivative by its permutation-sum
    /// formula, independent of both the family closure and the embedding.
    fn regression_derivative_direct(
        eta: &DVector<f64>,
        a_inv: &DMatrix<f64>,
        c: &DVector<f64>, // A^-1 B
        args: &[(&DMatrix<f64>, &DVector<f64>)],
    ) -> f64 {
        let k = args.len();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let mut total = 0.0;
        for perm in (0..k).permutations(k) {
            let mut row = (eta.transpose() * a_inv).transpose();
            for (slot, &p) in perm.iter().enumerate() {
                let (a_j, b_j) = args[p];
                if slot + 1 < k {
                    row = (row.transpose() * a_j * a_inv).transpose();
                } else {
                    total += (row.transpose() * a_j * c)[(0, 0)] - row.dot(b_j);
                }
            }
        }
        sign * total
    }

    #[test]
    fn regression_embedding_matches_direct_formula() {
        let mut rng = rng_for(6);
        let d = 3;
        let eta = random_vec(d, &mut rng);
        let (family, structure) =
            build_regression(&RegressionSpec::new(eta.clone()).unwrap()).unwrap();
        let a_mat = random_spd(d, &mut rng);
        let b_vec = random_vec(d, &mut rng);
        let x = Element::Pair { mat: a_mat.clone(), vec: b_vec.clone() };
        let a_inv = a_mat.clone().cholesky().unwrap().inverse();
        let c = &a_inv * &b_vec;

        for k in 1..=3usize {
            let incs: Vec<(DMatrix<f64>, DVector<f64>)> = (0..k)
                .map(|_| (random_symmetric(d, &mut rng), random_vec(d, &mut rng)))
                .collect();
            let elems: Vec<Element> = incs
                .iter()
                .map(|(a, b)| Element::Pair { mat: a.clone(), vec: b.clone() })
                .collect();

            // family closure against the independent permutation-sum oracle
            let form = family.derivative(&x, k).unwrap();
            let refs: Vec<&Element> = elems.iter().collect();
            let via_family = form.evaluate(&refs).unwrap();
            let arg_refs: Vec<(&DMatrix<f64>, &DVector<f64>)> =
                incs.iter().map(|(a, b)| (a, b)).collect();
            let direct = regression_derivative_direct(&eta, &a_inv, &c, &arg_refs);
            let scale = direct.abs().max(1.0);
            assert!((via_family - direct).abs() / scale < 1e-11, "family k={k}");

            // augmented-chain realization against the same oracle
            let os = structure.order_at(&x, k).unwrap();
            let mut augmented = 0.0;
            for perm in (0..k).permutations(k) {
                let mut chain = os.factors[0].clone();
                for (slot, &p) in perm.iter().enumerate() {
                    chain = chain * augment_pair_increment(&elems[p]).unwrap();
                    chain = chain * &os.factors[slot + 1];
                }
                if let LeftFunctional::Bilinear { left, right, weight } = &os.lam {
                    augmented += weight * (left.transpose() * chain * right)[(0, 0)];
                } else {
                    panic!("regression uses the bilinear realization");
                }
            }
            assert!((augmented - direct).abs() / scale < 1e-11, "augmented k={k}");
        }
    }

    #[test]
    fn logdet_examples() {
        let d = 3;
        let (family, _) = build_logdet(d);
        assert_eq!(family.value(&Element::Matrix(DMatrix::identity(d, d))).unwrap(), 0.0);

        // D^1 f(A)[h] = tr(A^-1 h); at A = 2I, h = I this is 3/2
        let x = Element::Matrix(DMatrix::identity(d, d) * 2.0);
        let h = Element::Matrix(DMatrix::identity(d, d));
        let form = family.derivative(&x, 1).unwrap();
        assert!((form.evaluate(&[&h]).unwrap() - 1.5).abs() < 1e-12);

        // D^2 f(I)[h, h] = -tr(h^2)
        let mut rng = rng_for(7);
        let hm = random_symmetric(d, &mut rng);
        let he = Element::Matrix(hm.clone());
        let form2 = family.derivative(&Element::Matrix(DMatrix::identity(d, d)), 2).unwrap();
        let got = form2.evaluate(&[&he, &he]).unwrap();
        let expect = -(&hm * &hm).trace();
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn stieltjes_examples() {
        let d = 3;
        // z = 0 is admissible: value at A = I, B = I is d
        let spec = StieltjesSpec::new(DMatrix::identity(d, d), 0.0).unwrap();
        let (family, _) = build_stieltjes(&spec).unwrap();
        let x = Element::Matrix(DMatrix::identity(d, d));
        assert!((family.value(&x).unwrap() - d as f64).abs() < 1e-12);

        // z = -1: (A - zI)^-1 = I/2 at A = I, so D^1 f[h] = -tr(h)/4
        let spec = StieltjesSpec::new(DMatrix::identity(d, d), -1.0).unwrap();
        let (family, _) = build_stieltjes(&spec).unwrap();
        let mut rng = rng_for(8);
        let hm = random_symmetric(d, &mut rng);
        let form = family.derivative(&x, 1).unwrap();
        let got = form.evaluate(&[&Element::Matrix(hm.clone())]).unwrap();
        assert!((got + hm.trace() / 4.0).abs() < 1e-12);

        // zero weight matrix kills the functional
        let spec = StieltjesSpec::new(DMatrix::zeros(d, d), -0.5).unwrap();
        let (family, _) = build_stieltjes(&spec).unwrap();
        assert_eq!(family.value(&x).unwrap(), 0.0);
        let form = family.derivative(&x, 2).unwrap();
        let he = Element::Matrix(hm);
        assert_eq!(form.evaluate(&[&he, &he]).unwrap(), 0.0);

        assert!(StieltjesSpec::new(DMatrix::identity(d, d), 0.5).is_err());
    }

    #[test]
    fn quadratic_functional_examples() {
        let mut rng = rng_for(9);
        let d = 3;
        let eta1 = random_vec(d, &mut rng);
        let eta2 = random_vec(d, &mut rng);
        let family = quadratic_test_functional(eta1.clone(), eta2.clone());

        let x = Element::Matrix(DMatrix::identity(d, d));
        assert!((family.value(&x).unwrap() - eta1.dot(&eta2)).abs() < 1e-12);

        let hm = random_symmetric(d, &mut rng);
        let he = Element::Matrix(hm.clone());
        let form2 = family.derivative(&x, 2).unwrap();
        let got = form2.evaluate(&[&he, &he]).unwrap();
        let expect = 2.0 * (eta1.transpose() * &hm * &hm * &eta2)[(0, 0)];
        assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));

        let form3 = family.derivative(&x, 3).unwrap();
        assert_eq!(form3.evaluate(&[&he, &he, &he]).unwrap(), 0.0);
    }

    #[test]
    fn derivative_forms_are_symmetric_under_argument_permutation() {
        let mut rng = rng_for(10);
        let d = 3;
        let (precision, _) = build_precision(&PrecisionSpec::new(
            random_vec(d, &mut rng),
            random_vec(d, &mut rng),
        )
        .unwrap())
        .unwrap();
        let x = Element::Matrix(random_spd(d, &mut rng));
        let args: Vec<Element> =
            (0..3).map(|_| Element::Matrix(random_symmetric(d, &mut rng))).collect();
        let form = precision.derivative(&x, 3).unwrap();
        let base = form.evaluate(&[&args[0], &args[1], &args[2]]).unwrap();
        for perm in (0..3).permutations(3) {
            let v = form.evaluate(&[&args[perm[0]], &args[perm[1]], &args[perm[2]]]).unwrap();
            assert!((v - base).abs() <= 1e-12 * base.abs().max(1.0));
        }
    }

    /// Symmetrized chain evaluation straight from the structure factors; the
    /// consistency oracle for all four functionals.
    fn symmetrized_chain(structure: &ProductStructure, x: &Element, args: &[Element]) -> f64 {
        let k = args.len();
        let os = structure.order_at(x, k).unwrap();
        let mut total = 0.0;
        for perm in (0..k).permutations(k) {
            let mut chain = os.factors[0].clone();
            for (slot, &p) in perm.iter().enumerate() {
                let inc = match &args[p] {
                    Element::Matrix(m) => m.clone(),
                    pair => augment_pair_increment(pair).unwrap(),
                };
                chain = chain * inc;
                chain = chain * &os.factors[slot + 1];
            }
            total += match &os.lam {
                LeftFunctional::Bilinear { left, right, weight } => {
                    weight * (left.transpose() * chain * right)[(0, 0)]
                }
                LeftFunctional::WeightedTrace { weight } => weight * chain.trace(),
            };
        }
        total
    }

    #[test]
    fn structures_reproduce_derivatives_for_all_functionals() {
        let mut rng = rng_for(11);
        let d = 3;
        let eta1 = random_vec(d, &mut rng);
        let eta2 = random_vec(d, &mut rng);

        let (p_fam, p_struct) =
            build_precision(&PrecisionSpec::new(eta1.clone(), eta2.clone()).unwrap()).unwrap();
        let (l_fam, l_struct) = build_logdet(d);
        let (s_fam, s_struct) = build_stieltjes(
            &StieltjesSpec::new(random_symmetric(d, &mut rng), -0.7).unwrap(),
        )
        .unwrap();
        let (r_fam, r_struct) =
            build_regression(&RegressionSpec::new(eta1.clone()).unwrap()).unwrap();

        let x_mat = Element::Matrix(random_spd(d, &mut rng));
        let x_pair =
            Element::Pair { mat: random_spd(d, &mut rng), vec: random_vec(d, &mut rng) };

        for k in 1..=4usize {
            let mat_args: Vec<Element> =
                (0..k).map(|_| Element::Matrix(random_symmetric(d, &mut rng))).collect();
            let pair_args: Vec<Element> = (0..k)
                .map(|_| Element::Pair {
                    mat: random_symmetric(d, &mut rng),
                    vec: random_vec(d, &mut rng),
                })
                .collect();

            for (name, fam, structure, x, args) in [
                ("precision", &p_fam, &p_struct, &x_mat, &mat_args),
                ("logdet", &l_fam, &l_struct, &x_mat, &mat_args),
                ("stieltjes", &s_fam, &s_struct, &x_mat, &mat_args),
                ("regression", &r_fam, &r_struct, &x_pair, &pair_args),
            ] {
                let refs: Vec<&Element> = args.iter().collect();
                let direct = fam.derivative(x, k).unwrap().evaluate(&refs).unwrap();
                let chained = symmetrized_chain(structure, x, args);
                let scale = direct.abs().max(chained.abs()).max(1.0);
                assert!(
                    (direct - chained).abs() / scale < 1e-9,
                    "{name} k={k}: {direct} vs {chained}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_validate_analytic_derivatives() {
        let mut rng = rng_for(12);
        let d = 3;
        let (precision, _) = build_precision(&PrecisionSpec::new(
            random_vec(d, &mut rng),
            random_vec(d, &mut rng),
        )
        .unwrap())
        .unwrap();
        let (logdet, _) = build_logdet(d);
        let (stieltjes, _) = build_stieltjes(
            &StieltjesSpec::new(random_symmetric(d, &mut rng), -0.5).unwrap(),
        )
        .unwrap();
        let quad = quadratic_test_functional(random_vec(d, &mut rng), random_vec(d, &mut rng));

        let x = Element::Matrix(random_spd(d, &mut rng));
        let dirs: Vec<Element> =
            (0..2).map(|_| Element::Matrix(random_symmetric(d, &mut rng))).collect();
        let step = 1e-4 * element_scale(&x);

        for (name, family) in [
            ("precision", &precision),
            ("logdet", &logdet),
            ("stieltjes", &stieltjes),
        ] {
            for k in 1..=2 {
                let gap = finite_difference_gap(family, &x, k, &dirs, step).unwrap();
                assert!(gap < 1e-5, "{name} k={k} gap={gap}");
            }
        }

        // polynomial functional: second differences are exact up to rounding
        let gap = finite_difference_gap(&quad, &x, 2, &dirs, step).unwrap();
        assert!(gap < 1e-9, "quadratic gap={gap}");

        // regression family over the pair carrier
        let (regression, _) =
            build_regression(&RegressionSpec::new(random_vec(d, &mut rng)).unwrap()).unwrap();
        let xp = Element::Pair { mat: random_spd(d, &mut rng), vec: random_vec(d, &mut rng) };
        let pair_dirs: Vec<Element> = (0..2)
            .map(|_| Element::Pair {
                mat: random_symmetric(d, &mut rng),
                vec: random_vec(d, &mut rng),
            })
            .collect();
        let step = 1e-4 * element_scale(&xp);
        for k in 1..=2 {
            let gap = finite_difference_gap(&regression, &xp, k, &pair_dirs, step).unwrap();
            assert!(gap < 1e-5, "regression k={k} gap={gap}");
        }
    }

    #[test]
    fn singular_input_is_reported() {
        let (family, _) = build_precision(&PrecisionSpec::e1(2)).unwrap();
        let singular = Element::Matrix(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(family.value(&singular).is_err());
        assert!(family.guard(&singular).is_err());
    }
}
