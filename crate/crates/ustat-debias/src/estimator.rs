//! The generic one-sided and cross-fitted debiased estimator.
//!
//! Given a functional `f` with derivative forms up to order `s` and a pilot
//! anchored on the complementary half-sample, the one-sided estimator is
//!
//! ```text
//!   f(pilot) + sum_{k=1..s} (1/k!) D^k f(pilot)[U^(k)(pilot)]
//! ```
//!
//! and the final estimator averages the two one-sided values obtained by
//! swapping the halves. This module evaluates the correction terms through
//! the generic complete U-statistic; the product-structure fast path lives in
//! [`crate::product_dp`].

use std::sync::Arc;

use crate::element::{Element, ElementSignature};
use crate::error::{Error, Result};
use crate::form::KLinearForm;
use crate::ustat::{complete_ustat, for_each_combination, FiniteSupportDistribution};

type ValueFn = dyn Fn(&Element) -> Result<f64> + Send + Sync;
type DerivativeFn = dyn Fn(&Element, usize) -> Result<KLinearForm> + Send + Sync;
type GuardFn = dyn Fn(&Element) -> Result<()> + Send + Sync;

/// A functional together with its derivative forms up to a maximum order.
#[derive(Clone)]
pub struct DerivativeFamily {
    value: Arc<ValueFn>,
    derivative: Arc<DerivativeFn>,
    max_order: usize,
    domain_guard: Arc<GuardFn>,
    signature: ElementSignature,
}

impl DerivativeFamily {
    pub fn new(
        signature: ElementSignature,
        max_order: usize,
        value: impl Fn(&Element) -> Result<f64> + Send + Sync + 'static,
        derivative: impl Fn(&Element, usize) -> Result<KLinearForm> + Send + Sync + 'static,
        domain_guard: impl Fn(&Element) -> Result<()> + Send + Sync + 'static,
    ) -> Self {
        assert!(max_order >= 1);
        Self {
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            max_order,
            domain_guard: Arc::new(domain_guard),
            signature,
        }
    }

    pub fn value(&self, x: &Element) -> Result<f64> {
        (self.value)(x)
    }

    /// The symmetric `k`-linear derivative form at `x`, `1 <= k <= max_order`.
    pub fn derivative(&self, x: &Element, k: usize) -> Result<KLinearForm> {
        if k == 0 || k > self.max_order {
            return Err(Error::OrderExceedsFamily { s: k, max_order: self.max_order });
        }
        (self.derivative)(x, k)
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn signature(&self) -> ElementSignature {
        self.signature
    }

    pub fn guard(&self, x: &Element) -> Result<()> {
        (self.domain_guard)(x)
    }
}

impl std::fmt::Debug for DerivativeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DerivativeFamily")
            .field("max_order", &self.max_order)
            .field("signature", &self.signature)
            .finish()
    }
}

/// Truncation-order policy: a fixed order, or the logarithmic schedule
/// `s = floor(log(e n))` used for analytic-type functionals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSchedule {
    Fixed(usize),
    LogOfN,
}

/// Resolve a schedule at per-split sample size `n`.
///
/// `LogOfN` yields `floor(log(e n)) = floor(1 + ln n)`, never below 1.
pub fn resolve_order(schedule: OrderSchedule, n: usize) -> usize {
    match schedule {
        OrderSchedule::Fixed(s) => s,
        OrderSchedule::LogOfN => {
            let s = (1.0 + (n.max(1) as f64).ln()).floor() as usize;
            s.max(1)
        }
    }
}

/// One half of the cross-fitted estimator, with its per-order decomposition.
///
/// `per_order_terms[0]` is `f(pilot)` and `per_order_terms[k]` is
/// `(1/k!) D^k f(pilot)[U^(k)(pilot)]`; the value is their sum.
#[derive(Clone, Debug)]
pub struct OneSidedReport {
    pub value: f64,
    pub per_order_terms: Vec<f64>,
    pub pilot: Element,
    pub s: usize,
}

impl OneSidedReport {
    pub(crate) fn from_terms(per_order_terms: Vec<f64>, pilot: Element, s: usize) -> Self {
        let value = per_order_terms.iter().sum();
        Self { value, per_order_terms, pilot, s }
    }
}

/// The full cross-fitted estimate: the average of the two one-sided values.
#[derive(Clone, Debug)]
pub struct CrossFitReport {
    pub value: f64,
    pub side_a: OneSidedReport,
    pub side_b: OneSidedReport,
}

impl CrossFitReport {
    pub(crate) fn new(side_a: OneSidedReport, side_b: OneSidedReport) -> Self {
        let value = 0.5 * (side_a.value + side_b.value);
        Self { value, side_a, side_b }
    }
}

/// One-sided order-`s` debiased estimate of `f` anchored at `pilot`,
/// with correction U-statistics over `sample`.
///
/// `s = 0` reduces to the plug-in value at the pilot.
pub fn one_sided(
    family: &DerivativeFamily,
    pilot: &Element,
    sample: &[Element],
    s: usize,
) -> Result<OneSidedReport> {
    family
        .guard(pilot)
        .map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;
    if s > family.max_order() {
        return Err(Error::OrderExceedsFamily { s, max_order: family.max_order() });
    }
    let mut terms = Vec::with_capacity(s + 1);
    terms.push(family.value(pilot)?);
    // factorial weights are folded in incrementally: w_k = w_{k-1} / k
    let mut inv_factorial = 1.0f64;
    for k in 1..=s {
        inv_factorial /= k as f64;
        let form = family.derivative(pilot, k)?;
        let u = complete_ustat(&form, sample, pilot)?;
        terms.push(inv_factorial * u);
    }
    Ok(OneSidedReport::from_terms(terms, pilot.clone(), s))
}

/// Cross-fitted estimate: pilots are fit on the opposite half, the two
/// one-sided values are averaged. Halves must have equal size.
pub fn cross_fit(
    family: &DerivativeFamily,
    pilot_fn: impl Fn(&[Element]) -> Result<Element>,
    part1: &[Element],
    part2: &[Element],
    schedule: OrderSchedule,
) -> Result<CrossFitReport> {
    if part1.len() != part2.len() {
        return Err(Error::UnequalSplit { left: part1.len(), right: part2.len() });
    }
    if part1.is_empty() {
        return Err(Error::EmptySample);
    }
    let s = resolve_order(schedule, part1.len()).min(family.max_order());
    let side_a = one_sided(family, &pilot_fn(part2)?, part1, s)?;
    let side_b = one_sided(family, &pilot_fn(part1)?, part2, s)?;
    Ok(CrossFitReport::new(side_a, side_b))
}

/// Maximum relative disagreement of the one-sided value across pilots.
///
/// For a polynomial functional of degree at most `s`, the order-`s` one-sided
/// value is a deterministic function of the sample alone, so the gap is zero
/// up to floating point error.
pub fn pilot_invariance_gap(
    family: &DerivativeFamily,
    sample: &[Element],
    s: usize,
    pilots: &[Element],
) -> Result<f64> {
    if pilots.is_empty() {
        return Err(Error::EmptySample);
    }
    let values: Vec<f64> = pilots
        .iter()
        .map(|p| one_sided(family, p, sample, s).map(|r| r.value))
        .collect::<Result<_>>()?;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    Ok((hi - lo) / scale)
}

/// Relative gap between the enumerated expectation of the one-sided
/// estimator and the functional at the exact mean:
/// `|E[one_sided] - f(theta)| / max(1, |f(theta)|)` over `support^n`.
pub fn unbiasedness_gap(
    family: &DerivativeFamily,
    dist: &FiniteSupportDistribution,
    n: usize,
    pilot: &Element,
    s: usize,
) -> Result<f64> {
    let atoms = dist.atoms();
    let required = (atoms.len() as f64).powi(n as i32);
    if required > crate::ustat::ORACLE_ENUM_CAP {
        return Err(Error::EnumerationCapExceeded {
            required,
            cap: crate::ustat::ORACLE_ENUM_CAP,
        });
    }
    let target = family.value(&dist.mean())?;

    let mut expectation = 0.0;
    let mut digits = vec![0usize; n];
    loop {
        let weight: f64 = digits.iter().map(|&i| dist.probs()[i]).product();
        let sample: Vec<Element> = digits.iter().map(|&i| atoms[i].clone()).collect();
        expectation += weight * one_sided(family, pilot, &sample, s)?.value;

        let mut pos = 0;
        loop {
            if pos == n {
                return Ok((expectation - target).abs() / target.abs().max(1.0));
            }
            digits[pos] += 1;
            if digits[pos] < atoms.len() {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Brute-force reference for the one-sided estimator used in tests: expands
/// every correction term by direct tuple enumeration, bypassing
/// `complete_ustat`.
#[doc(hidden)]
pub fn one_sided_bruteforce(
    family: &DerivativeFamily,
    pilot: &Element,
    sample: &[Element],
    s: usize,
) -> Result<f64> {
    let mut total = family.value(pilot)?;
    let diffs: Vec<Element> = sample.iter().map(|w| w.sub(pilot)).collect::<Result<_>>()?;
    let mut inv_factorial = 1.0;
    for k in 1..=s {
        inv_factorial /= k as f64;
        let form = family.derivative(pilot, k)?;
        let mut acc = 0.0;
        let mut count = 0.0;
        let mut args: Vec<&Element> = Vec::with_capacity(k);
        for_each_combination(sample.len(), k, |idx| {
            args.clear();
            args.extend(idx.iter().map(|&j| &diffs[j]));
            acc += form.evaluate_unchecked(&args);
            count += 1.0;
        });
        total += inv_factorial * acc / count;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element::Element;
    use crate::ustat::mean_element;

    /// Scalar precision functional on 1x1 matrices: omega(sigma) = 1/sigma.
    fn scalar_precision() -> DerivativeFamily {
        DerivativeFamily::new(
            ElementSignature::dense(1),
            8,
            |x| {
                let v = x.as_scalar()?;
                if v.abs() < 1e-12 {
                    return Err(Error::SingularInput);
                }
                Ok(1.0 / v)
            },
            |x, k| {
                let v = x.as_scalar()?;
                // D^k (1/x)[h,..,h] = (-1)^k k! x^{-(k+1)} prod h_i
                let coeff = if k % 2 == 0 { 1.0 } else { -1.0 };
                let factorial: f64 = (1..=k).map(|j| j as f64).product();
                let scale = coeff * factorial / v.powi(k as i32 + 1);
                Ok(KLinearForm::new(k, true, ElementSignature::dense(1), move |args| {
                    scale * args.iter().map(|a| a.as_scalar().unwrap()).product::<f64>()
                }))
            },
            |x| {
                if x.as_scalar()? <= 1e-12 {
                    return Err(Error::SingularInput);
                }
                Ok(())
            },
        )
    }

    fn scalars(xs: &[f64]) -> Vec<Element> {
        xs.iter().map(|&x| Element::scalar(x)).collect()
    }

    #[test]
    fn one_sided_at_pilot_equal_to_sample_mean() {
        let fam = scalar_precision();
        let report = one_sided(&fam, &Element::scalar(2.0), &scalars(&[1.0, 3.0]), 1).unwrap();
        assert!((report.value - 0.5).abs() < 1e-15);
        assert!(report.per_order_terms[1].abs() < 1e-15);
    }

    #[test]
    fn one_sided_hand_example_pilot_one() {
        // 1/1 - (2 - 1)/1^2 = 0
        let fam = scalar_precision();
        let report = one_sided(&fam, &Element::scalar(1.0), &scalars(&[1.0, 3.0]), 1).unwrap();
        assert!(report.value.abs() < 1e-15);
    }

    #[test]
    fn report_terms_sum_to_value() {
        let fam = scalar_precision();
        let report = one_sided(&fam, &Element::scalar(1.5), &scalars(&[1.0, 2.0, 3.0]), 3).unwrap();
        let sum: f64 = report.per_order_terms.iter().sum();
        assert!((report.value - sum).abs() <= 1e-12 * report.value.abs().max(1.0));
        assert_eq!(report.per_order_terms.len(), 4);
    }

    #[test]
    fn s_zero_is_plugin_at_pilot() {
        let fam = scalar_precision();
        let report = one_sided(&fam, &Element::scalar(2.5), &scalars(&[1.0, 3.0]), 0).unwrap();
        assert_eq!(report.value, 1.0 / 2.5);
    }

    #[test]
    fn cross_fit_hand_example() {
        let fam = scalar_precision();
        let report = cross_fit(
            &fam,
            |part| mean_element(part),
            &scalars(&[1.0, 3.0]),
            &scalars(&[2.0, 2.0]),
            OrderSchedule::Fixed(1),
        )
        .unwrap();
        assert!((report.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_fit_is_symmetric_in_parts() {
        let fam = scalar_precision();
        let p1 = scalars(&[1.0, 2.0, 4.0]);
        let p2 = scalars(&[3.0, 2.0, 2.5]);
        let a = cross_fit(&fam, mean_element, &p1, &p2, OrderSchedule::Fixed(2)).unwrap();
        let b = cross_fit(&fam, mean_element, &p2, &p1, OrderSchedule::Fixed(2)).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn unequal_halves_are_rejected() {
        let fam = scalar_precision();
        let err = cross_fit(
            &fam,
            mean_element,
            &scalars(&[1.0, 2.0]),
            &scalars(&[3.0]),
            OrderSchedule::Fixed(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnequalSplit { left: 2, right: 1 }));
    }

    #[test]
    fn pilot_outside_domain_is_reported() {
        let fam = scalar_precision();
        let err = one_sided(&fam, &Element::scalar(-1.0), &scalars(&[1.0, 3.0]), 1).unwrap_err();
        assert!(matches!(err, Error::PilotOutsideDomain(_)));
    }

    #[test]
    fn resolve_order_examples() {
        assert_eq!(resolve_order(OrderSchedule::LogOfN, 1), 1);
        assert_eq!(resolve_order(OrderSchedule::LogOfN, 500), 7);
        assert_eq!(resolve_order(OrderSchedule::Fixed(2), 123), 2);
    }

    #[test]
    fn one_sided_matches_bruteforce_expansion() {
        let fam = scalar_precision();
        let sample = scalars(&[0.8, 1.4, 2.2, 3.1]);
        let pilot = Element::scalar(1.7);
        for s in 0..=3 {
            let fast = one_sided(&fam, &pilot, &sample, s).unwrap().value;
            let slow = one_sided_bruteforce(&fam, &pilot, &sample, s).unwrap();
            assert!((fast - slow).abs() < 1e-12, "s={s}");
        }
    }
}
