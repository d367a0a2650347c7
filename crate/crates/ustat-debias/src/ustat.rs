//! Complete tensor U-statistics and exact enumeration oracles.
//!
//! `complete_ustat` is the production evaluator for
//! `C(n,k)^{-1} sum_{j1<..<jk} T[W_{j1}-b, .., W_{jk}-b]`.
//! The remaining operations are desk-scale oracles: they verify degeneracy,
//! the variance identity for canonical kernels, and the binomial shift
//! identity by brute-force enumeration over finite-support distributions.
//! Oracles refuse work beyond a fixed tuple budget; they exist to check
//! identities, not to scale.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::form::KLinearForm;

/// Hard ceiling for oracle enumerations (`|support|^k` or `|support|^n`).
pub const ORACLE_ENUM_CAP: f64 = 1e6;

/// Ceiling on `C(n,k)` for brute-force U-statistics of order `k >= 3`;
/// orders 1 and 2 are always allowed.
pub const GENERIC_USTAT_CAP: f64 = 5e6;

/// `C(n,k)` in double precision (exact up to 2^53, accurate beyond).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for j in 0..k {
        acc = acc * (n - j) as f64 / (j + 1) as f64;
    }
    acc
}

/// Visit every strictly increasing `k`-tuple from `0..n` without allocating
/// per tuple.
pub(crate) fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k == 0 || k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // advance to the next lexicographic combination
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + n - k {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return;
            }
        }
    }
}

/// Visit every function `[len] -> [base]` (mixed-radix counter), passing the
/// digit slice.
fn for_each_assignment(base: usize, len: usize, mut visit: impl FnMut(&[usize])) {
    let mut digits = vec![0usize; len];
    loop {
        visit(&digits);
        let mut pos = 0;
        loop {
            if pos == len {
                return;
            }
            digits[pos] += 1;
            if digits[pos] < base {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

fn check_sample(form: &KLinearForm, sample: &[Element], shift: &Element) -> Result<()> {
    let sig = form.signature();
    for e in sample.iter().chain(std::iter::once(shift)) {
        let s = e.signature();
        if s.kind != sig.kind {
            return Err(Error::KindMismatch { left: sig.kind.name(), right: s.kind.name() });
        }
        if s.dim != sig.dim {
            return Err(Error::DimensionMismatch { expected: sig.dim, got: s.dim });
        }
    }
    Ok(())
}

/// The complete symmetric tensor U-statistic
/// `C(n,k)^{-1} sum_{j1<..<jk} form(W_{j1}-shift, .., W_{jk}-shift)`.
///
/// Iterates strictly increasing index tuples only and therefore requires the
/// symmetric flag; asymmetric forms are rejected. Orders `k >= 3` are capped
/// at `C(n,k) <= 5e6` tuples; larger requests should go through the
/// product-structure fast path instead.
pub fn complete_ustat(form: &KLinearForm, sample: &[Element], shift: &Element) -> Result<f64> {
    let k = form.arity();
    let n = sample.len();
    if k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    if !form.symmetric() {
        return Err(Error::Config("complete_ustat requires a symmetric form".into()));
    }
    check_sample(form, sample, shift)?;
    let tuples = binomial(n, k);
    if k >= 3 && tuples > GENERIC_USTAT_CAP {
        return Err(Error::EnumerationCapExceeded { required: tuples, cap: GENERIC_USTAT_CAP });
    }

    if k == 1 {
        let mut acc = 0.0;
        for w in sample {
            let h = w.sub(shift)?;
            acc += form.evaluate_unchecked(&[&h]);
        }
        return Ok(acc / n as f64);
    }

    let diffs: Vec<Element> = sample.iter().map(|w| w.sub(shift)).collect::<Result<_>>()?;
    let mut acc = 0.0;
    let mut args: Vec<&Element> = Vec::with_capacity(k);
    for_each_combination(n, k, |idx| {
        args.clear();
        args.extend(idx.iter().map(|&j| &diffs[j]));
        acc += form.evaluate_unchecked(&args);
    });
    Ok(acc / tuples)
}

/// Coordinate-wise average of a nonempty sample.
pub fn mean_element(sample: &[Element]) -> Result<Element> {
    let first = sample.first().ok_or(Error::EmptySample)?;
    let mut acc = first.zeros_like();
    let w = 1.0 / sample.len() as f64;
    for e in sample {
        acc.axpy(w, e)?;
    }
    Ok(acc)
}

/// A distribution with finitely many atoms; the measure the oracles
/// enumerate over.
#[derive(Clone, Debug)]
pub struct FiniteSupportDistribution {
    atoms: Vec<Element>,
    probs: Vec<f64>,
}

impl FiniteSupportDistribution {
    pub fn new(atoms: Vec<Element>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptySample);
        }
        if atoms.len() != probs.len() {
            return Err(Error::DimensionMismatch { expected: atoms.len(), got: probs.len() });
        }
        let sig = atoms[0].signature();
        for a in &atoms[1..] {
            if a.signature() != sig {
                return Err(Error::KindMismatch {
                    left: sig.kind.name(),
                    right: a.signature().kind.name(),
                });
            }
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("atom probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("atom probabilities sum to {total}, not 1")));
        }
        Ok(Self { atoms, probs })
    }

    pub fn uniform(atoms: Vec<Element>) -> Result<Self> {
        let p = 1.0 / atoms.len() as f64;
        let probs = vec![p; atoms.len()];
        Self::new(atoms, probs)
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The exact mean `sum_i p_i atom_i`.
    pub fn mean(&self) -> Element {
        let mut acc = self.atoms[0].zeros_like();
        for (a, &p) in self.atoms.iter().zip(&self.probs) {
            acc.axpy(p, a).expect("atoms share a signature");
        }
        acc
    }

    fn support_size_check(&self, exponent: usize) -> Result<()> {
        let required = (self.atoms.len() as f64).powi(exponent as i32);
        if required > ORACLE_ENUM_CAP {
            return Err(Error::EnumerationCapExceeded { required, cap: ORACLE_ENUM_CAP });
        }
        Ok(())
    }
}

/// Exact `Var(form(W_1 - theta, .., W_k - theta))` by enumeration over
/// `support^k`, with `theta` the exact mean.
pub fn kernel_variance_enum(form: &KLinearForm, dist: &FiniteSupportDistribution) -> Result<f64> {
    let k = form.arity();
    dist.support_size_check(k)?;
    let theta = dist.mean();
    let centered: Vec<Element> =
        dist.atoms.iter().map(|a| a.sub(&theta)).collect::<Result<_>>()?;
    check_sample(form, &centered, &theta)?;

    let mut mean = 0.0;
    let mut second = 0.0;
    let mut args: Vec<&Element> = Vec::with_capacity(k);
    for_each_assignment(dist.atoms.len(), k, |digits| {
        let weight: f64 = digits.iter().map(|&i| dist.probs[i]).product();
        args.clear();
        args.extend(digits.iter().map(|&i| &centered[i]));
        let v = form.evaluate_unchecked(&args);
        mean += weight * v;
        second += weight * v * v;
    });
    Ok(second - mean * mean)
}

/// Exact variance of `complete_ustat(form, sample, theta)` when the sample of
/// size `n` is drawn i.i.d. from `dist`, by enumeration over `support^n`.
///
/// Together with [`kernel_variance_enum`] this checks the variance formula
/// for canonical kernels: the ratio of the two is `C(n,k)^{-1}`.
pub fn ustat_variance_direct(
    form: &KLinearForm,
    dist: &FiniteSupportDistribution,
    n: usize,
) -> Result<f64> {
    let k = form.arity();
    if k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    dist.support_size_check(n)?;
    let theta = dist.mean();

    let mut mean = 0.0;
    let mut second = 0.0;
    let mut err: Option<Error> = None;
    for_each_assignment(dist.atoms.len(), n, |digits| {
        if err.is_some() {
            return;
        }
        let weight: f64 = digits.iter().map(|&i| dist.probs[i]).product();
        let sample: Vec<Element> = digits.iter().map(|&i| dist.atoms[i].clone()).collect();
        match complete_ustat(form, &sample, &theta) {
            Ok(v) => {
                mean += weight * v;
                second += weight * v * v;
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(second - mean * mean)
}

/// Degeneracy gap of the centered kernel in slot `j`: the largest deviation,
/// over conditioning configurations of the other `k-1` slots, of
/// `E[form(W_1-theta,..,W_k-theta) | all slots except j]` from the kernel's
/// unconditional mean. A completely degenerate (canonical) kernel has both
/// means identically zero, so the gap vanishes to fp.
pub fn conditional_degeneracy_gap(
    form: &KLinearForm,
    dist: &FiniteSupportDistribution,
    slot: usize,
) -> Result<f64> {
    let k = form.arity();
    if slot == 0 || slot > k {
        return Err(Error::Config(format!("slot must lie in 1..={k}, got {slot}")));
    }
    dist.support_size_check(k)?;
    let theta = dist.mean();
    let centered: Vec<Element> =
        dist.atoms.iter().map(|a| a.sub(&theta)).collect::<Result<_>>()?;
    check_sample(form, &centered, &theta)?;

    let mut args: Vec<&Element> = Vec::with_capacity(k);
    let mut overall = 0.0f64;
    for_each_assignment(dist.atoms.len(), k, |digits| {
        let weight: f64 = digits.iter().map(|&i| dist.probs[i]).product();
        args.clear();
        args.extend(digits.iter().map(|&i| &centered[i]));
        overall += weight * form.evaluate_unchecked(&args);
    });

    let mut worst = 0.0f64;
    // configurations of the k-1 conditioning slots
    for_each_assignment(dist.atoms.len(), k - 1, |others| {
        let mut cond_mean = 0.0;
        for (i, &p) in dist.probs.iter().enumerate() {
            args.clear();
            let mut it = others.iter();
            for s in 0..k {
                if s == slot - 1 {
                    args.push(&centered[i]);
                } else {
                    args.push(&centered[*it.next().expect("k-1 conditioning digits")]);
                }
            }
            cond_mean += p * form.evaluate_unchecked(&args);
        }
        worst = worst.max((cond_mean - overall).abs());
    });
    Ok(worst)
}

/// Gap in the binomial shift identity
/// `T[U^(l)(shifted)] = sum_j C(l,j) T[h^{x j}, U^(l-j)(base)]` with
/// `h = base - shifted`, both sides evaluated through [`complete_ustat`].
pub fn shift_binomial_gap(
    form: &KLinearForm,
    sample: &[Element],
    base: &Element,
    shifted: &Element,
) -> Result<f64> {
    let l = form.arity();
    let lhs = complete_ustat(form, sample, shifted)?;
    let h = base.sub(shifted)?;

    let mut rhs = 0.0;
    for j in 0..=l {
        let coeff = binomial(l, j);
        if j == l {
            let args: Vec<&Element> = std::iter::repeat(&h).take(l).collect();
            rhs += coeff * form.evaluate(&args)?;
        } else if j == 0 {
            rhs += coeff * complete_ustat(form, sample, base)?;
        } else {
            let partial = form.fix_front(&h, j)?;
            rhs += coeff * complete_ustat(&partial, sample, base)?;
        }
    }
    let scale = lhs.abs().max(rhs.abs()).max(1.0);
    Ok((lhs - rhs).abs() / scale)
}
