//! Competitor estimators: plug-in, jackknife, iterated Gaussian-multiplier
//! bootstrap, the same-sample higher-order expansion (no splitting), and the
//! blockwise base-estimator construction.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::estimator::{one_sided, DerivativeFamily};
use crate::pilots::{Dataset, PilotEstimator};
use crate::rng;
use crate::ustat::mean_element;

/// A functional evaluated by plugging a moment estimate into the family's
/// value.
#[derive(Clone, Debug)]
pub struct PluginFunctional {
    pub pilot: PilotEstimator,
    pub family: DerivativeFamily,
}

impl PluginFunctional {
    pub fn new(pilot: PilotEstimator, family: DerivativeFamily) -> Self {
        Self { pilot, family }
    }

    fn guarded_value(&self, moment: &Element) -> Result<f64> {
        self.family
            .guard(moment)
            .map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;
        self.family.value(moment)
    }
}

/// Descriptor of one baseline estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BaselineConfig {
    Plugin,
    Jackknife,
    IteratedBootstrap { order: usize, mc_size: usize },
    Hodse { order: usize },
    KlBlockwise { order: usize },
}

/// `f(moment(data))`.
pub fn plugin_estimate(plugin: &PluginFunctional, data: &Dataset) -> Result<f64> {
    let moment = plugin.pilot.fit(data)?;
    plugin.guarded_value(&moment)
}

/// Delete-one jackknife: `n f(all) - (n-1) mean_i f(delete-i)`.
///
/// Moment pilots admit an incremental delete-one update
/// `(n M - W_i) / (n-1)`; other pilots refit on the reduced data.
pub fn jackknife_estimate(plugin: &PluginFunctional, data: &Dataset) -> Result<f64> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InsufficientData { required: 2, n });
    }
    let full_moment = plugin.pilot.fit(data)?;
    let full = plugin.guarded_value(&full_moment)?;

    // moment-style pilots (possibly floored) update incrementally
    let incremental: Option<Option<f64>> = match &plugin.pilot {
        PilotEstimator::SampleMoments => Some(None),
        PilotEstimator::EigFloor { inner, epsilon }
            if matches!(**inner, PilotEstimator::SampleMoments) =>
        {
            Some(Some(*epsilon))
        }
        _ => None,
    };

    let nf = n as f64;
    let mut acc = 0.0;
    if let Some(floor) = incremental {
        let raw_full = crate::pilots::fit_sample_moments(data)?;
        for i in 0..n {
            let w = data.observation(i);
            let mut del = raw_full.scale(nf / (nf - 1.0));
            del.axpy(-1.0 / (nf - 1.0), &w)?;
            if let Some(eps) = floor {
                del = crate::pilots::floor_element(&del, eps)?;
            }
            acc += plugin.guarded_value(&del)?;
        }
    } else {
        for i in 0..n {
            let reduced = delete_row(data, i);
            let del = plugin.pilot.fit(&reduced)?;
            acc += plugin.guarded_value(&del)?;
        }
    }
    Ok(nf * full - (nf - 1.0) * (acc / nf))
}

fn delete_row(data: &Dataset, i: usize) -> Dataset {
    let n = data.n();
    match data {
        Dataset::Gram { x } => {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            Dataset::Gram { x: x.select_rows(keep.iter()) }
        }
        Dataset::Regression { x, y } => {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            Dataset::Regression {
                x: x.select_rows(keep.iter()),
                y: DVector::from_iterator(n - 1, keep.iter().map(|&r| y[r])),
            }
        }
    }
}

/// One Gaussian-multiplier resample of the moment around `state`:
/// `state + n^-1 sum_i g_i (W_i - state)` with `g_i` i.i.d. standard normal,
/// computed from the raw rows in one gram product.
fn multiplier_resample(data: &Dataset, state: &Element, rng: &mut impl Rng) -> Result<Element> {
    let n = data.n();
    let g = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
    let g_mean = g.mean();
    let row_scaled = |x: &nalgebra::DMatrix<f64>| {
        let mut xg = x.clone();
        for i in 0..n {
            xg.row_mut(i).scale_mut(g[i]);
        }
        xg
    };
    match (data, state) {
        (Dataset::Gram { x }, Element::Matrix(m)) => {
            let weighted = x.transpose() * row_scaled(x) / n as f64;
            Ok(Element::Matrix(m * (1.0 - g_mean) + weighted))
        }
        (Dataset::Regression { x, y }, Element::Pair { mat, vec }) => {
            let weighted_mat = x.transpose() * row_scaled(x) / n as f64;
            let gy = DVector::from_fn(n, |i, _| g[i] * y[i]);
            let weighted_vec = x.transpose() * gy / n as f64;
            Ok(Element::Pair {
                mat: mat * (1.0 - g_mean) + weighted_mat,
                vec: vec * (1.0 - g_mean) + weighted_vec,
            })
        }
        _ => Err(Error::KindMismatch { left: "state", right: "data" }),
    }
}

const RESAMPLE_ATTEMPTS: usize = 100;

fn resample_in_domain(
    family: &DerivativeFamily,
    data: &Dataset,
    state: &Element,
    key: u64,
) -> Result<Element> {
    let mut stream = rng::stream(key, &[rng::tags::BOOTSTRAP]);
    for _ in 0..RESAMPLE_ATTEMPTS {
        let candidate = multiplier_resample(data, state, &mut stream)?;
        if family.guard(&candidate).is_ok() {
            return Ok(candidate);
        }
    }
    Err(Error::DegenerateResample { attempts: RESAMPLE_ATTEMPTS })
}

/// Monte Carlo estimate of the `j`-fold bias operator applied to the value,
/// at the given moment state: `Bhat^j f(state)` with `mc` multiplier branches
/// per level.
fn bias_power(
    family: &DerivativeFamily,
    data: &Dataset,
    state: &Element,
    j: usize,
    mc: usize,
    key: u64,
) -> Result<f64> {
    if j == 0 {
        return family.value(state);
    }
    let mut acc = 0.0;
    for m in 0..mc {
        let child = rng::mix(key, m as u64 + 1);
        let resampled = resample_in_domain(family, data, state, child)?;
        acc += bias_power(family, data, &resampled, j - 1, mc, rng::mix(child, 0))?;
    }
    let center = bias_power(family, data, state, j - 1, mc, rng::mix(key, 0))?;
    Ok(acc / mc as f64 - center)
}

/// Iterated Gaussian-multiplier bootstrap of order `q`: the truncated
/// Neumann series `sum_{j=0..q} (-1)^j Bhat^j f(moment)` with the bias
/// operator estimated by recursive multiplier chains (`mc` branches per
/// level). Order 0 is exactly the plug-in value. Branch counts grow as
/// `mc^q`, so orders above 3 are refused.
pub fn iterated_bootstrap_estimate(
    plugin: &PluginFunctional,
    data: &Dataset,
    order: usize,
    mc_size: usize,
    seed: u64,
) -> Result<f64> {
    if order > 3 {
        return Err(Error::Config(format!(
            "iterated bootstrap supports order <= 3 (requested {order}); branch count is mc^order"
        )));
    }
    if mc_size == 0 {
        return Err(Error::Config("mc_size must be at least 1".into()));
    }
    let moment = plugin.pilot.fit(data)?;
    plugin
        .family
        .guard(&moment)
        .map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;

    let mut value = 0.0;
    for j in 0..=order {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let key = rng::derive_key(seed, &[rng::tags::BOOTSTRAP, j as u64]);
        value += sign * bias_power(&plugin.family, data, &moment, j, mc_size, key)?;
    }
    Ok(value)
}

/// Same-sample higher-order expansion: the one-sided estimator anchored at
/// the full-sample mean, with corrections over the same observations (no
/// splitting).
pub fn hodse_estimate(family: &DerivativeFamily, observations: &[Element], s: usize) -> Result<f64> {
    let mean = mean_element(observations)?;
    Ok(one_sided(family, &mean, observations, s)?.value)
}

/// Blockwise base-estimator construction: `1 + s(s+1)/2` contiguous equal
/// blocks (remainder to block 0), the pilot from block 0 and `k` fresh block
/// moments per correction level:
///
/// ```text
///   f(m_0) + sum_{k=1..s} (1/k!) D^k f(m_0)[m_{k,1} - m_0, .., m_{k,k} - m_0]
/// ```
pub fn kl_blockwise_estimate(
    family: &DerivativeFamily,
    observations: &[Element],
    s: usize,
) -> Result<f64> {
    let blocks = 1 + s * (s + 1) / 2;
    let n = observations.len();
    if n < blocks {
        return Err(Error::InsufficientData { required: blocks, n });
    }
    let base = n / blocks;
    let rem = n % blocks;

    let pilot = mean_element(&observations[..base + rem])?;
    family.guard(&pilot).map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;
    let mut value = family.value(&pilot)?;

    let mut start = base + rem;
    let mut inv_factorial = 1.0f64;
    for k in 1..=s {
        inv_factorial /= k as f64;
        let mut increments = Vec::with_capacity(k);
        for _ in 0..k {
            let block_mean = mean_element(&observations[start..start + base])?;
            increments.push(block_mean.sub(&pilot)?);
            start += base;
        }
        let form = family.derivative(&pilot, k)?;
        let args: Vec<&Element> = increments.iter().collect();
        value += inv_factorial * form.evaluate(&args)?;
    }
    Ok(value)
}

/// Evaluate a baseline descriptor on a dataset. The observation elements are
/// materialized only for the baselines that need them.
pub fn evaluate_baseline(
    config: &BaselineConfig,
    plugin: &PluginFunctional,
    data: &Dataset,
    seed: u64,
) -> Result<f64> {
    match config {
        BaselineConfig::Plugin => plugin_estimate(plugin, data),
        BaselineConfig::Jackknife => jackknife_estimate(plugin, data),
        BaselineConfig::IteratedBootstrap { order, mc_size } => {
            iterated_bootstrap_estimate(plugin, data, *order, *mc_size, seed)
        }
        BaselineConfig::Hodse { order } => hodse_estimate(&plugin.family, &data.elements(), *order),
        BaselineConfig::KlBlockwise { order } => {
            kl_blockwise_estimate(&plugin.family, &data.elements(), *order)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element::ElementSignature;
    use crate::form::KLinearForm;
    use crate::ustat::FiniteSupportDistribution;
    use nalgebra::DMatrix;

    /// f(m) = m^2 on scalar moments, with exact derivatives.
    fn scalar_square_family() -> DerivativeFamily {
        DerivativeFamily::new(
            ElementSignature::dense(1),
            4,
            |x| Ok(x.as_scalar()?.powi(2)),
            |x, k| {
                let v = x.as_scalar()?;
                Ok(match k {
                    1 => KLinearForm::new(1, true, ElementSignature::dense(1), move |args| {
                        2.0 * v * args[0].as_scalar().unwrap()
                    }),
                    2 => KLinearForm::new(2, true, ElementSignature::dense(1), |args| {
                        2.0 * args[0].as_scalar().unwrap() * args[1].as_scalar().unwrap()
                    }),
                    _ => KLinearForm::new(k, true, ElementSignature::dense(1), |_| 0.0),
                })
            },
            |_| Ok(()),
        )
    }

    /// f(m) = trace(m): linear in the moment.
    fn scalar_trace_family() -> DerivativeFamily {
        DerivativeFamily::new(
            ElementSignature::dense(1),
            4,
            |x| Ok(x.as_scalar()?),
            |_, k| {
                Ok(if k == 1 {
                    KLinearForm::trace(1)
                } else {
                    KLinearForm::new(k, true, ElementSignature::dense(1), |_| 0.0)
                })
            },
            |_| Ok(()),
        )
    }

    fn gram_rows(values: &[f64]) -> Dataset {
        // gram observation of row sqrt(v) is v
        Dataset::Gram {
            x: DMatrix::from_iterator(values.len(), 1, values.iter().map(|&v| v.sqrt())),
        }
    }

    fn scalar_elements(values: &[f64]) -> Vec<Element> {
        values.iter().map(|&v| Element::scalar(v)).collect()
    }

    #[test]
    fn jackknife_hand_example() {
        // W = {0, 2}, f(m) = m^2: 2 f(1) - mean(f(2), f(0)) = 0
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[0.0, 2.0]);
        let v = jackknife_estimate(&plugin, &data).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn jackknife_is_exact_for_linear_functionals() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_trace_family());
        let data = gram_rows(&[0.5, 1.5, 4.0, 2.25]);
        let jack = jackknife_estimate(&plugin, &data).unwrap();
        let plug = plugin_estimate(&plugin, &data).unwrap();
        assert!((jack - plug).abs() <= 1e-12 * plug.abs().max(1.0));
    }

    #[test]
    fn jackknife_on_constant_data() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[3.0, 3.0, 3.0]);
        assert!((jackknife_estimate(&plugin, &data).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn jackknife_incremental_and_refit_paths_agree() {
        let family = scalar_square_family();
        let data = gram_rows(&[0.5, 1.5, 4.0, 2.25, 3.5]);
        let fast = jackknife_estimate(
            &PluginFunctional::new(PilotEstimator::SampleMoments, family.clone()),
            &data,
        )
        .unwrap();
        // median-of-means with one block is the sample mean, but takes the
        // generic refit path
        let slow = jackknife_estimate(
            &PluginFunctional::new(PilotEstimator::MedianOfMeans { blocks: 1 }, family),
            &data,
        )
        .unwrap();
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn ib_order_zero_is_plugin() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[1.0, 2.0, 3.0]);
        let ib = iterated_bootstrap_estimate(&plugin, &data, 0, 40, 7).unwrap();
        let plug = plugin_estimate(&plugin, &data).unwrap();
        assert_eq!(ib, plug);
    }

    #[test]
    fn ib_is_deterministic_in_the_seed() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[1.0, 2.0, 3.0, 1.5]);
        let a = iterated_bootstrap_estimate(&plugin, &data, 2, 10, 99).unwrap();
        let b = iterated_bootstrap_estimate(&plugin, &data, 2, 10, 99).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = iterated_bootstrap_estimate(&plugin, &data, 2, 10, 100).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn ib_linear_functional_stays_near_plugin() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_trace_family());
        let values = [1.0, 2.5, 0.5, 3.0, 1.5];
        let data = gram_rows(&values);
        let mc = 40;
        let ib = iterated_bootstrap_estimate(&plugin, &data, 1, mc, 5).unwrap();
        let plug = plugin_estimate(&plugin, &data).unwrap();
        // for linear f the bias estimate is a centered Gaussian average:
        // sd = sqrt(sum (w_i - mean)^2) / n per draw
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd_one = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt() / n;
        let tol = 3.0 * sd_one / (mc as f64).sqrt();
        assert!((ib - plug).abs() <= tol, "delta {} tol {tol}", ib - plug);
    }

    #[test]
    fn ib_refuses_deep_chains() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[1.0, 2.0]);
        assert!(matches!(
            iterated_bootstrap_estimate(&plugin, &data, 4, 40, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hodse_order_one_is_plugin_at_the_mean() {
        let family = scalar_square_family();
        let obs = scalar_elements(&[1.0, 2.0, 4.0]);
        let v = hodse_estimate(&family, &obs, 1).unwrap();
        let mean = 7.0 / 3.0;
        assert!((v - mean * mean).abs() < 1e-12);
    }

    #[test]
    fn hodse_order_two_matches_hand_expansion() {
        let family = scalar_square_family();
        let values = [1.0, 2.0, 4.0];
        let obs = scalar_elements(&values);
        let v = hodse_estimate(&family, &obs, 2).unwrap();
        // f(mean) + (1/2) * C(3,2)^-1 * sum_{i<j} 2 (w_i - m)(w_j - m)
        let m = values.iter().sum::<f64>() / 3.0;
        let mut pairs = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                pairs += 2.0 * (values[i] - m) * (values[j] - m);
            }
        }
        let expect = m * m + 0.5 * pairs / 3.0;
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn hodse_constant_data() {
        let family = scalar_square_family();
        let obs = scalar_elements(&[2.0, 2.0, 2.0, 2.0]);
        for s in 0..=3 {
            assert!((hodse_estimate(&family, &obs, s).unwrap() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_order_zero_uses_single_block() {
        let family = scalar_square_family();
        let obs = scalar_elements(&[1.0, 5.0, 9.0]);
        // one block holding everything: f(mean) = 25
        assert!((kl_blockwise_estimate(&family, &obs, 0).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn kl_constant_data_for_every_order() {
        let family = scalar_square_family();
        let obs = scalar_elements(&[3.0; 12]);
        for s in 0..=2 {
            assert!((kl_blockwise_estimate(&family, &obs, s).unwrap() - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_needs_enough_blocks() {
        let family = scalar_square_family();
        let obs = scalar_elements(&[1.0, 2.0]);
        assert!(matches!(
            kl_blockwise_estimate(&family, &obs, 2),
            Err(Error::InsufficientData { required: 4, n: 2 })
        ));
    }

    #[test]
    fn kl_conditional_expectation_telescopes_to_taylor_polynomial() {
        // order 2 needs 4 blocks; with n = 4 each block is one observation.
        // conditioning on block 0, the enumerated expectation over the other
        // three observations equals the degree-2 Taylor polynomial of f
        // around the pilot evaluated at theta; f quadratic makes it f(theta).
        let family = scalar_square_family();
        let atoms = [0.0, 2.0];
        let probs = [0.5, 0.5];
        let dist = FiniteSupportDistribution::uniform(scalar_elements(&atoms)).unwrap();
        let theta = dist.mean().as_scalar().unwrap();
        for &w0 in &atoms {
            let mut expectation = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        let obs = scalar_elements(&[w0, atoms[i], atoms[j], atoms[k]]);
                        let weight = probs[i] * probs[j] * probs[k];
                        expectation +=
                            weight * kl_blockwise_estimate(&family, &obs, 2).unwrap();
                    }
                }
            }
            let taylor = theta * theta; // degree-2 Taylor of m^2 is exact
            assert!(
                (expectation - taylor).abs() < 1e-12,
                "pilot {w0}: {expectation} vs {taylor}"
            );
        }
    }

    #[test]
    fn baseline_dispatch_covers_all_kinds() {
        let plugin = PluginFunctional::new(PilotEstimator::SampleMoments, scalar_square_family());
        let data = gram_rows(&[1.0, 2.0, 3.0, 4.0]);
        for cfg in [
            BaselineConfig::Plugin,
            BaselineConfig::Jackknife,
            BaselineConfig::IteratedBootstrap { order: 1, mc_size: 8 },
            BaselineConfig::Hodse { order: 2 },
            BaselineConfig::KlBlockwise { order: 1 },
        ] {
            let v = evaluate_baseline(&cfg, &plugin, &data, 11).unwrap();
            assert!(v.is_finite());
        }
    }
}
