//! Permutation-randomized estimation via dynamic programming.
//!
//! For functionals whose derivative forms are permutation sums of matrix
//! chains
//!
//! ```text
//!   T_k(x)[h_1, .., h_k] = Lambda_k(x)( G_{k,0} h_1 G_{k,1} .. h_k G_{k,k} )
//! ```
//!
//! the order-`k` correction term equals the average of
//! `F_k(pi) = C(n,k)^{-1} sum_{i1<..<ik} T_k[H_{pi(i1)}, .., H_{pi(ik)}]`
//! over the symmetric group. `F_k(pi)` itself collapses to `O(n k)` algebra
//! multiplications through the subset-chain recursion
//!
//! ```text
//!   Y_j^(t) = Y_j^(t-1) + Y_{j-1}^(t-1) H_{pi(t)} G_{k,j},
//! ```
//!
//! so replacing the average over all `n!` permutations by `b` random ones
//! gives an unbiased randomized estimator computable in `O(b n s^2)` algebra
//! operations. This module implements the recursion, the randomized one-sided
//! and cross-fitted estimators, a brute-force oracle, and closed-form exact
//! evaluation of the order `k <= 3` terms by collision-pattern expansion.
//!
//! When the left functional is realized as a (row vector, column vector,
//! weight) triple, the running chain states are row vectors and every DP step
//! costs `O(d^2)` scalar work; trace-type functionals carry full matrix
//! states instead.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;

use crate::element::{Element, ElementSignature};
use crate::error::{Error, Result};
use crate::estimator::{resolve_order, CrossFitReport, DerivativeFamily, OneSidedReport, OrderSchedule};
use crate::rng;
use crate::ustat::{binomial, complete_ustat, for_each_combination, mean_element, ORACLE_ENUM_CAP};

/// How a permutation-randomized run draws its permutations.
///
/// Both cross-fit sides reuse the same streams, keyed by `(seed, order,
/// replicate)`; with `reuse_across_orders` all orders share one stream per
/// replicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PermutationPlan {
    pub b: usize,
    pub reuse_across_orders: bool,
    pub seed: u64,
}

impl PermutationPlan {
    pub fn new(b: usize, seed: u64) -> Self {
        Self { b, reuse_across_orders: false, seed }
    }

    fn permutation(&self, k: usize, replicate: usize, n: usize) -> Vec<usize> {
        let order_tag = if self.reuse_across_orders { 0 } else { k as u64 };
        let mut rng = rng::stream(self.seed, &[rng::tags::PERM, order_tag, replicate as u64]);
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

/// The left functional `Lambda_k(x)` in a computable realization.
#[derive(Clone, Debug)]
pub enum LeftFunctional {
    /// `Lambda(Y) = weight * left^T Y right`; chains collapse to row-vector
    /// states.
    Bilinear { left: DVector<f64>, right: DVector<f64>, weight: f64 },
    /// `Lambda(Y) = weight * tr(Y)`; chains carry full matrix states.
    WeightedTrace { weight: f64 },
}

/// The order-`k` data of a product structure prepared at a point `x`:
/// the left functional and the factor chain `G_{k,0}, .., G_{k,k}`.
#[derive(Clone, Debug)]
pub struct OrderStructure {
    pub lam: LeftFunctional,
    pub factors: Vec<DMatrix<f64>>,
}

impl OrderStructure {
    fn order(&self) -> usize {
        self.factors.len() - 1
    }
}

enum Embedding {
    /// Increments are already algebra matrices.
    Identity,
    /// Increments are mapped into the algebra (e.g. moment pairs into
    /// augmented matrices).
    Map(Arc<dyn Fn(&Element) -> DMatrix<f64> + Send + Sync>),
}

enum EmbeddedSample<'a> {
    Borrowed(Vec<&'a DMatrix<f64>>),
    Owned(Vec<DMatrix<f64>>),
}

impl EmbeddedSample<'_> {
    fn len(&self) -> usize {
        match self {
            EmbeddedSample::Borrowed(v) => v.len(),
            EmbeddedSample::Owned(v) => v.len(),
        }
    }

    fn get(&self, i: usize) -> &DMatrix<f64> {
        match self {
            EmbeddedSample::Borrowed(v) => v[i],
            EmbeddedSample::Owned(v) => &v[i],
        }
    }
}

type BuildFn = dyn Fn(&Element, usize) -> Result<OrderStructure> + Send + Sync;

/// Per-order chain realization of a family's derivative forms.
pub struct ProductStructure {
    max_order: usize,
    carrier: ElementSignature,
    embed: Embedding,
    build: Arc<BuildFn>,
}

impl ProductStructure {
    /// Structure whose carrier is already a matrix algebra.
    pub fn new_matrix(
        max_order: usize,
        carrier: ElementSignature,
        build: impl Fn(&Element, usize) -> Result<OrderStructure> + Send + Sync + 'static,
    ) -> Self {
        Self { max_order, carrier, embed: Embedding::Identity, build: Arc::new(build) }
    }

    /// Structure over a non-algebra carrier with an explicit embedding of
    /// increments into algebra matrices.
    pub fn new_embedded(
        max_order: usize,
        carrier: ElementSignature,
        embed: impl Fn(&Element) -> DMatrix<f64> + Send + Sync + 'static,
        build: impl Fn(&Element, usize) -> Result<OrderStructure> + Send + Sync + 'static,
    ) -> Self {
        Self { max_order, carrier, embed: Embedding::Map(Arc::new(embed)), build: Arc::new(build) }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn carrier(&self) -> ElementSignature {
        self.carrier
    }

    /// Prepare the order-`k` chain data at the point `x`.
    pub fn order_at(&self, x: &Element, k: usize) -> Result<OrderStructure> {
        if k == 0 || k > self.max_order {
            return Err(Error::OrderNotCovered { k, max_order: self.max_order });
        }
        let os = (self.build)(x, k)?;
        debug_assert_eq!(os.order(), k, "builder must return k+1 factors");
        Ok(os)
    }

    fn embed_sample<'a>(&self, increments: &'a [Element]) -> Result<EmbeddedSample<'a>> {
        for inc in increments {
            let sig = inc.signature();
            if sig != self.carrier {
                return Err(Error::KindMismatch {
                    left: self.carrier.kind.name(),
                    right: sig.kind.name(),
                });
            }
        }
        Ok(match &self.embed {
            Embedding::Identity => EmbeddedSample::Borrowed(
                increments.iter().map(|e| e.as_matrix()).collect::<Result<_>>()?,
            ),
            Embedding::Map(f) => {
                EmbeddedSample::Owned(increments.iter().map(|e| f(e)).collect())
            }
        })
    }
}

impl std::fmt::Debug for ProductStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProductStructure")
            .field("max_order", &self.max_order)
            .field("carrier", &self.carrier)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// chain states and the subset-sum recursion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum ChainState {
    Row(RowDVector<f64>),
    Mat(DMatrix<f64>),
}

impl ChainState {
    fn mul(&self, m: &DMatrix<f64>, mults: &mut u64) -> ChainState {
        *mults += 1;
        match self {
            ChainState::Row(r) => ChainState::Row(r * m),
            ChainState::Mat(a) => ChainState::Mat(a * m),
        }
    }

    fn add_assign(&mut self, other: &ChainState) {
        match (self, other) {
            (ChainState::Row(a), ChainState::Row(b)) => *a += b,
            (ChainState::Mat(a), ChainState::Mat(b)) => *a += b,
            _ => unreachable!("chain states of one run share a shape"),
        }
    }
}

impl LeftFunctional {
    /// Initial chain state `Lambda-side * G_{k,0}`.
    fn start(&self, g0: &DMatrix<f64>, mults: &mut u64) -> ChainState {
        match self {
            LeftFunctional::Bilinear { left, .. } => {
                *mults += 1;
                ChainState::Row(left.transpose() * g0)
            }
            LeftFunctional::WeightedTrace { .. } => ChainState::Mat(g0.clone()),
        }
    }

    /// Apply the functional to a fully multiplied chain state.
    fn finish(&self, state: &ChainState) -> f64 {
        match (self, state) {
            (LeftFunctional::Bilinear { right, weight, .. }, ChainState::Row(r)) => {
                weight * r.iter().zip(right.iter()).map(|(a, b)| a * b).sum::<f64>()
            }
            (LeftFunctional::WeightedTrace { weight }, ChainState::Mat(m)) => weight * m.trace(),
            (LeftFunctional::Bilinear { left, right, weight }, ChainState::Mat(m)) => {
                weight * (left.transpose() * m * right)[(0, 0)]
            }
            (LeftFunctional::WeightedTrace { .. }, ChainState::Row(_)) => {
                unreachable!("trace functionals run on matrix states")
            }
        }
    }
}

/// One step of the recursion on a ladder of levels:
/// `Y_j += Y_{j-1} H G_j` for `j = top, .., 1`.
fn dp_step(
    levels: &mut [Option<ChainState>],
    h: &DMatrix<f64>,
    factors: &[DMatrix<f64>],
    top: usize,
    mults: &mut u64,
) {
    for j in (1..=top).rev() {
        let contribution = match &levels[j - 1] {
            Some(prev) => prev.mul(h, mults).mul(&factors[j], mults),
            None => continue,
        };
        match &mut levels[j] {
            Some(cur) => cur.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn dp_run<'a>(
    v0: ChainState,
    factors: &[DMatrix<f64>],
    hs: impl Iterator<Item = &'a DMatrix<f64>>,
    k: usize,
    mults: &mut u64,
) -> Option<ChainState> {
    let mut levels: Vec<Option<ChainState>> = vec![None; k + 1];
    levels[0] = Some(v0);
    let mut t = 0usize;
    for h in hs {
        t += 1;
        dp_step(&mut levels, h, factors, t.min(k), mults);
    }
    levels[k].take()
}

/// Running DP state over matrix chains, exposed so the loop invariant
/// (`Y_j` after `t` steps equals the `j`-subset chain sum of the processed
/// prefix) can be observed step by step.
pub struct DpState {
    levels: Vec<Option<ChainState>>,
    factors: Vec<DMatrix<f64>>,
    processed: usize,
    mults: u64,
}

impl DpState {
    /// `factors` are `G_1, .., G_k`; level 0 is pinned to `v0`.
    pub fn new(v0: DMatrix<f64>, factors: Vec<DMatrix<f64>>) -> Self {
        let k = factors.len();
        let mut levels: Vec<Option<ChainState>> = vec![None; k + 1];
        levels[0] = Some(ChainState::Mat(v0));
        // shift factors so that factors[j] belongs to level j
        let mut shifted = Vec::with_capacity(k + 1);
        shifted.push(DMatrix::zeros(0, 0));
        shifted.extend(factors);
        Self { levels, factors: shifted, processed: 0, mults: 0 }
    }

    pub fn step(&mut self, h: &DMatrix<f64>) {
        self.processed += 1;
        let top = self.processed.min(self.levels.len() - 1);
        dp_step(&mut self.levels, h, &self.factors, top, &mut self.mults);
    }

    pub fn processed(&self) -> usize {
        self.processed
    }

    /// The level-`j` partial sum, `None` while fewer than `j` increments have
    /// been processed.
    pub fn level(&self, j: usize) -> Option<&DMatrix<f64>> {
        match self.levels.get(j)? {
            Some(ChainState::Mat(m)) => Some(m),
            _ => None,
        }
    }
}

/// Ordered-subset chain sum
/// `Y_k = sum_{t1<..<tk} v0 H_{t1} G_1 H_{t2} G_2 .. H_{tk} G_k`
/// computed by the DP recursion in `O(n k)` matrix multiplications.
pub fn dp_chain(
    v0: &Element,
    right_factors: &[Element],
    increments: &[Element],
    k: usize,
) -> Result<Element> {
    let n = increments.len();
    if k == 0 || k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    if right_factors.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: right_factors.len() });
    }
    let v0m = v0.as_matrix()?;
    let dim = v0m.ncols();
    let factors: Vec<DMatrix<f64>> =
        right_factors.iter().map(|e| e.as_matrix().cloned()).collect::<Result<_>>()?;
    for f in &factors {
        if f.nrows() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.nrows() });
        }
    }
    let mut state = DpState::new(v0m.clone(), factors);
    for h in increments {
        let hm = h.as_matrix()?;
        if hm.nrows() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: hm.nrows() });
        }
        state.step(hm);
    }
    Ok(Element::Matrix(state.level(k).expect("k <= n increments processed").clone()))
}

fn scaled_by_binomial(total: f64, n: usize, k: usize) -> f64 {
    let c = binomial(n, k);
    if c.is_finite() {
        total / c
    } else {
        // log-scaled fallback; C(n,k) beyond f64 range
        let ln_c = statrs::function::gamma::ln_gamma((n + 1) as f64)
            - statrs::function::gamma::ln_gamma((k + 1) as f64)
            - statrs::function::gamma::ln_gamma((n - k + 1) as f64);
        total.signum() * (total.abs().ln() - ln_c).exp()
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: perm.len() });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Config("index list is not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

fn fk_pi_embedded(
    os: &OrderStructure,
    embedded: &EmbeddedSample<'_>,
    perm: &[usize],
    k: usize,
    mults: &mut u64,
) -> f64 {
    let n = embedded.len();
    let v0 = os.lam.start(&os.factors[0], mults);
    let terminal = dp_run(v0, &os.factors, perm.iter().map(|&i| embedded.get(i)), k, mults)
        .expect("k <= n validated by caller");
    scaled_by_binomial(os.lam.finish(&terminal), n, k)
}

/// `F_k(pi)`: the ordered chain average for one permutation, evaluated by the
/// DP recursion.
pub fn fk_pi(
    structure: &ProductStructure,
    x: &Element,
    increments: &[Element],
    perm: &[usize],
    k: usize,
) -> Result<f64> {
    let n = increments.len();
    if k == 0 || k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    check_permutation(perm, n)?;
    let os = structure.order_at(x, k)?;
    let embedded = structure.embed_sample(increments)?;
    let mut mults = 0u64;
    Ok(fk_pi_embedded(&os, &embedded, perm, k, &mut mults))
}

/// Brute-force oracle for [`fk_pi`]: direct sum of
/// `Lambda(G_0 H_{pi(i1)} G_1 .. H_{pi(ik)} G_k)` over increasing tuples.
pub fn fk_bruteforce(
    structure: &ProductStructure,
    x: &Element,
    increments: &[Element],
    perm: &[usize],
    k: usize,
) -> Result<f64> {
    let n = increments.len();
    if k == 0 || k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    check_permutation(perm, n)?;
    let tuples = binomial(n, k);
    if tuples > ORACLE_ENUM_CAP {
        return Err(Error::EnumerationCapExceeded { required: tuples, cap: ORACLE_ENUM_CAP });
    }
    let os = structure.order_at(x, k)?;
    let embedded = structure.embed_sample(increments)?;

    let mut total = 0.0;
    for_each_combination(n, k, |idx| {
        let mut chain = os.factors[0].clone();
        for (slot, &i) in idx.iter().enumerate() {
            chain = chain * embedded.get(perm[i]);
            chain = chain * &os.factors[slot + 1];
        }
        total += os.lam.finish(&ChainState::Mat(chain));
    });
    Ok(total / tuples)
}

/// Gap in the permutation-expectation identity: averaging `F_k(pi)` over all
/// `n!` permutations must reproduce `(1/k!) D^k f(x)[U^(k)(pilot)]`.
pub fn permutation_average_gap(
    structure: &ProductStructure,
    x: &Element,
    sample: &[Element],
    pilot: &Element,
    k: usize,
    family: &DerivativeFamily,
) -> Result<f64> {
    let n = sample.len();
    let n_fact: f64 = (1..=n).map(|i| i as f64).product();
    if n_fact > 720.0 {
        return Err(Error::EnumerationCapExceeded { required: n_fact, cap: 720.0 });
    }
    let increments: Vec<Element> = sample.iter().map(|w| w.sub(pilot)).collect::<Result<_>>()?;
    let os = structure.order_at(x, k)?;
    let embedded = structure.embed_sample(&increments)?;

    let mut mults = 0u64;
    let mut avg = 0.0;
    let mut count = 0.0;
    let mut perm: Vec<usize> = (0..n).collect();
    // Heap's algorithm over all permutations
    let mut stack = vec![0usize; n];
    avg += fk_pi_embedded(&os, &embedded, &perm, k, &mut mults);
    count += 1.0;
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            avg += fk_pi_embedded(&os, &embedded, &perm, k, &mut mults);
            count += 1.0;
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    avg /= count;

    let inv_factorial: f64 = 1.0 / (1..=k).map(|i| i as f64).product::<f64>();
    let form = family.derivative(x, k)?;
    let reference = inv_factorial * complete_ustat(&form, sample, pilot)?;
    Ok((avg - reference).abs() / avg.abs().max(reference.abs()).max(1.0))
}

// ---------------------------------------------------------------------------
// the randomized estimator
// ---------------------------------------------------------------------------

fn pre_one_sided_impl(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot: &Element,
    sample: &[Element],
    s: usize,
    permutation: &dyn Fn(usize, usize, usize) -> Vec<usize>,
    b: usize,
    mults: &mut u64,
) -> Result<OneSidedReport> {
    family.guard(pilot).map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;
    if s == 0 {
        return Err(Error::Config("the randomized estimator requires s >= 1".into()));
    }
    if s > family.max_order() {
        return Err(Error::OrderExceedsFamily { s, max_order: family.max_order() });
    }
    if s >= 2 && structure.max_order() < s {
        return Err(Error::OrderNotCovered { k: s, max_order: structure.max_order() });
    }
    let n = sample.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }

    let mut terms = Vec::with_capacity(s + 1);
    terms.push(family.value(pilot)?);

    let mean = mean_element(sample)?;
    let first_increment = mean.sub(pilot)?;
    let d1 = family.derivative(pilot, 1)?;
    terms.push(d1.evaluate(&[&first_increment])?);

    if s >= 2 {
        if s > n {
            return Err(Error::ArityExceedsSample { k: s, n });
        }
        let increments: Vec<Element> =
            sample.iter().map(|w| w.sub(pilot)).collect::<Result<_>>()?;
        let embedded = structure.embed_sample(&increments)?;
        for k in 2..=s {
            let os = structure.order_at(pilot, k)?;
            let mut acc = 0.0;
            for r in 0..b {
                let perm = permutation(k, r, n);
                debug_assert!(check_permutation(&perm, n).is_ok());
                acc += fk_pi_embedded(&os, &embedded, &perm, k, mults);
            }
            terms.push(acc / b as f64);
        }
    }
    Ok(OneSidedReport::from_terms(terms, pilot.clone(), s))
}

/// One-sided permutation-randomized estimator (Algorithm-1 path): exact
/// plug-in and first-order terms, randomized DP evaluation of orders
/// `2, .., s` averaged over `plan.b` permutations.
pub fn pre_one_sided(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot: &Element,
    sample: &[Element],
    s: usize,
    plan: &PermutationPlan,
) -> Result<OneSidedReport> {
    let mut mults = 0u64;
    pre_one_sided_impl(
        family,
        structure,
        pilot,
        sample,
        s,
        &|k, r, n| plan.permutation(k, r, n),
        plan.b,
        &mut mults,
    )
}

/// [`pre_one_sided`] with an instrumented count of algebra multiplications
/// performed by the chain recursion.
pub fn pre_one_sided_counted(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot: &Element,
    sample: &[Element],
    s: usize,
    plan: &PermutationPlan,
) -> Result<(OneSidedReport, u64)> {
    let mut mults = 0u64;
    let report = pre_one_sided_impl(
        family,
        structure,
        pilot,
        sample,
        s,
        &|k, r, n| plan.permutation(k, r, n),
        plan.b,
        &mut mults,
    )?;
    Ok((report, mults))
}

/// [`pre_one_sided`] with caller-supplied permutations `(k, r) -> pi`; test
/// mode for enumerating the symmetric group explicitly.
pub fn pre_one_sided_with_perms(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot: &Element,
    sample: &[Element],
    s: usize,
    perms: &dyn Fn(usize, usize) -> Vec<usize>,
    b: usize,
) -> Result<OneSidedReport> {
    let mut mults = 0u64;
    pre_one_sided_impl(family, structure, pilot, sample, s, &|k, r, _n| perms(k, r), b, &mut mults)
}

/// Cross-fitted permutation-randomized estimator. Both sides share the
/// permutation streams of `plan`.
pub fn pre_cross_fit(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot_fn: impl Fn(&[Element]) -> Result<Element>,
    part1: &[Element],
    part2: &[Element],
    schedule: OrderSchedule,
    plan: &PermutationPlan,
) -> Result<CrossFitReport> {
    if part1.len() != part2.len() {
        return Err(Error::UnequalSplit { left: part1.len(), right: part2.len() });
    }
    if part1.is_empty() {
        return Err(Error::EmptySample);
    }
    let s = resolve_order(schedule, part1.len()).min(family.max_order());
    let side_a = pre_one_sided(family, structure, &pilot_fn(part2)?, part1, s, plan)?;
    let side_b = pre_one_sided(family, structure, &pilot_fn(part1)?, part2, s, plan)?;
    Ok(CrossFitReport::new(side_a, side_b))
}

// ---------------------------------------------------------------------------
// exact low-order terms by collision-pattern expansion
// ---------------------------------------------------------------------------

/// Exact `(1/k!) D^k f(x)[U^(k)]` for `k <= 3` in `O(n)` chain work.
///
/// The complete U-statistic of a symmetrized chain form equals the sum of
/// ordered chains over pairwise-distinct index tuples. Expanding the
/// unconstrained sum (which telescopes to products of the total increment
/// sum) over index-collision patterns leaves one `O(n)` pass per pattern.
pub fn exact_order_term(
    structure: &ProductStructure,
    x: &Element,
    increments: &[Element],
    k: usize,
) -> Result<f64> {
    let os = structure.order_at(x, k)?;
    let embedded = structure.embed_sample(increments)?;
    let mut mults = 0u64;
    exact_term_embedded(&os, &embedded, k, &mut mults)
}

fn embedded_total(embedded: &EmbeddedSample<'_>) -> DMatrix<f64> {
    let mut total = embedded.get(0).clone();
    for i in 1..embedded.len() {
        total += embedded.get(i);
    }
    total
}

fn exact_term_embedded(
    os: &OrderStructure,
    embedded: &EmbeddedSample<'_>,
    k: usize,
    mults: &mut u64,
) -> Result<f64> {
    let n = embedded.len();
    if k == 0 || k > n {
        return Err(Error::ArityExceedsSample { k, n });
    }
    let g = &os.factors;
    let v0 = os.lam.start(&g[0], mults);

    let value = match k {
        1 => {
            let total = embedded_total(embedded);
            let state = v0.mul(&total, mults).mul(&g[1], mults);
            os.lam.finish(&state) / n as f64
        }
        2 => {
            let total = embedded_total(embedded);
            // sum over all ordered pairs, minus the diagonal
            let all = v0.mul(&total, mults).mul(&g[1], mults).mul(&total, mults).mul(&g[2], mults);
            let mut diag: Option<ChainState> = None;
            for i in 0..n {
                let h = embedded.get(i);
                let c = v0.mul(h, mults).mul(&g[1], mults).mul(h, mults);
                match &mut diag {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
            let diag = diag.expect("n >= k >= 2").mul(&g[2], mults);
            let distinct = os.lam.finish(&all) - os.lam.finish(&diag);
            0.5 * scaled_by_binomial(distinct, n, 2)
        }
        3 => {
            let total = embedded_total(embedded);
            // full unconstrained chain
            let all = v0
                .mul(&total, mults)
                .mul(&g[1], mults)
                .mul(&total, mults)
                .mul(&g[2], mults)
                .mul(&total, mults)
                .mul(&g[3], mults);
            let mut pair12: Option<ChainState> = None; // slots 1,2 share an index
            let mut pair13: Option<ChainState> = None; // slots 1,3 share an index
            let mut pair23: Option<ChainState> = None; // slots 2,3 share an index
            let mut triple: Option<ChainState> = None; // all slots share an index
            let front = v0.mul(&total, mults).mul(&g[1], mults); // v0 S G1, reused by pair23
            for i in 0..n {
                let h = embedded.get(i);
                let a1 = v0.mul(h, mults).mul(&g[1], mults); // v0 H_i G1
                let p12 = a1.mul(h, mults);
                let p13 = a1.mul(&total, mults).mul(&g[2], mults).mul(h, mults).mul(&g[3], mults);
                let p23 = front.mul(h, mults).mul(&g[2], mults).mul(h, mults);
                let p111 = a1.mul(h, mults).mul(&g[2], mults).mul(h, mults).mul(&g[3], mults);
                for (slot, c) in [
                    (&mut pair12, p12),
                    (&mut pair13, p13),
                    (&mut pair23, p23),
                    (&mut triple, p111),
                ] {
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&c),
                        None => *slot = Some(c),
                    }
                }
            }
            let pair12 =
                pair12.expect("n >= 3").mul(&g[2], mults).mul(&total, mults).mul(&g[3], mults);
            let pair23 = pair23.expect("n >= 3").mul(&g[3], mults);
            let distinct = os.lam.finish(&all) - os.lam.finish(&pair12)
                - os.lam.finish(&pair13.expect("n >= 3"))
                - os.lam.finish(&pair23)
                + 2.0 * os.lam.finish(&triple.expect("n >= 3"));
            scaled_by_binomial(distinct, n, 3) / 6.0
        }
        _ => return Err(Error::OrderNotCovered { k, max_order: 3 }),
    };
    Ok(value)
}

/// Exact one-sided estimate using closed-form chain sums for orders
/// `k <= 3` and the generic complete U-statistic above that. Numerically
/// equal to [`crate::estimator::one_sided`] but linear in `n` through order
/// three.
pub fn exact_one_sided(
    family: &DerivativeFamily,
    structure: &ProductStructure,
    pilot: &Element,
    sample: &[Element],
    s: usize,
) -> Result<OneSidedReport> {
    family.guard(pilot).map_err(|e| Error::PilotOutsideDomain(e.to_string()))?;
    if s > family.max_order() {
        return Err(Error::OrderExceedsFamily { s, max_order: family.max_order() });
    }
    let mut terms = Vec::with_capacity(s + 1);
    terms.push(family.value(pilot)?);
    if s >= 1 {
        if s >= 2 && structure.max_order() < s.min(3) {
            return Err(Error::OrderNotCovered { k: s, max_order: structure.max_order() });
        }
        let mean = mean_element(sample)?;
        let d1 = family.derivative(pilot, 1)?;
        terms.push(d1.evaluate(&[&mean.sub(pilot)?])?);

        if s >= 2 {
            let increments: Vec<Element> =
                sample.iter().map(|w| w.sub(pilot)).collect::<Result<_>>()?;
            let embedded = structure.embed_sample(&increments)?;
            let mut mults = 0u64;
            let mut inv_factorial = 1.0f64;
            for k in 2..=s {
                inv_factorial /= k as f64;
                if k <= 3 {
                    let os = structure.order_at(pilot, k)?;
                    terms.push(exact_term_embedded(&os, &embedded, k, &mut mults)?);
                } else {
                    let form = family.derivative(pilot, k)?;
                    let u = complete_ustat(&form, sample, pilot)?;
                    terms.push(inv_factorial * u);
                }
            }
        }
    }
    Ok(OneSidedReport::from_terms(terms, pilot.clone(), s))
}

/// Exact cross-fitted estimate through [`exact_one_sided`].
pub fn exact_cross_fit(
    family: &DerivativeFamily,
    structure: &ProductStructure,
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
    let side_a = exact_one_sided(family, structure, &pilot_fn(part2)?, part1, s)?;
    let side_b = exact_one_sided(family, structure, &pilot_fn(part1)?, part2, s)?;
    Ok(CrossFitReport::new(side_a, side_b))
}
