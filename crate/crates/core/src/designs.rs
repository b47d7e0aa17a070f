//! Sampling designs p(s), subsampling schemes q(s1|s), inclusion
//! probabilities, and exhaustive enumeration for small cases.
//!
//! Supported designs: simple random sampling without replacement,
//! stratified SRS with fixed per-stratum allocation, and conditional
//! (rejective) Poisson sampling with probabilities proportional to a size
//! variable. The first two can be enumerated exactly, which is what the
//! unbiasedness certification leans on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Population;
use crate::error::{Error, Result};
use crate::numeric::kahan_sum;
use crate::rng::StreamKey;

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

/// What to sample and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignSpec {
    Srs { n: usize },
    StratifiedSrs { alloc: Allocation },
    /// Fixed-size Poisson sampling with probabilities proportional to a
    /// feature column (0-based index into the x vector).
    ConditionalPoisson { n: usize, size_feature: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Allocation {
    /// Explicit n_h per normalized stratum label.
    PerStratum(Vec<usize>),
    /// Total n split proportionally to stratum sizes (largest remainder,
    /// every stratum gets at least one unit).
    Proportional { n: usize },
}

/// Training/test subsampling scheme q(s1|s).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsampleSpec {
    SrsFixed { n1: usize },
    DeleteOne,
}

impl SubsampleSpec {
    pub fn n1(&self, n: usize) -> usize {
        match self {
            SubsampleSpec::SrsFixed { n1 } => *n1,
            SubsampleSpec::DeleteOne => n - 1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            SubsampleSpec::SrsFixed { n1 } => {
                if *n1 < 1 || *n1 >= n {
                    return Err(Error::Invalid(format!(
                        "subsample.n1 = {n1} violates 1 <= n1 <= n-1 (n = {n})"
                    )));
                }
            }
            SubsampleSpec::DeleteOne => {
                if n < 2 {
                    return Err(Error::Invalid(format!(
                        "delete-one subsampling needs n >= 2 (n = {n})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-stratum population and sample counts, carried by stratified draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub n_pop: usize,
    pub n: usize,
}

/// Descriptor of the design that generated a sample; what the estimators
/// need to recover conditional probabilities later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignTag {
    Srs { n: usize, n_pop: usize },
    StratifiedSrs { strata: Vec<StratumCount> },
    ConditionalPoisson { n: usize, n_pop: usize },
}

impl DesignTag {
    pub fn name(&self) -> &'static str {
        match self {
            DesignTag::Srs { .. } => "srs",
            DesignTag::StratifiedSrs { .. } => "stratified-srs",
            DesignTag::ConditionalPoisson { .. } => "conditional-poisson",
        }
    }

    pub fn n_pop(&self) -> usize {
        match self {
            DesignTag::Srs { n_pop, .. } | DesignTag::ConditionalPoisson { n_pop, .. } => *n_pop,
            DesignTag::StratifiedSrs { strata } => strata.iter().map(|s| s.n_pop).sum(),
        }
    }
}

/// A realized sample: sorted population positions with aligned first-order
/// inclusion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub positions: Vec<usize>,
    pub pi: Vec<f64>,
    pub tag: DesignTag,
}

impl SampleDraw {
    pub fn n(&self) -> usize {
        self.positions.len()
    }
}

/// A training/test partition of a sample. `s1`/`s2` hold population
/// positions; `pi1`, `pi2` and `pi2_inv` are aligned with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub pi2_inv: Vec<f64>,
    pub pi2_exact: bool,
}

impl Split {
    pub fn n1(&self) -> usize {
        self.s1.len()
    }

    pub fn n2(&self) -> usize {
        self.s2.len()
    }
}

/// Conditional test-set inclusion probability of one unit, with its
/// reciprocal computed from the same rational form (so that e.g.
/// 1/pi2 + (n-1) = N holds machine-exactly under SRS).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pi2 {
    pub value: f64,
    pub inv: f64,
    pub exact: bool,
}

impl Pi2 {
    /// Exact law under an SRS parent (or within one stratum of a
    /// stratified SRS parent, with stratum-level counts).
    pub fn srs_exact(n_pop: usize, n: usize, n1: usize) -> Pi2 {
        let num = (n - n1) as f64;
        let den = (n_pop - n1) as f64;
        Pi2 {
            value: num / den,
            inv: den / num,
            exact: true,
        }
    }

    /// Low-sampling-fraction approximation pi_j / (n (1 - n1/N)), for
    /// parents whose conditional law is not exactly known.
    pub fn approx(pi_j: f64, n: usize, n1: usize, n_pop: usize) -> Pi2 {
        let denom = n as f64 * (1.0 - n1 as f64 / n_pop as f64);
        Pi2 {
            value: pi_j / denom,
            inv: denom / pi_j,
            exact: false,
        }
    }
}

/// Conditional inclusion probability of one test unit given a training
/// subsample of size `n1`. For stratified parents callers pass the
/// stratum-level counts as (n_pop, n, n1); the split constructors below do
/// that bookkeeping automatically.
pub fn cond_pi2(design: &DesignTag, n: usize, n1: usize, pi_j: f64, n_pop: usize) -> Pi2 {
    match design {
        DesignTag::Srs { .. } | DesignTag::StratifiedSrs { .. } => Pi2::srs_exact(n_pop, n, n1),
        DesignTag::ConditionalPoisson { .. } => Pi2::approx(pi_j, n, n1, n_pop),
    }
}

/// True when some population unit outside s1 has zero conditional
/// probability of ever appearing in the test set: under a stratified
/// parent, a stratum whose allocation is already exhausted by s1 can no
/// longer contribute test units, so the error correction cannot reach it
/// and exact conditional unbiasedness is lost for that split.
pub fn s2_coverage_gap(sample: &SampleDraw, pop: &Population, split: &Split) -> bool {
    match &sample.tag {
        DesignTag::Srs { .. } | DesignTag::ConditionalPoisson { .. } => false,
        DesignTag::StratifiedSrs { strata } => {
            let mut n1_h = vec![0usize; strata.len()];
            for pos in &split.s1 {
                n1_h[pop.stratum(*pos).expect("stratified sample over population without strata")] += 1;
            }
            strata
                .iter()
                .zip(&n1_h)
                .any(|(st, filled)| *filled == st.n && st.n_pop > st.n)
        }
    }
}

/// Delete-one pi2 for the sample unit at slot `j`, as used by the
/// delete-one estimators and the stability diagnostics.
pub fn loo_pi2(sample: &SampleDraw, pop: &Population, slot: usize) -> Pi2 {
    let n = sample.n();
    match &sample.tag {
        DesignTag::Srs { n_pop, .. } => Pi2::srs_exact(*n_pop, n, n - 1),
        DesignTag::StratifiedSrs { strata } => {
            let h = pop
                .stratum(sample.positions[slot])
                .expect("stratified sample over population without strata");
            let st = strata[h];
            // Deleting one unit of stratum h leaves n_h - 1 of it in s1.
            Pi2::srs_exact(st.n_pop, st.n, st.n - 1)
        }
        DesignTag::ConditionalPoisson { n_pop, .. } => {
            Pi2::approx(sample.pi[slot], n, n - 1, *n_pop)
        }
    }
}

// ---------------------------------------------------------------------------
// Combinatorics
// ---------------------------------------------------------------------------

/// C(n, k) saturating at u128::MAX.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Lexicographic k-subsets of 0..n.
pub struct Combinations {
    n: usize,
    k: usize,
    state: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        let state = if k <= n {
            Some((0..k).collect())
        } else {
            None
        };
        Combinations { n, k, state }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.state.as_ref()?.clone();
        // advance
        let state = self.state.as_mut().unwrap();
        if self.k == 0 {
            self.state = None;
            return Some(current);
        }
        let mut i = self.k;
        loop {
            if i == 0 {
                self.state = None;
                break;
            }
            i -= 1;
            if state[i] != i + self.n - self.k {
                state[i] += 1;
                for j in i + 1..self.k {
                    state[j] = state[j - 1] + 1;
                }
                break;
            }
        }
        Some(current)
    }
}

fn check_budget(needed: u128, budget: u64) -> Result<()> {
    if needed > budget as u128 {
        Err(Error::EnumerationBudget { needed, budget })
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Inclusion probabilities proportional to size
// ---------------------------------------------------------------------------

/// Probability-proportional-to-size inclusion probabilities with iterated
/// capping: units whose proportional share exceeds 1 are fixed at 1 and
/// the remainder rescaled, until a fixpoint. The result sums to n.
pub fn pps_inclusion_probs(sizes: &[f64], n: usize) -> Result<Vec<f64>> {
    let n_pop = sizes.len();
    if n < 1 || n > n_pop {
        return Err(Error::InvalidDesign(format!(
            "design.n = {n} violates 1 <= n <= N (N = {n_pop})"
        )));
    }
    if let Some(bad) = sizes.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidDesign(format!(
            "size variable must be strictly positive and finite, got {bad}"
        )));
    }
    let mut pi = vec![0.0; n_pop];
    let mut capped = vec![false; n_pop];
    loop {
        let remaining = n - capped.iter().filter(|c| **c).count();
        let total: f64 = kahan_sum(
            sizes
                .iter()
                .zip(&capped)
                .filter(|(_, c)| !**c)
                .map(|(s, _)| *s),
        );
        let mut newly_capped = false;
        for i in 0..n_pop {
            if capped[i] {
                pi[i] = 1.0;
                continue;
            }
            let v = remaining as f64 * sizes[i] / total;
            if v > 1.0 {
                capped[i] = true;
                newly_capped = true;
            } else {
                pi[i] = v;
            }
        }
        if !newly_capped {
            break;
        }
    }
    Ok(pi)
}

// ---------------------------------------------------------------------------
// Conditional Poisson sampling
// ---------------------------------------------------------------------------

/// Poisson-binomial pmf of the number of successes among independent
/// Bernoulli(w_i), truncated at `n_max`.
fn poisson_binomial_pmf(w: &[f64], n_max: usize) -> Vec<f64> {
    let mut f = vec![0.0; n_max + 1];
    f[0] = 1.0;
    let mut upper = 0usize;
    for &wi in w {
        upper = (upper + 1).min(n_max);
        for j in (1..=upper).rev() {
            f[j] = f[j] * (1.0 - wi) + f[j - 1] * wi;
        }
        f[0] *= 1.0 - wi;
    }
    f
}

/// First-order inclusion probabilities of fixed-size (conditional)
/// Poisson sampling with working probabilities `w` and size `n`:
/// psi_i = w_i * P(others sum to n-1) / P(all sum to n).
fn cp_first_order(w: &[f64], n: usize) -> Vec<f64> {
    let m = w.len();
    let f = poisson_binomial_pmf(w, n);
    let denom = f[n];
    let mut psi = vec![0.0; m];
    let mut g = vec![0.0; n]; // leave-one-out pmf, indices 0..n-1
    for i in 0..m {
        let wi = w[i];
        // The downdate recursion amplifies roundoff by w/(1-w) per step,
        // so it is only trusted where that factor contracts.
        let mut ok = wi <= 0.4;
        if ok {
            let q = 1.0 - wi;
            let mut prev = 0.0;
            for j in 0..n {
                let v = (f[j] - wi * prev) / q;
                if v < -1e-12 {
                    ok = false;
                    break;
                }
                let v = v.max(0.0);
                g[j] = v;
                prev = v;
            }
        }
        if !ok {
            // rebuild the pmf without unit i
            let others: Vec<f64> = w
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .collect();
            let direct = poisson_binomial_pmf(&others, n.saturating_sub(1));
            g[..n].copy_from_slice(&direct[..n]);
        }
        psi[i] = wi * g[n - 1] / denom;
    }
    psi
}

/// Calibrate rejective-Poisson working probabilities so the realized
/// fixed-size first-order inclusion probabilities match `targets`
/// (damped fixed-point on the odds; tolerance 1e-8, at most 1000 rounds).
fn cp_calibrate(targets: &[f64], n: usize) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 1000;
    let mut odds: Vec<f64> = targets.iter().map(|p| p / (1.0 - p)).collect();
    for _ in 0..MAX_ITER {
        let w: Vec<f64> = odds.iter().map(|o| o / (1.0 + o)).collect();
        let psi = cp_first_order(&w, n);
        let worst = targets
            .iter()
            .zip(&psi)
            .map(|(t, p)| (t - p).abs())
            .fold(0.0f64, f64::max);
        if worst < TOL {
            return Ok(w);
        }
        for (o, (t, p)) in odds.iter_mut().zip(targets.iter().zip(&psi)) {
            let factor = (t / p).clamp(0.5, 2.0);
            *o *= factor;
        }
    }
    Err(Error::InvalidDesign(
        "conditional Poisson calibration did not converge within 1000 iterations".into(),
    ))
}

/// A design prepared for repeated drawing. Conditional Poisson calibration
/// happens once here, not per draw.
#[derive(Debug, Clone)]
pub enum Sampler {
    Srs {
        n: usize,
        n_pop: usize,
    },
    StratifiedSrs {
        /// positions of each stratum in population order
        members: Vec<Vec<usize>>,
        counts: Vec<StratumCount>,
    },
    ConditionalPoisson {
        n: usize,
        /// reported inclusion probabilities (the calibration targets)
        targets: Vec<f64>,
        /// rejective working probabilities for the non-certainty units
        working: Vec<f64>,
        /// population positions of units with pi = 1
        certain: Vec<usize>,
        /// population positions of the remaining units, aligned with `working`
        free: Vec<usize>,
    },
}

impl Sampler {
    pub fn prepare(pop: &Population, design: &DesignSpec) -> Result<Sampler> {
        let n_pop = pop.n();
        match design {
            DesignSpec::Srs { n } => {
                if *n < 1 || *n > n_pop {
                    return Err(Error::InvalidDesign(format!(
                        "design.n = {n} violates 1 <= n <= N (N = {n_pop})"
                    )));
                }
                Ok(Sampler::Srs { n: *n, n_pop })
            }
            DesignSpec::StratifiedSrs { alloc } => {
                let sizes = pop.stratum_sizes()?;
                let alloc = resolve_allocation(&sizes, alloc)?;
                let mut members = vec![Vec::new(); sizes.len()];
                for pos in 0..n_pop {
                    members[pop.stratum(pos).unwrap()].push(pos);
                }
                let counts = sizes
                    .iter()
                    .zip(&alloc)
                    .map(|(n_h_pop, n_h)| StratumCount {
                        n_pop: *n_h_pop,
                        n: *n_h,
                    })
                    .collect();
                Ok(Sampler::StratifiedSrs { members, counts })
            }
            DesignSpec::ConditionalPoisson { n, size_feature } => {
                if *size_feature >= pop.dim() {
                    return Err(Error::InvalidDesign(format!(
                        "design.size_feature = {size_feature} out of range (p = {})",
                        pop.dim()
                    )));
                }
                let sizes: Vec<f64> = (0..n_pop).map(|i| pop.x(i)[*size_feature]).collect();
                let targets = pps_inclusion_probs(&sizes, *n)?;
                let mut certain = Vec::new();
                let mut free = Vec::new();
                let mut free_targets = Vec::new();
                for (pos, &t) in targets.iter().enumerate() {
                    if t >= 1.0 {
                        certain.push(pos);
                    } else {
                        free.push(pos);
                        free_targets.push(t);
                    }
                }
                let n_free = *n - certain.len();
                let working = if n_free == 0 {
                    Vec::new()
                } else {
                    cp_calibrate(&free_targets, n_free)?
                };
                Ok(Sampler::ConditionalPoisson {
                    n: *n,
                    targets,
                    working,
                    certain,
                    free,
                })
            }
        }
    }

    pub fn tag(&self) -> DesignTag {
        match self {
            Sampler::Srs { n, n_pop } => DesignTag::Srs {
                n: *n,
                n_pop: *n_pop,
            },
            Sampler::StratifiedSrs { counts, .. } => DesignTag::StratifiedSrs {
                strata: counts.clone(),
            },
            Sampler::ConditionalPoisson { n, targets, .. } => DesignTag::ConditionalPoisson {
                n: *n,
                n_pop: targets.len(),
            },
        }
    }

    pub fn draw(&self, key: StreamKey) -> SampleDraw {
        let mut rng = key.rng();
        match self {
            Sampler::Srs { n, n_pop } => {
                let positions = srs_indices(&mut rng, *n_pop, *n);
                let pi = vec![*n as f64 / *n_pop as f64; *n];
                SampleDraw {
                    positions,
                    pi,
                    tag: self.tag(),
                }
            }
            Sampler::StratifiedSrs { members, counts } => {
                let mut rows: Vec<(usize, f64)> = Vec::new();
                for (h, st) in counts.iter().enumerate() {
                    let pi_h = st.n as f64 / st.n_pop as f64;
                    for k in srs_indices(&mut rng, st.n_pop, st.n) {
                        rows.push((members[h][k], pi_h));
                    }
                }
                rows.sort_unstable_by_key(|(pos, _)| *pos);
                let (positions, pi) = rows.into_iter().unzip();
                SampleDraw {
                    positions,
                    pi,
                    tag: self.tag(),
                }
            }
            Sampler::ConditionalPoisson {
                n,
                targets,
                working,
                certain,
                free,
            } => {
                let n_free = *n - certain.len();
                let mut picked: Vec<usize> = Vec::with_capacity(*n);
                // rejective: independent Bernoulli until the size comes out right
                for _attempt in 0..1_000_000u64 {
                    picked.clear();
                    for (k, &w) in working.iter().enumerate() {
                        if rng.gen::<f64>() < w {
                            picked.push(free[k]);
                        }
                    }
                    if picked.len() == n_free {
                        break;
                    }
                }
                assert_eq!(picked.len(), n_free, "rejective sampling failed to hit the target size");
                let mut positions: Vec<usize> = certain.iter().copied().chain(picked).collect();
                positions.sort_unstable();
                let pi = positions.iter().map(|pos| targets[*pos]).collect();
                SampleDraw {
                    positions,
                    pi,
                    tag: self.tag(),
                }
            }
        }
    }
}

fn srs_indices<R: Rng>(rng: &mut R, n_pop: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_pop).collect();
    for i in 0..n {
        let j = rng.gen_range(i..n_pop);
        idx.swap(i, j);
    }
    let mut picked: Vec<usize> = idx[..n].to_vec();
    picked.sort_unstable();
    picked
}

fn resolve_allocation(sizes: &[usize], alloc: &Allocation) -> Result<Vec<usize>> {
    let k = sizes.len();
    if k == 0 {
        return Err(Error::InvalidDesign("population has no stratum labels".into()));
    }
    match alloc {
        Allocation::PerStratum(ns) => {
            if ns.len() != k {
                return Err(Error::InvalidDesign(format!(
                    "design.alloc has {} entries but the population has {k} strata",
                    ns.len()
                )));
            }
            for (h, (n_h, n_h_pop)) in ns.iter().zip(sizes).enumerate() {
                if *n_h < 1 || n_h > n_h_pop {
                    return Err(Error::InvalidDesign(format!(
                        "design.alloc[{h}] = {n_h} violates 1 <= n_h <= N_h (N_h = {n_h_pop})"
                    )));
                }
            }
            Ok(ns.clone())
        }
        Allocation::Proportional { n } => {
            let n_pop: usize = sizes.iter().sum();
            if *n < k || *n > n_pop {
                return Err(Error::InvalidDesign(format!(
                    "design.n = {n} violates K <= n <= N for proportional allocation (K = {k}, N = {n_pop})"
                )));
            }
            // largest-remainder with a floor of one unit per stratum
            let mut base: Vec<usize> = Vec::with_capacity(k);
            let mut rema: Vec<(f64, usize)> = Vec::with_capacity(k);
            let mut assigned = 0usize;
            for (h, n_h_pop) in sizes.iter().enumerate() {
                let share = *n as f64 * *n_h_pop as f64 / n_pop as f64;
                let mut b = share.floor() as usize;
                b = b.max(1).min(*n_h_pop);
                assigned += b;
                base.push(b);
                rema.push((share - share.floor(), h));
            }
            rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut i = 0;
            while assigned < *n {
                let h = rema[i % k].1;
                if base[h] < sizes[h] {
                    base[h] += 1;
                    assigned += 1;
                }
                i += 1;
            }
            // floors of one unit per stratum can overshoot; walk the
            // smallest remainders back down
            let mut j = 0;
            while assigned > *n {
                let h = rema[k - 1 - (j % k)].1;
                if base[h] > 1 {
                    base[h] -= 1;
                    assigned -= 1;
                }
                j += 1;
            }
            Ok(base)
        }
    }
}

/// Draw one sample. For repeated draws prepare a [`Sampler`] instead.
pub fn draw_sample(pop: &Population, design: &DesignSpec, key: StreamKey) -> Result<SampleDraw> {
    Ok(Sampler::prepare(pop, design)?.draw(key))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Build a split from the sample slots selected into s1.
fn build_split(sample: &SampleDraw, pop: &Population, in_s1: &[bool]) -> Split {
    let n = sample.n();
    let n1 = in_s1.iter().filter(|b| **b).count();
    let mut s1 = Vec::with_capacity(n1);
    let mut pi1 = Vec::with_capacity(n1);
    let mut s2 = Vec::with_capacity(n - n1);
    let mut pi2 = Vec::with_capacity(n - n1);
    let mut pi2_inv = Vec::with_capacity(n - n1);
    let mut exact = true;

    // realized per-stratum training counts, for stratified parents
    let stratum_n1: Option<Vec<usize>> = match &sample.tag {
        DesignTag::StratifiedSrs { strata } => {
            let mut counts = vec![0usize; strata.len()];
            for (slot, sel) in in_s1.iter().enumerate() {
                if *sel {
                    counts[pop.stratum(sample.positions[slot]).unwrap()] += 1;
                }
            }
            Some(counts)
        }
        _ => None,
    };

    for slot in 0..n {
        let pos = sample.positions[slot];
        if in_s1[slot] {
            s1.push(pos);
            pi1.push(sample.pi[slot] * n1 as f64 / n as f64);
        } else {
            let p2 = match &sample.tag {
                DesignTag::Srs { n_pop, .. } => Pi2::srs_exact(*n_pop, n, n1),
                DesignTag::StratifiedSrs { strata } => {
                    let h = pop.stratum(pos).unwrap();
                    let st = strata[h];
                    Pi2::srs_exact(st.n_pop, st.n, stratum_n1.as_ref().unwrap()[h])
                }
                DesignTag::ConditionalPoisson { n_pop, .. } => {
                    Pi2::approx(sample.pi[slot], n, n1, *n_pop)
                }
            };
            exact &= p2.exact;
            s2.push(pos);
            pi2.push(p2.value);
            pi2_inv.push(p2.inv);
        }
    }
    Split {
        s1,
        s2,
        pi1,
        pi2,
        pi2_inv,
        pi2_exact: exact,
    }
}

/// Draw one training/test split of the sample.
pub fn draw_split(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    pop: &Population,
    key: StreamKey,
) -> Result<Split> {
    let n = sample.n();
    scheme.validate(n)?;
    let mut rng = key.rng();
    let mut in_s1 = vec![false; n];
    match scheme {
        SubsampleSpec::SrsFixed { n1 } => {
            for slot in srs_indices(&mut rng, n, *n1) {
                in_s1[slot] = true;
            }
        }
        SubsampleSpec::DeleteOne => {
            let out = rng.gen_range(0..n);
            for (slot, sel) in in_s1.iter_mut().enumerate() {
                *sel = slot != out;
            }
        }
    }
    Ok(build_split(sample, pop, &in_s1))
}

/// All splits with their q-probabilities.
pub fn enumerate_splits(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    pop: &Population,
) -> Result<Vec<(Split, f64)>> {
    enumerate_splits_with_budget(sample, scheme, pop, DEFAULT_ENUMERATION_BUDGET)
}

pub fn enumerate_splits_with_budget(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    pop: &Population,
    budget: u64,
) -> Result<Vec<(Split, f64)>> {
    let n = sample.n();
    scheme.validate(n)?;
    match scheme {
        SubsampleSpec::DeleteOne => {
            let q = 1.0 / n as f64;
            let mut out = Vec::with_capacity(n);
            for out_slot in 0..n {
                let mut in_s1 = vec![true; n];
                in_s1[out_slot] = false;
                out.push((build_split(sample, pop, &in_s1), q));
            }
            Ok(out)
        }
        SubsampleSpec::SrsFixed { n1 } => {
            let count = binomial(n, *n1);
            check_budget(count, budget)?;
            let q = 1.0 / count as f64;
            let mut out = Vec::with_capacity(count as usize);
            for slots in Combinations::new(n, *n1) {
                let mut in_s1 = vec![false; n];
                for slot in slots {
                    in_s1[slot] = true;
                }
                out.push((build_split(sample, pop, &in_s1), q));
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Sample enumeration
// ---------------------------------------------------------------------------

/// All samples with their design probabilities p(s). Supported for SRS and
/// stratified SRS.
pub fn enumerate_samples(pop: &Population, design: &DesignSpec) -> Result<Vec<(SampleDraw, f64)>> {
    enumerate_samples_with_budget(pop, design, DEFAULT_ENUMERATION_BUDGET)
}

pub fn enumerate_samples_with_budget(
    pop: &Population,
    design: &DesignSpec,
    budget: u64,
) -> Result<Vec<(SampleDraw, f64)>> {
    let n_pop = pop.n();
    match design {
        DesignSpec::Srs { n } => {
            if *n < 1 || *n > n_pop {
                return Err(Error::InvalidDesign(format!(
                    "design.n = {n} violates 1 <= n <= N (N = {n_pop})"
                )));
            }
            let count = binomial(n_pop, *n);
            check_budget(count, budget)?;
            let p = 1.0 / count as f64;
            let tag = DesignTag::Srs { n: *n, n_pop };
            let pi = *n as f64 / n_pop as f64;
            let mut out = Vec::with_capacity(count as usize);
            for positions in Combinations::new(n_pop, *n) {
                out.push((
                    SampleDraw {
                        pi: vec![pi; *n],
                        positions,
                        tag: tag.clone(),
                    },
                    p,
                ));
            }
            Ok(out)
        }
        DesignSpec::StratifiedSrs { alloc } => {
            let sizes = pop.stratum_sizes()?;
            let alloc = resolve_allocation(&sizes, alloc)?;
            let mut members = vec![Vec::new(); sizes.len()];
            for pos in 0..n_pop {
                members[pop.stratum(pos).unwrap()].push(pos);
            }
            let mut count: u128 = 1;
            for (n_h_pop, n_h) in sizes.iter().zip(&alloc) {
                count = count.saturating_mul(binomial(*n_h_pop, *n_h));
            }
            check_budget(count, budget)?;
            let p = 1.0 / count as f64;
            let counts: Vec<StratumCount> = sizes
                .iter()
                .zip(&alloc)
                .map(|(n_h_pop, n_h)| StratumCount {
                    n_pop: *n_h_pop,
                    n: *n_h,
                })
                .collect();
            let tag = DesignTag::StratifiedSrs {
                strata: counts.clone(),
            };

            // cartesian product of per-stratum subsets
            let per_stratum: Vec<Vec<Vec<usize>>> = members
                .iter()
                .zip(&alloc)
                .map(|(m, n_h)| {
                    Combinations::new(m.len(), *n_h)
                        .map(|ks| ks.iter().map(|k| m[*k]).collect())
                        .collect()
                })
                .collect();
            let mut out = Vec::with_capacity(count as usize);
            let mut cursor = vec![0usize; per_stratum.len()];
            loop {
                let mut positions: Vec<usize> = Vec::new();
                for (h, c) in cursor.iter().enumerate() {
                    positions.extend_from_slice(&per_stratum[h][*c]);
                }
                positions.sort_unstable();
                let pi = positions
                    .iter()
                    .map(|pos| {
                        let h = pop.stratum(*pos).unwrap();
                        counts[h].n as f64 / counts[h].n_pop as f64
                    })
                    .collect();
                out.push((
                    SampleDraw {
                        positions,
                        pi,
                        tag: tag.clone(),
                    },
                    p,
                ));
                // odometer
                let mut h = per_stratum.len();
                loop {
                    if h == 0 {
                        return Ok(out);
                    }
                    h -= 1;
                    cursor[h] += 1;
                    if cursor[h] < per_stratum[h].len() {
                        break;
                    }
                    cursor[h] = 0;
                }
            }
        }
        DesignSpec::ConditionalPoisson { .. } => {
            Err(Error::EnumerationUnsupported("conditional-poisson".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;

    fn pop_of(ys: &[f64]) -> Population {
        let records = ys
            .iter()
            .enumerate()
            .map(|(i, y)| UnitRecord {
                id: i as u64 + 1,
                y: *y,
                x: vec![1.0 + i as f64],
                stratum: None,
            })
            .collect();
        Population::from_records(records).unwrap()
    }

    fn stratified_pop(sizes: &[usize]) -> Population {
        let mut records = Vec::new();
        let mut id = 1;
        for (h, sz) in sizes.iter().enumerate() {
            for k in 0..*sz {
                records.push(UnitRecord {
                    id,
                    y: (h * 10 + k) as f64,
                    x: vec![1.0],
                    stratum: Some(h as i64),
                });
                id += 1;
            }
        }
        Population::from_records(records).unwrap()
    }

    #[test]
    fn srs_census_has_unit_probabilities() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let s = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(1)).unwrap();
        assert_eq!(s.positions, vec![0, 1, 2, 3]);
        assert!(s.pi.iter().all(|p| *p == 1.0));
    }

    #[test]
    fn srs_half_sample_pi() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let s = draw_sample(&pop, &DesignSpec::Srs { n: 2 }, StreamKey::new(1)).unwrap();
        assert_eq!(s.n(), 2);
        assert!(s.pi.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn pps_equal_sizes_reduce_to_srs() {
        let pi = pps_inclusion_probs(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(pi, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn pps_caps_dominant_unit() {
        let pi = pps_inclusion_probs(&[10.0, 1.0, 1.0], 2).unwrap();
        assert!((pi[0] - 1.0).abs() < 1e-15);
        assert!((pi[1] - 0.5).abs() < 1e-15);
        assert!((pi[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pps_fixpoint_sums_to_n_and_is_monotone() {
        let sizes = [5.0, 4.0, 3.0, 2.0, 1.0];
        let pi = pps_inclusion_probs(&sizes, 2).unwrap();
        // independent oracle: one fixpoint round by hand (no unit caps here)
        let total: f64 = sizes.iter().sum();
        for (p, s) in pi.iter().zip(&sizes) {
            assert!((p - 2.0 * s / total).abs() < 1e-15);
        }
        let sum: f64 = kahan_sum(pi.iter().copied());
        assert!((sum - 2.0).abs() < 1e-12);
        for w in pi.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn enumerate_srs_counts_and_probability_mass() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0]);
        let samples = enumerate_samples(&pop, &DesignSpec::Srs { n: 2 }).unwrap();
        assert_eq!(samples.len(), 6);
        let mass = kahan_sum(samples.iter().map(|(_, p)| *p));
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumerate_srs_70_samples() {
        let pop = pop_of(&(0..8).map(|i| i as f64).collect::<Vec<_>>());
        let samples = enumerate_samples(&pop, &DesignSpec::Srs { n: 4 }).unwrap();
        assert_eq!(samples.len() as u128, binomial(8, 4));
        assert_eq!(samples.len(), 70);
        let mass = kahan_sum(samples.iter().map(|(_, p)| *p));
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumerate_stratified_product() {
        let pop = stratified_pop(&[2, 2]);
        let design = DesignSpec::StratifiedSrs {
            alloc: Allocation::PerStratum(vec![1, 1]),
        };
        let samples = enumerate_samples(&pop, &design).unwrap();
        assert_eq!(samples.len(), 4);
        for (_, p) in &samples {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn per_unit_inclusion_matches_pi_under_enumeration() {
        let pop = pop_of(&(0..6).map(|i| i as f64 + 1.0).collect::<Vec<_>>());
        let samples = enumerate_samples(&pop, &DesignSpec::Srs { n: 3 }).unwrap();
        for unit in 0..6 {
            let mass = kahan_sum(
                samples
                    .iter()
                    .filter(|(s, _)| s.positions.contains(&unit))
                    .map(|(_, p)| *p),
            );
            assert!((mass - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn split_probabilities_delete_one() {
        let pop = pop_of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 5 }, StreamKey::new(3)).unwrap();
        let splits = enumerate_splits(&sample, &SubsampleSpec::DeleteOne, &pop).unwrap();
        assert_eq!(splits.len(), 5);
        for (_, q) in &splits {
            assert!((q - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn split_pi_product_rule_and_exact_pi2() {
        // SRS parent N=10, n=4, n1=2: pi1 = 0.2, pi2 = 0.25 exact.
        let pop = pop_of(&(0..10).map(|i| i as f64).collect::<Vec<_>>());
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(7)).unwrap();
        let split = draw_split(
            &sample,
            &SubsampleSpec::SrsFixed { n1: 2 },
            &pop,
            StreamKey::new(8),
        )
        .unwrap();
        assert_eq!(split.n1(), 2);
        for p in &split.pi1 {
            assert!((p - 0.2).abs() < 1e-15);
        }
        for p in &split.pi2 {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!(split.pi2_exact);
    }

    #[test]
    fn cond_pi2_exact_and_approx_branches() {
        // exact: (n-n1)/(N-n1) at N=10, n=4, n1=3 is 1/7
        let tag = DesignTag::Srs { n: 4, n_pop: 10 };
        let p2 = cond_pi2(&tag, 4, 3, 0.4, 10);
        assert!(p2.exact);
        assert!((p2.value - 1.0 / 7.0).abs() < 1e-15);
        // approx branch: pi_j / (n (1 - n1/N)); with pi_j = n/N this is
        // 1/(N - n1), which coincides with the exact value when n - n1 = 1
        let tag_cp = DesignTag::ConditionalPoisson { n: 4, n_pop: 10 };
        let a = cond_pi2(&tag_cp, 4, 3, 0.4, 10);
        assert!(!a.exact);
        let direct = 0.4 / (4.0 * (1.0 - 3.0 / 10.0));
        assert!((a.value - direct).abs() < 1e-15);
        assert!((a.value - p2.value).abs() < 1e-15);
        // the gap appears as soon as the test set has more than one unit
        let e2 = cond_pi2(&tag, 4, 2, 0.4, 10);
        let a2 = cond_pi2(&tag_cp, 4, 2, 0.4, 10);
        assert!((e2.value - 0.25).abs() < 1e-15);
        assert!((a2.value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn loo_nhat_identity_under_srs() {
        // pi2^{-1} + (n-1) = (N-n+1) + (n-1) = N, machine-exact
        let pop = pop_of(&(0..9).map(|i| i as f64).collect::<Vec<_>>());
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(5)).unwrap();
        for slot in 0..4 {
            let p2 = loo_pi2(&sample, &pop, slot);
            assert_eq!(p2.inv + 3.0, 9.0);
        }
    }

    #[test]
    fn exact_pi2_mass_balances_test_size() {
        // sum of pi2 over U \ s1 equals n - n1 under SRS
        let n_pop = 10usize;
        let (n, n1) = (4usize, 2usize);
        let p2 = Pi2::srs_exact(n_pop, n, n1);
        let total = p2.value * (n_pop - n1) as f64;
        assert!((total - (n - n1) as f64).abs() < 1e-12);
    }

    #[test]
    fn srs_split_membership_rate() {
        // each sample unit enters s1 with frequency n1/n over all splits
        let pop = pop_of(&(0..7).map(|i| i as f64).collect::<Vec<_>>());
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(2)).unwrap();
        let splits = enumerate_splits(&sample, &SubsampleSpec::SrsFixed { n1 : 3 }, &pop).unwrap();
        for pos in &sample.positions {
            let mass = kahan_sum(
                splits
                    .iter()
                    .filter(|(sp, _)| sp.s1.contains(pos))
                    .map(|(_, q)| *q),
            );
            assert!((mass - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn induced_training_law_sums_to_one() {
        // p1(s1) = sum over supersets of q(s1|s) p(s) must be a law
        let pop = pop_of(&(0..6).map(|i| i as f64).collect::<Vec<_>>());
        let samples = enumerate_samples(&pop, &DesignSpec::Srs { n: 3 }).unwrap();
        let mut mass = std::collections::BTreeMap::new();
        for (sample, p) in &samples {
            for (split, q) in
                enumerate_splits(sample, &SubsampleSpec::SrsFixed { n1: 2 }, &pop).unwrap()
            {
                *mass.entry(split.s1.clone()).or_insert(0.0) += p * q;
            }
        }
        let total = kahan_sum(mass.values().copied());
        assert!((total - 1.0).abs() < 1e-12);
        // and by symmetry every s1 has the same induced probability
        let expect = 1.0 / binomial(6, 2) as f64;
        for v in mass.values() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let pop = pop_of(&(0..30).map(|i| i as f64).collect::<Vec<_>>());
        let err =
            enumerate_samples_with_budget(&pop, &DesignSpec::Srs { n: 15 }, 1000).unwrap_err();
        match err {
            Error::EnumerationBudget { needed, budget } => {
                assert_eq!(needed, binomial(30, 15));
                assert_eq!(budget, 1000);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn conditional_poisson_calibration_hits_targets() {
        // moderately skewed sizes; the calibrated law must reproduce the
        // capped pps targets as realized fixed-size inclusion probabilities
        let sizes: Vec<f64> = (1..=12).map(|i| i as f64).collect();
        let targets = pps_inclusion_probs(&sizes, 4).unwrap();
        let w = cp_calibrate(&targets, 4).unwrap();
        let psi = cp_first_order(&w, 4);
        for (t, p) in targets.iter().zip(&psi) {
            assert!((t - p).abs() < 1e-7, "target {t} vs realized {p}");
        }
    }

    #[test]
    fn leave_one_out_downdate_matches_direct_pmf() {
        let w = [0.9, 0.2, 0.5, 0.75, 0.05, 0.6];
        let n = 3;
        let full = cp_first_order(&w, n);
        // direct route: psi_i = w_i * P_{-i}(n-1) / P(n)
        let denom = poisson_binomial_pmf(&w, n)[n];
        for i in 0..w.len() {
            let others: Vec<f64> = w
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .collect();
            let direct = w[i] * poisson_binomial_pmf(&others, n - 1)[n - 1] / denom;
            assert!((full[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn proportional_allocation_respects_totals() {
        let sizes = [50usize, 30, 20];
        let alloc = resolve_allocation(&sizes, &Allocation::Proportional { n: 10 }).unwrap();
        assert_eq!(alloc.iter().sum::<usize>(), 10);
        assert_eq!(alloc, vec![5, 3, 2]);
    }

    #[test]
    fn stratified_draw_respects_allocation() {
        let pop = stratified_pop(&[4, 6]);
        let design = DesignSpec::StratifiedSrs {
            alloc: Allocation::PerStratum(vec![2, 2]),
        };
        let s = draw_sample(&pop, &design, StreamKey::new(11)).unwrap();
        assert_eq!(s.n(), 4);
        let in_first = s.positions.iter().filter(|p| **p < 4).count();
        assert_eq!(in_first, 2);
        for (pos, pi) in s.positions.iter().zip(&s.pi) {
            let expect = if *pos < 4 { 0.5 } else { 2.0 / 6.0 };
            assert!((pi - expect).abs() < 1e-15);
        }
    }
}
