//! The estimator family: Horvitz-Thompson, GREG, the subsampled difference
//! estimator, and its Rao-Blackwell averages (exact, Monte Carlo,
//! delete-one), plus the linear-weight representation and the jackknifed
//! GREG comparison baseline.
//!
//! The difference estimator is evaluated in its "observed s1 total +
//! predictions over the rest + corrected errors on s2" form rather than
//! any X-total reduction, so the same code path is valid for non-linear
//! predictors.

use nalgebra::{DMatrix, DVector};

use crate::data::Population;
use crate::designs::{draw_split, enumerate_splits, SampleDraw, Split, SubsampleSpec};
use crate::error::{Error, Result};
use crate::learners::{fit, wls_fit, LearnerSpec, Predictor, TrainingSet, WlsFit};
use crate::numeric::{kahan_sum, KahanSum};
use crate::rng::{fingerprint_indices, StreamKey};

/// Per-split estimates with their q-probabilities and q-weighted mean.
#[derive(Debug, Clone)]
pub struct FoldEstimates {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub aggregate: f64,
}

impl FoldEstimates {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), weights.len());
        let aggregate = kahan_sum(values.iter().zip(&weights).map(|(v, w)| v * w));
        FoldEstimates {
            values,
            weights,
            aggregate,
        }
    }

    /// q-variance of the fold values around the aggregate.
    pub fn q_variance(&self) -> f64 {
        kahan_sum(
            self.values
                .iter()
                .zip(&self.weights)
                .map(|(v, w)| w * (v - self.aggregate) * (v - self.aggregate)),
        )
    }
}

/// A point estimate with optional variance and bookkeeping flags.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub point: f64,
    pub variance: Option<f64>,
    pub variance_method: String,
    pub mc_error: Option<f64>,
    pub flags: Vec<String>,
}

impl EstimateReport {
    fn point_only(point: f64, flags: Vec<String>) -> Self {
        EstimateReport {
            point,
            variance: None,
            variance_method: "none".into(),
            mc_error: None,
            flags,
        }
    }
}

fn push_flag(flags: &mut Vec<String>, flag: &str) {
    if !flags.iter().any(|f| f == flag) {
        flags.push(flag.to_string());
    }
}

/// Horvitz-Thompson expansion estimator of the population total.
pub fn ht(sample: &SampleDraw, pop: &Population) -> f64 {
    let mut acc = KahanSum::new();
    for (pos, pi) in sample.positions.iter().zip(&sample.pi) {
        acc.add(pop.y(*pos) / pi);
    }
    acc.value()
}

#[derive(Debug, Clone)]
pub struct GregEstimate {
    pub value: f64,
    pub degenerate: bool,
}

fn full_sample_wls(sample: &SampleDraw, pop: &Population, intercept: bool) -> Result<WlsFit> {
    let weights: Vec<f64> = sample.pi.iter().map(|pi| 1.0 / pi).collect();
    let ts = TrainingSet::from_units(pop, &sample.positions, &weights)?;
    Ok(wls_fit(&ts, intercept))
}

/// X^T b with the intercept column (when present) totalling N.
fn x_total_dot(b: &WlsFit, pop: &Population) -> f64 {
    let (_, x_totals) = pop.totals();
    let mut acc = KahanSum::new();
    let slope = if b.intercept {
        acc.add(b.coef[0] * pop.n() as f64);
        &b.coef[1..]
    } else {
        &b.coef[..]
    };
    for (bj, xj) in slope.iter().zip(&x_totals) {
        acc.add(bj * xj);
    }
    acc.value()
}

/// GREG estimator: X^T b plus the inverse-probability-weighted residual
/// correction, with b fitted by WLS on the whole sample.
pub fn greg(sample: &SampleDraw, pop: &Population, intercept: bool) -> Result<GregEstimate> {
    let b = full_sample_wls(sample, pop, intercept)?;
    let mut acc = KahanSum::new();
    acc.add(x_total_dot(&b, pop));
    for (pos, pi) in sample.positions.iter().zip(&sample.pi) {
        let resid = pop.y(*pos) - b.predict(pop.x(*pos));
        acc.add(resid / pi);
    }
    Ok(GregEstimate {
        value: acc.value(),
        degenerate: b.degenerate,
    })
}

/// The subsampled difference estimator: observed total on s1, predictions
/// over the rest of the population, plus inverse-pi2-weighted prediction
/// errors on s2. The predictor must have been fitted on s1 alone; the
/// fingerprint check enforces it.
pub fn y1(split: &Split, predictor: &Predictor, pop: &Population) -> Result<f64> {
    let ids: Vec<u64> = split.s1.iter().map(|pos| pop.id(*pos)).collect();
    if fingerprint_indices(&ids) != predictor.fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    let mut in_s1 = vec![false; pop.n()];
    for pos in &split.s1 {
        in_s1[*pos] = true;
    }

    let mut acc = KahanSum::new();
    for pos in &split.s1 {
        acc.add(pop.y(*pos));
    }
    for (pos, sel) in in_s1.iter().enumerate() {
        if !sel {
            acc.add(predictor.predict(pop.x(pos)));
        }
    }
    for (pos, inv) in split.s2.iter().zip(&split.pi2_inv) {
        let err = pop.y(*pos) - predictor.predict(pop.x(*pos));
        acc.add(err * inv);
    }
    Ok(acc.value())
}

/// Fit the learner on the training half of a split, exactly as the fold
/// computations do (same content-keyed randomness).
pub fn fit_on_split(learner: &LearnerSpec, pop: &Population, split: &Split) -> Result<Predictor> {
    let ts = TrainingSet::from_split(pop, split)?;
    fit(learner, &ts)
}

fn note_fold(
    sample: &SampleDraw,
    pop: &Population,
    split: &Split,
    predictor: &Predictor,
    flags: &mut Vec<String>,
) {
    if predictor.degenerate {
        push_flag(flags, "degenerate-fit");
    }
    if !split.pi2_exact {
        push_flag(flags, "pi2-approximate");
    }
    if crate::designs::s2_coverage_gap(sample, pop, split) {
        push_flag(flags, "s2-coverage-gap");
    }
}

/// Exact Rao-Blackwell estimator: q-weighted mean of the difference
/// estimator over every split the scheme can produce. Randomized learners
/// get one keyed draw per split, so the average is over splits only.
pub fn rb_exact(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<(EstimateReport, FoldEstimates)> {
    let splits = enumerate_splits(sample, scheme, pop)?;
    let mut values = Vec::with_capacity(splits.len());
    let mut weights = Vec::with_capacity(splits.len());
    let mut flags = Vec::new();
    for (split, q) in &splits {
        let predictor = fit_on_split(learner, pop, split)?;
        note_fold(sample, pop, split, &predictor, &mut flags);
        values.push(y1(split, &predictor, pop)?);
        weights.push(*q);
    }
    let folds = FoldEstimates::new(values, weights);
    Ok((EstimateReport::point_only(folds.aggregate, flags), folds))
}

/// Delete-one Rao-Blackwell estimator: the mean of the n delete-j fold
/// estimates, using exact pi2 where the design admits one.
pub fn rb_loo(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<(EstimateReport, FoldEstimates)> {
    rb_exact(sample, &SubsampleSpec::DeleteOne, learner, pop)
}

/// Delete-one estimator forced onto the approximate pi2 branch
/// pi_j / (n (1 - n1/N)), regardless of the parent design. Under SRS this
/// coincides with the exact branch; elsewhere it is the computable option.
pub fn rb_loo_approx_pi2(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<(EstimateReport, FoldEstimates)> {
    let splits = enumerate_splits(sample, &SubsampleSpec::DeleteOne, pop)?;
    let n = sample.n();
    let n_pop = sample.tag.n_pop();
    let mut values = Vec::with_capacity(splits.len());
    let mut weights = Vec::with_capacity(splits.len());
    let mut flags = vec!["pi2-approximate".to_string()];
    for (mut split, q) in splits {
        let slot = sample
            .positions
            .iter()
            .position(|pos| *pos == split.s2[0])
            .expect("test unit missing from parent sample");
        let p2 = crate::designs::Pi2::approx(sample.pi[slot], n, n - 1, n_pop);
        split.pi2[0] = p2.value;
        split.pi2_inv[0] = p2.inv;
        split.pi2_exact = false;
        let predictor = fit_on_split(learner, pop, &split)?;
        if predictor.degenerate {
            push_flag(&mut flags, "degenerate-fit");
        }
        values.push(y1(&split, &predictor, pop)?);
        weights.push(q);
    }
    let folds = FoldEstimates::new(values, weights);
    Ok((EstimateReport::point_only(folds.aggregate, flags), folds))
}

/// How [`rb_mc`] draws its splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McDraw {
    /// Independent draws from q(s1|s); the standard Monte Carlo estimator.
    Independent,
    /// Each enumerable split exactly once, in shuffled order. With K equal
    /// to the number of splits this reproduces the exact RB value.
    WithoutReplacement,
}

/// Monte Carlo Rao-Blackwell estimator: mean of K subsample draws. The
/// report carries the Monte Carlo error sqrt(sum (v - mean)^2 / (K(K-1)))
/// when K >= 2.
pub fn rb_mc(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    k: usize,
    key: StreamKey,
    pop: &Population,
) -> Result<(EstimateReport, Vec<f64>)> {
    rb_mc_with(sample, scheme, learner, k, key, pop, McDraw::Independent)
}

pub fn rb_mc_with(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    k: usize,
    key: StreamKey,
    pop: &Population,
    draw: McDraw,
) -> Result<(EstimateReport, Vec<f64>)> {
    if k < 1 {
        return Err(Error::Invalid("rb_mc needs K >= 1".into()));
    }
    scheme.validate(sample.n())?;
    let mut flags = Vec::new();
    let mut values = Vec::with_capacity(k);
    match draw {
        McDraw::Independent => {
            for rep in 0..k {
                let split = draw_split(sample, scheme, pop, key.child("split").index(rep as u64))?;
                let predictor = fit_on_split(learner, pop, &split)?;
                note_fold(sample, pop, &split, &predictor, &mut flags);
                values.push(y1(&split, &predictor, pop)?);
            }
        }
        McDraw::WithoutReplacement => {
            let splits = enumerate_splits(sample, scheme, pop)?;
            if k != splits.len() {
                return Err(Error::Invalid(format!(
                    "without-replacement draw needs K = number of splits ({}), got {k}",
                    splits.len()
                )));
            }
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..splits.len()).collect();
            order.shuffle(&mut key.child("shuffle").rng());
            for i in order {
                let (split, _) = &splits[i];
                let predictor = fit_on_split(learner, pop, split)?;
                note_fold(sample, pop, split, &predictor, &mut flags);
                values.push(y1(split, &predictor, pop)?);
            }
        }
    }
    let point = kahan_sum(values.iter().copied()) / k as f64;
    let mc_error = if k >= 2 {
        let ss = kahan_sum(values.iter().map(|v| (v - point) * (v - point)));
        Some((ss / (k as f64 * (k as f64 - 1.0))).sqrt())
    } else {
        None
    };
    Ok((
        EstimateReport {
            point,
            variance: None,
            variance_method: "none".into(),
            mc_error,
            flags,
        },
        values,
    ))
}

/// Linear-weight representation of the exact RB estimator under the WLS
/// learner: weights over the sample, independent of y, whose dot product
/// with any response vector reproduces the RB point value.
#[derive(Debug, Clone)]
pub struct RbWeights {
    /// aligned with sample.positions
    pub weights: Vec<f64>,
    /// implied calibration totals sum_i w*_i x_i (recorded, not asserted)
    pub calibration: Vec<f64>,
    pub flags: Vec<String>,
}

pub fn rb_linear_weights(
    sample: &SampleDraw,
    pop: &Population,
    scheme: &SubsampleSpec,
    intercept: bool,
) -> Result<RbWeights> {
    let splits = enumerate_splits(sample, scheme, pop)?;
    let n = sample.n();
    let dim = pop.dim() + usize::from(intercept);
    let aug = |pos: usize| -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        let mut j = 0;
        if intercept {
            v[0] = 1.0;
            j = 1;
        }
        for xv in pop.x(pos) {
            v[j] = *xv;
            j += 1;
        }
        v
    };
    let (_, x_totals) = pop.totals();
    let mut x_total_aug = DVector::zeros(dim);
    {
        let mut j = 0;
        if intercept {
            x_total_aug[0] = pop.n() as f64;
            j = 1;
        }
        for xv in &x_totals {
            x_total_aug[j] = *xv;
            j += 1;
        }
    }

    let slot_of: std::collections::HashMap<usize, usize> = sample
        .positions
        .iter()
        .enumerate()
        .map(|(slot, pos)| (*pos, slot))
        .collect();
    let mut acc = vec![KahanSum::new(); n];
    let mut flags = Vec::new();
    for (split, q) in &splits {
        let mut gram = DMatrix::zeros(dim, dim);
        let mut x1_total = DVector::zeros(dim);
        for (pos, pi1) in split.s1.iter().zip(&split.pi1) {
            let v = aug(*pos);
            gram.ger(1.0 / pi1, &v, &v, 1.0);
            x1_total += &v;
        }
        let mut x1c_hat = DVector::zeros(dim);
        for (pos, inv) in split.s2.iter().zip(&split.pi2_inv) {
            x1c_hat += aug(*pos) * *inv;
        }
        let d = &x_total_aug - &x1_total - &x1c_hat; // X1c - X1c_hat

        let svd = gram.svd(true, true);
        let s_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let u = if s_max == 0.0 {
            push_flag(&mut flags, "singular-gram");
            DVector::zeros(dim)
        } else {
            let tol = 1e-10 * s_max;
            let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
            if rank < dim {
                push_flag(&mut flags, "singular-gram");
            }
            svd.solve(&d, tol).expect("SVD solve with both factors")
        };
        for (pos, pi1) in split.s1.iter().zip(&split.pi1) {
            let w = 1.0 + u.dot(&aug(*pos)) / pi1;
            acc[slot_of[pos]].add(q * w);
        }
        for (pos, inv) in split.s2.iter().zip(&split.pi2_inv) {
            acc[slot_of[pos]].add(q * inv);
        }
    }
    let weights: Vec<f64> = acc.iter().map(|a| a.value()).collect();
    let mut calibration = vec![KahanSum::new(); dim];
    for (slot, pos) in sample.positions.iter().enumerate() {
        let v = aug(*pos);
        for (c, vj) in calibration.iter_mut().zip(v.iter()) {
            c.add(weights[slot] * vj);
        }
    }
    Ok(RbWeights {
        weights,
        calibration: calibration.iter().map(|c| c.value()).collect(),
        flags,
    })
}

/// Mean of the delete-one jackknife GREG replicates; the classical
/// bias-reduced GREG this method is compared against.
pub fn greg_jackknife_avg(sample: &SampleDraw, pop: &Population, intercept: bool) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Invalid("jackknifed GREG needs n >= 2".into()));
    }
    let mut acc = KahanSum::new();
    for out in 0..n {
        let b = delete_one_wls(sample, pop, out, intercept)?;
        let mut rep = KahanSum::new();
        rep.add(x_total_dot(&b, pop));
        let scale = n as f64 / (n as f64 - 1.0);
        for (slot, (pos, pi)) in sample.positions.iter().zip(&sample.pi).enumerate() {
            if slot == out {
                continue;
            }
            let resid = pop.y(*pos) - b.predict(pop.x(*pos));
            rep.add(scale * resid / pi);
        }
        acc.add(rep.value());
    }
    Ok(acc.value() / n as f64)
}

/// Delete-one WLS fit on the sample (weights 1/pi; the coefficients are
/// invariant to the common rescaling into 1/pi1).
pub fn delete_one_wls(
    sample: &SampleDraw,
    pop: &Population,
    out_slot: usize,
    intercept: bool,
) -> Result<WlsFit> {
    let positions: Vec<usize> = sample
        .positions
        .iter()
        .enumerate()
        .filter(|(slot, _)| *slot != out_slot)
        .map(|(_, pos)| *pos)
        .collect();
    let weights: Vec<f64> = sample
        .pi
        .iter()
        .enumerate()
        .filter(|(slot, _)| *slot != out_slot)
        .map(|(_, pi)| 1.0 / pi)
        .collect();
    let ts = TrainingSet::from_units(pop, &positions, &weights)?;
    Ok(wls_fit(&ts, intercept))
}
