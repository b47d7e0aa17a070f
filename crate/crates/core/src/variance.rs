//! Variance estimators for the subsampling estimators: the conditional
//! SRS estimator for the difference estimator, the Rao-Blackwell variance
//! identity, the delete-one jackknife, and the Monte Carlo compositions.
//!
//! Difference-form estimators admit negative realizations; reports carry
//! the raw value, truncate at zero, and flag the truncation.

use crate::data::Population;
use crate::designs::{DesignTag, SampleDraw, Split, SubsampleSpec};
use crate::error::{Error, Result};
use crate::estimators::{fit_on_split, rb_exact, EstimateReport, FoldEstimates};
use crate::learners::{LearnerSpec, Predictor};
use crate::numeric::{kahan_sum, mean, KahanSum};
use crate::rng::StreamKey;

/// A variance estimate with its pre-truncation value and named parts.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub value: f64,
    pub raw_value: f64,
    pub truncated: bool,
    pub components: Vec<(String, f64)>,
}

impl VarianceReport {
    pub fn from_raw(raw: f64, components: Vec<(String, f64)>) -> Self {
        VarianceReport {
            value: raw.max(0.0),
            raw_value: raw,
            truncated: raw < 0.0,
            components,
        }
    }
}

/// Unbiased estimator of V2(Y1 | s1) under an SRS (or stratified SRS)
/// parent: the standard expansion-estimator variance applied to the
/// prediction errors observed on s2, stratum by stratum.
pub fn y1_var_srs(
    split: &Split,
    predictor: &Predictor,
    pop: &Population,
    tag: &DesignTag,
) -> Result<f64> {
    let ids: Vec<u64> = split.s1.iter().map(|pos| pop.id(*pos)).collect();
    if crate::rng::fingerprint_indices(&ids) != predictor.fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    match tag {
        DesignTag::Srs { n_pop, .. } => {
            let errors: Vec<f64> = split
                .s2
                .iter()
                .map(|pos| pop.y(*pos) - predictor.predict(pop.x(*pos)))
                .collect();
            stratum_term(*n_pop, split.n1(), &errors)
        }
        DesignTag::StratifiedSrs { strata } => {
            let mut n1_h = vec![0usize; strata.len()];
            for pos in &split.s1 {
                n1_h[pop.stratum(*pos).expect("stratified tag without strata")] += 1;
            }
            let mut errors_h: Vec<Vec<f64>> = vec![Vec::new(); strata.len()];
            for pos in &split.s2 {
                let h = pop.stratum(*pos).unwrap();
                errors_h[h].push(pop.y(*pos) - predictor.predict(pop.x(*pos)));
            }
            let mut acc = KahanSum::new();
            for (h, st) in strata.iter().enumerate() {
                acc.add(stratum_term(st.n_pop, n1_h[h], &errors_h[h])?);
            }
            Ok(acc.value())
        }
        DesignTag::ConditionalPoisson { .. } => Err(Error::VarianceUnavailable(
            "no exact conditional variance estimator under conditional Poisson parents; use the jackknife path".into(),
        )),
    }
}

/// (N - n1)^2 (1 - n2/(N - n1)) s_e^2 / n2 for one stratum's error sample.
fn stratum_term(n_pop: usize, n1: usize, errors: &[f64]) -> Result<f64> {
    let remainder = n_pop - n1;
    let n2 = errors.len();
    if remainder == 0 {
        return Ok(0.0); // training exhausted the stratum
    }
    if n2 == remainder {
        return Ok(0.0); // census of the remainder: fpc kills the term
    }
    if n2 < 2 {
        return Err(Error::VarianceUnavailable(format!(
            "need at least two test units per stratum (got {n2}); use the jackknife path"
        )));
    }
    let ebar = mean(errors);
    let s2 = kahan_sum(errors.iter().map(|e| (e - ebar) * (e - ebar))) / (n2 as f64 - 1.0);
    let rem = remainder as f64;
    Ok(rem * rem * (1.0 - n2 as f64 / rem) * s2 / n2 as f64)
}

/// Rao-Blackwell variance identity at a given variance split:
/// raw = V_hat(Y1)(split) - V_q(Y1 | s), with V_q computed exactly over
/// the enumerated folds. Deterministic; used directly by the enumeration
/// oracles.
pub fn rb_var_at(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    pop: &Population,
    vsplit: &Split,
) -> Result<VarianceReport> {
    let (_, folds) = rb_exact(sample, scheme, learner, pop)?;
    let vq = folds.q_variance();
    let predictor = fit_on_split(learner, pop, vsplit)?;
    let v1 = y1_var_srs(vsplit, &predictor, pop, &sample.tag)?;
    Ok(VarianceReport::from_raw(
        v1 - vq,
        vec![("y1_var".into(), v1), ("vq".into(), vq)],
    ))
}

/// Design-unbiased variance estimator for the exact RB estimator:
/// one q-drawn split supplies V_hat(Y1), the exact q-spread of the folds
/// is subtracted.
pub fn rb_var(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    pop: &Population,
    key: StreamKey,
) -> Result<VarianceReport> {
    let vsplit = crate::designs::draw_split(sample, scheme, pop, key.child("rb-var-split"))?;
    rb_var_at(sample, scheme, learner, pop, &vsplit)
}

/// Variant averaging V_hat(Y1) over every split instead of drawing one;
/// same expectation, smaller spread, proportionally more fitting work.
pub fn rb_var_avg(
    sample: &SampleDraw,
    scheme: &SubsampleSpec,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<VarianceReport> {
    let (_, folds) = rb_exact(sample, scheme, learner, pop)?;
    let vq = folds.q_variance();
    let splits = crate::designs::enumerate_splits(sample, scheme, pop)?;
    let mut acc = KahanSum::new();
    for (split, q) in &splits {
        let predictor = fit_on_split(learner, pop, split)?;
        acc.add(q * y1_var_srs(split, &predictor, pop, &sample.tag)?);
    }
    let v1 = acc.value();
    Ok(VarianceReport::from_raw(
        v1 - vq,
        vec![("y1_var".into(), v1), ("vq".into(), vq)],
    ))
}

/// Core of the delete-one jackknife: z_(j) = (fold_j - (n/N) point) / (N - n),
/// scaled spread N^2 / (n (m - 1)) sum (z - zbar)^2 over the m supplied
/// fold values. With the m = n exact folds this is the proposed jackknife;
/// with m = K Monte Carlo draws it is the as-if-exact plug-in.
fn jackknife_core(values: &[f64], point: f64, n_pop: usize, n: usize) -> f64 {
    let m = values.len();
    let nn = n_pop as f64;
    let z: Vec<f64> = values
        .iter()
        .map(|v| (v - (n as f64 / nn) * point) / (nn - n as f64))
        .collect();
    let zbar = mean(&z);
    let ss = kahan_sum(z.iter().map(|z| (z - zbar) * (z - zbar)));
    nn * nn / (n as f64 * (m as f64 - 1.0)) * ss
}

/// Jackknife variance estimator for the delete-one RB estimator.
pub fn jackknife_var(
    folds: &FoldEstimates,
    rb_point: f64,
    n_pop: usize,
    n: usize,
) -> Result<VarianceReport> {
    if n < 2 {
        return Err(Error::Invalid("jackknife needs n >= 2".into()));
    }
    if folds.values.len() != n {
        return Err(Error::Invalid(format!(
            "jackknife expects the n = {n} delete-one folds, got {}",
            folds.values.len()
        )));
    }
    if n_pop == n {
        // census: the estimator is exactly Y, variance zero by design
        return Ok(VarianceReport::from_raw(0.0, vec![("census".into(), 1.0)]));
    }
    let value = jackknife_core(&folds.values, rb_point, n_pop, n);
    Ok(VarianceReport::from_raw(
        value,
        vec![("jackknife".into(), value)],
    ))
}

/// Design-unbiased variance estimator for the Monte Carlo RB estimator:
/// mean of the per-replicate variance estimates minus the replicate
/// spread. Also reports the Monte Carlo error term
/// V_hat_q = spread / (K - 1).
pub fn mc_rb_var(replicates: &[f64], per_replicate_var: &[f64]) -> Result<VarianceReport> {
    let k = replicates.len();
    if k < 2 {
        return Err(Error::Invalid("mc_rb_var needs K >= 2".into()));
    }
    if per_replicate_var.len() != k {
        return Err(Error::Invalid(
            "one variance estimate per replicate is required".into(),
        ));
    }
    let point = mean(replicates);
    let term1 = mean(per_replicate_var);
    let term2 = kahan_sum(replicates.iter().map(|v| (v - point) * (v - point))) / k as f64;
    let mc_term = term2 / (k as f64 - 1.0);
    Ok(VarianceReport::from_raw(
        term1 - term2,
        vec![
            ("mean_y1_var".into(), term1),
            ("replicate_spread".into(), term2),
            ("vq_mc".into(), mc_term),
        ],
    ))
}

/// Variance for the Monte Carlo delete-one estimator: the jackknife applied
/// to the K fold draws as if they were the exact folds, plus the Monte
/// Carlo error term.
pub fn loo_mc_var(
    fold_draws: &[f64],
    mc_component: f64,
    n_pop: usize,
    n: usize,
) -> Result<VarianceReport> {
    let k = fold_draws.len();
    if k < 2 {
        return Err(Error::Invalid("loo_mc_var needs K >= 2".into()));
    }
    if n < 2 {
        return Err(Error::Invalid("jackknife needs n >= 2".into()));
    }
    if n_pop == n {
        return Ok(VarianceReport::from_raw(
            mc_component,
            vec![("census".into(), 1.0), ("mc".into(), mc_component)],
        ));
    }
    let point = mean(fold_draws);
    let jack = jackknife_core(fold_draws, point, n_pop, n);
    Ok(VarianceReport::from_raw(
        jack + mc_component,
        vec![("jackknife".into(), jack), ("mc".into(), mc_component)],
    ))
}

/// Convenience wrapper: delete-one RB estimate with its jackknife variance
/// in one report. Flags a design mismatch when the parent is not an
/// (approximately) equal-probability design, mirroring the jackknife's
/// known failure under probability-proportional-to-size parents.
pub fn rb_loo_with_jackknife(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<(EstimateReport, FoldEstimates, VarianceReport)> {
    let (mut report, folds) = crate::estimators::rb_loo(sample, learner, pop)?;
    let vr = jackknife_var(&folds, report.point, pop.n(), sample.n())?;
    if matches!(sample.tag, DesignTag::ConditionalPoisson { .. }) {
        report.flags.push("jackknife-design-mismatch".into());
    }
    report.variance = Some(vr.value);
    report.variance_method = "jackknife".into();
    Ok((report, folds, vr))
}
