//! Empirical renderings of the delete-one stability conditions, evaluated
//! on realized samples and on growing sample-size traces. The statistics
//! are diagnostics, not proofs: they quantify how much the fitted
//! predictor moves when one or two units are deleted, and how well the
//! leave-one-out expansion tracks population-level means.

use rand::Rng;

use crate::data::Population;
use crate::designs::{draw_sample, loo_pi2, DesignSpec, SampleDraw};
use crate::error::{Error, Result};
use crate::learners::{fit, LearnerSpec, Predictor, TrainingSet};
use crate::numeric::{kahan_sum, mean, median, ols_slope};
use crate::rng::StreamKey;

/// Probe units used to approximate "for all k in U" for large populations.
const PROBE_CAP: usize = 500;
/// Ordered pairs evaluated by the second-order statistic for large n.
const PAIR_CAP: usize = 200;
/// Exhaustive pair evaluation up to this sample size.
const EXHAUSTIVE_PAIR_LIMIT: usize = 20;
/// Floor applied to statistics before log transforms.
pub const STAT_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityCondition {
    QStable,
    TwiceQ,
    PStable,
    LooConsistency,
}

impl StabilityCondition {
    pub fn tag(&self) -> &'static str {
        match self {
            StabilityCondition::QStable => "q",
            StabilityCondition::TwiceQ => "twice-q",
            StabilityCondition::PStable => "p",
            StabilityCondition::LooConsistency => "loo-consistency",
        }
    }
}

/// Per-size replicated statistics with the fitted log-log slope.
#[derive(Debug, Clone)]
pub struct StabilityTrace {
    pub condition: StabilityCondition,
    pub sizes: Vec<usize>,
    /// statistics[size_index][replicate]
    pub statistics: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
    pub slope: f64,
}

fn probe_grid(n_pop: usize) -> Vec<usize> {
    if n_pop <= PROBE_CAP {
        (0..n_pop).collect()
    } else {
        (0..PROBE_CAP).map(|t| t * n_pop / PROBE_CAP).collect()
    }
}

fn full_sample_fit(sample: &SampleDraw, learner: &LearnerSpec, pop: &Population) -> Result<Predictor> {
    let weights: Vec<f64> = sample.pi.iter().map(|pi| 1.0 / pi).collect();
    let ts = TrainingSet::from_units(pop, &sample.positions, &weights)?;
    fit(learner, &ts)
}

/// Fit with the sample units at `drop_slots` removed; weights stay 1/pi
/// (the learners are invariant to the common rescaling into 1/pi1).
fn delete_fit(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
    drop_slots: &[usize],
) -> Result<Predictor> {
    let keep: Vec<usize> = (0..sample.n()).filter(|s| !drop_slots.contains(s)).collect();
    let positions: Vec<usize> = keep.iter().map(|s| sample.positions[*s]).collect();
    let weights: Vec<f64> = keep.iter().map(|s| 1.0 / sample.pi[*s]).collect();
    let ts = TrainingSet::from_units(pop, &positions, &weights)?;
    fit(learner, &ts)
}

fn grid_predictions(pred: &Predictor, pop: &Population, grid: &[usize]) -> Vec<f64> {
    grid.iter().map(|pos| pred.predict(pop.x(*pos))).collect()
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// First-order delete-one perturbation: max over deleted units j and probe
/// units k of |mu(x_k, s_j) - mu(x_k, s)|.
pub fn q_stability_stat(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<f64> {
    if sample.n() < 2 {
        return Err(Error::Invalid("q-stability needs n >= 2".into()));
    }
    let grid = probe_grid(pop.n());
    let full = grid_predictions(&full_sample_fit(sample, learner, pop)?, pop, &grid);
    let mut worst = 0.0f64;
    for j in 0..sample.n() {
        let pred_j = delete_fit(sample, learner, pop, &[j])?;
        worst = worst.max(max_abs_gap(&grid_predictions(&pred_j, pop, &grid), &full));
    }
    Ok(worst)
}

/// First- and second-order perturbations. The second statistic compares
/// delete-two against delete-one fits over ordered pairs (i, j); all
/// n(n-1) pairs for n <= 20, otherwise a seeded subsample of 200.
pub fn twice_q_stability_stat(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
    key: StreamKey,
) -> Result<(f64, f64)> {
    let n = sample.n();
    if n < 3 {
        return Err(Error::Invalid("twice-q stability needs n >= 3".into()));
    }
    let grid = probe_grid(pop.n());
    let full = grid_predictions(&full_sample_fit(sample, learner, pop)?, pop, &grid);

    let mut delete_one: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut first = 0.0f64;
    for j in 0..n {
        let pred_j = delete_fit(sample, learner, pop, &[j])?;
        let preds = grid_predictions(&pred_j, pop, &grid);
        first = first.max(max_abs_gap(&preds, &full));
        delete_one.push(preds);
    }

    let pairs: Vec<(usize, usize)> = if n <= EXHAUSTIVE_PAIR_LIMIT {
        let mut all = Vec::with_capacity(n * (n - 1));
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    all.push((i, j));
                }
            }
        }
        all
    } else {
        let mut rng = key.child("pairs").rng();
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < PAIR_CAP {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                seen.insert((i, j));
            }
        }
        seen.into_iter().collect()
    };

    let mut second = 0.0f64;
    let mut cache: std::collections::BTreeMap<(usize, usize), Vec<f64>> =
        std::collections::BTreeMap::new();
    for (i, j) in pairs {
        let unordered = (i.min(j), i.max(j));
        if !cache.contains_key(&unordered) {
            let pred_ij = delete_fit(sample, learner, pop, &[unordered.0, unordered.1])?;
            cache.insert(unordered, grid_predictions(&pred_ij, pop, &grid));
        }
        second = second.max(max_abs_gap(&cache[&unordered], &delete_one[j]));
    }
    Ok((first, second))
}

/// Leave-one-out population-size estimator 1/pi2_j + (n - 1), with the
/// exactness flag of the pi2 branch it came from. Equals N machine-exactly
/// under SRS.
pub fn loo_nhat(sample: &SampleDraw, pop: &Population, slot: usize) -> (f64, bool) {
    let p2 = loo_pi2(sample, pop, slot);
    (p2.inv + (sample.n() as f64 - 1.0), p2.exact)
}

/// Gap between the LOO-expansion-weighted sample mean of the full-sample
/// predictions and their population mean.
pub fn p_stability_stat(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Invalid("p-stability needs n >= 2".into()));
    }
    let pred = full_sample_fit(sample, learner, pop)?;
    let n_pop = pop.n() as f64;
    let weighted: Vec<f64> = (0..n)
        .map(|slot| {
            let (nhat, _) = loo_nhat(sample, pop, slot);
            (nhat / n_pop) * pred.predict(pop.x(sample.positions[slot]))
        })
        .collect();
    let sample_side = mean(&weighted);
    let pop_side = kahan_sum((0..pop.n()).map(|pos| pred.predict(pop.x(pos)))) / n_pop;
    Ok((sample_side - pop_side).abs())
}

/// The pq-variant of the p-stability gap, using the delete-j predictor for
/// unit j on both sides. Costs n refits; reported as an optional extra.
pub fn pq_stability_stat(
    sample: &SampleDraw,
    learner: &LearnerSpec,
    pop: &Population,
) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Invalid("pq-stability needs n >= 2".into()));
    }
    let n_pop = pop.n() as f64;
    let gaps: Vec<f64> = (0..n)
        .map(|slot| -> Result<f64> {
            let pred_j = delete_fit(sample, learner, pop, &[slot])?;
            let (nhat, _) = loo_nhat(sample, pop, slot);
            let own = (nhat / n_pop) * pred_j.predict(pop.x(sample.positions[slot]));
            let pop_side = kahan_sum((0..pop.n()).map(|pos| pred_j.predict(pop.x(pos)))) / n_pop;
            Ok(own - pop_side)
        })
        .collect::<Result<_>>()?;
    Ok(mean(&gaps).abs())
}

/// LOO-consistency of the design itself: gap between the averaged
/// leave-one-out HT estimates of the population mean and the true mean.
/// Under SRS this is exactly |sample mean - population mean|.
pub fn loo_consistency_stat(sample: &SampleDraw, pop: &Population) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Invalid("loo-consistency needs n >= 2".into()));
    }
    let n_pop = pop.n() as f64;
    let terms: Vec<f64> = (0..n)
        .map(|slot| {
            let (nhat, _) = loo_nhat(sample, pop, slot);
            pop.y(sample.positions[slot]) * (nhat / n_pop)
        })
        .collect();
    Ok((mean(&terms) - pop.y_mean()).abs())
}

/// Design template for traces over growing sample sizes.
#[derive(Debug, Clone)]
pub enum TraceDesign {
    Srs,
    StratifiedProportional,
    ConditionalPoisson { size_feature: usize },
}

impl TraceDesign {
    fn with_n(&self, n: usize) -> DesignSpec {
        match self {
            TraceDesign::Srs => DesignSpec::Srs { n },
            TraceDesign::StratifiedProportional => DesignSpec::StratifiedSrs {
                alloc: crate::designs::Allocation::Proportional { n },
            },
            TraceDesign::ConditionalPoisson { size_feature } => DesignSpec::ConditionalPoisson {
                n,
                size_feature: *size_feature,
            },
        }
    }
}

/// Medians of every condition statistic over replicated samples per size,
/// with ordinary least-squares slopes of log(median) on log(n).
/// Statistics are floored at 1e-15 before the log transform, so an
/// identically-zero trace reports slope 0.
pub fn stability_trace(
    pop: &Population,
    design: &TraceDesign,
    learner: &LearnerSpec,
    sizes: &[usize],
    replicates: usize,
    key: StreamKey,
) -> Result<Vec<StabilityTrace>> {
    if replicates < 1 {
        return Err(Error::Invalid("stability trace needs replicates >= 1".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.is_empty() {
        return Err(Error::Invalid(
            "stability trace sizes must be strictly increasing and non-empty".into(),
        ));
    }
    let conditions = [
        StabilityCondition::QStable,
        StabilityCondition::TwiceQ,
        StabilityCondition::PStable,
        StabilityCondition::LooConsistency,
    ];
    let mut stats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); conditions.len()];
    for (si, n) in sizes.iter().enumerate() {
        let spec = design.with_n(*n);
        let mut per_cond: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); conditions.len()];
        for r in 0..replicates {
            let skey = key.child("trace").index(si as u64).index(r as u64);
            let sample = draw_sample(pop, &spec, skey.child("sample"))?;
            let (first, second) =
                twice_q_stability_stat(&sample, learner, pop, skey.child("pairs"))?;
            per_cond[0].push(first);
            per_cond[1].push(second);
            per_cond[2].push(p_stability_stat(&sample, learner, pop)?);
            per_cond[3].push(loo_consistency_stat(&sample, pop)?);
        }
        for (c, v) in per_cond.into_iter().enumerate() {
            stats[c].push(v);
        }
    }

    let log_sizes: Vec<f64> = sizes.iter().map(|n| (*n as f64).ln()).collect();
    Ok(conditions
        .iter()
        .zip(stats)
        .map(|(cond, per_size)| {
            let medians: Vec<f64> = per_size
                .iter()
                .map(|reps| median(&mut reps.clone()))
                .collect();
            let log_medians: Vec<f64> = medians.iter().map(|m| m.max(STAT_FLOOR).ln()).collect();
            StabilityTrace {
                condition: *cond,
                sizes: sizes.to_vec(),
                statistics: per_size,
                medians,
                slope: ols_slope(&log_sizes, &log_medians),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::designs::DesignSpec;

    fn pop_from(ys: &[f64], xs: &[Vec<f64>]) -> Population {
        let records = ys
            .iter()
            .zip(xs)
            .enumerate()
            .map(|(i, (y, x))| UnitRecord {
                id: i as u64 + 1,
                y: *y,
                x: x.clone(),
                stratum: None,
            })
            .collect();
        Population::from_records(records).unwrap()
    }

    #[test]
    fn constant_predictor_scores_zero_everywhere() {
        // all-zero features force the degenerate WLS fit, which predicts 0
        // for every training subset: a constant predictor
        let ys: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let xs = vec![vec![0.0]; 8];
        let pop = pop_from(&ys, &xs);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(1)).unwrap();
        let learner = LearnerSpec::wls(false);
        assert_eq!(q_stability_stat(&sample, &learner, &pop).unwrap(), 0.0);
        let (first, second) =
            twice_q_stability_stat(&sample, &learner, &pop, StreamKey::new(2)).unwrap();
        assert_eq!(first, 0.0);
        assert_eq!(second, 0.0);
        assert_eq!(p_stability_stat(&sample, &learner, &pop).unwrap(), 0.0);
    }

    #[test]
    fn q_stat_closed_form_for_constant_feature_wls() {
        // mu(., s_j) is the delete-j mean: the gap is |y_j - ybar| / (n-1)
        let ys = [4.0, 8.0, 1.0, 7.0, 2.0, 9.0, 3.0];
        let pop = pop_from(&ys, &vec![vec![1.0]; 7]);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 5 }, StreamKey::new(3)).unwrap();
        let got = q_stability_stat(&sample, &LearnerSpec::wls(false), &pop).unwrap();
        let sel: Vec<f64> = sample.positions.iter().map(|p| pop.y(*p)).collect();
        let ybar = mean(&sel);
        let expect = sel
            .iter()
            .map(|y| (y - ybar).abs() / 4.0)
            .fold(0.0f64, f64::max);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn twice_q_matches_direct_refit_oracle_on_three_points() {
        let ys = [2.0, 5.0, 3.0, 8.0, 1.0];
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 + 0.5]).collect();
        let pop = pop_from(&ys, &xs);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 3 }, StreamKey::new(4)).unwrap();
        let learner = LearnerSpec::wls(false);
        let (_, second) =
            twice_q_stability_stat(&sample, &learner, &pop, StreamKey::new(5)).unwrap();

        // direct oracle over all 6 ordered pairs
        let mut expect = 0.0f64;
        for j in 0..3 {
            for i in 0..3 {
                if i == j {
                    continue;
                }
                let pj = delete_fit(&sample, &learner, &pop, &[j]).unwrap();
                let pij = delete_fit(&sample, &learner, &pop, &[i, j]).unwrap();
                for pos in 0..pop.n() {
                    expect = expect.max((pij.predict(pop.x(pos)) - pj.predict(pop.x(pos))).abs());
                }
            }
        }
        assert!((second - expect).abs() < 1e-12, "{second} vs {expect}");
    }

    #[test]
    fn srs_identities_are_machine_exact() {
        let ys = [4.0, 8.0, 1.0, 7.0, 2.0, 9.0, 3.0, 6.0, 5.0];
        let xs: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let pop = pop_from(&ys, &xs);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(6)).unwrap();
        for slot in 0..4 {
            let (nhat, exact) = loo_nhat(&sample, &pop, slot);
            assert!(exact);
            assert_eq!(nhat, 9.0);
        }
        let got = loo_consistency_stat(&sample, &pop).unwrap();
        let sel: Vec<f64> = sample.positions.iter().map(|p| pop.y(*p)).collect();
        let direct = (mean(&sel) - pop.y_mean()).abs();
        assert_eq!(got, direct);
    }

    #[test]
    fn p_stat_reduces_to_mean_gap_of_predictions_under_srs() {
        let ys = [4.0, 8.0, 1.0, 7.0, 2.0, 9.0, 3.0, 6.0];
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![(i as f64).sqrt()]).collect();
        let pop = pop_from(&ys, &xs);
        let sample = draw_sample(&pop, &DesignSpec::Srs { n: 4 }, StreamKey::new(7)).unwrap();
        let learner = LearnerSpec::wls(true);
        let got = p_stability_stat(&sample, &learner, &pop).unwrap();
        let pred = full_sample_fit(&sample, &learner, &pop).unwrap();
        let mu_s: Vec<f64> = sample
            .positions
            .iter()
            .map(|pos| pred.predict(pop.x(*pos)))
            .collect();
        let mu_u: Vec<f64> = (0..8).map(|pos| pred.predict(pop.x(pos))).collect();
        let direct = (mean(&mu_s) - mean(&mu_u)).abs();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn relabeling_units_leaves_statistics_unchanged() {
        let ys = [4.0, 8.0, 1.0, 7.0, 2.0, 9.0];
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.7]).collect();
        let pop = pop_from(&ys, &xs);
        // same units, permuted row order (ids move with their rows)
        let perm = [3usize, 0, 5, 1, 4, 2];
        let registros: Vec<UnitRecord> = perm
            .iter()
            .map(|i| UnitRecord {
                id: *i as u64 + 1,
                y: ys[*i],
                x: xs[*i].clone(),
                stratum: None,
            })
            .collect();
        let pop2 = Population::from_records(registros).unwrap();

        // pick the same physical units in both populations
        let sample1 = SampleDraw {
            positions: vec![0, 2, 4],
            pi: vec![0.5; 3],
            tag: crate::designs::DesignTag::Srs { n: 3, n_pop: 6 },
        };
        let units: Vec<u64> = sample1.positions.iter().map(|p| pop.id(*p)).collect();
        let mut positions2: Vec<usize> = (0..6).filter(|p| units.contains(&pop2.id(*p))).collect();
        positions2.sort_unstable();
        let sample2 = SampleDraw {
            positions: positions2,
            pi: vec![0.5; 3],
            tag: crate::designs::DesignTag::Srs { n: 3, n_pop: 6 },
        };
        let learner = LearnerSpec::wls(true);
        let a = q_stability_stat(&sample1, &learner, &pop).unwrap();
        let b = q_stability_stat(&sample2, &learner, &pop2).unwrap();
        assert!((a - b).abs() < 1e-12);
        let la = loo_consistency_stat(&sample1, &pop).unwrap();
        let lb = loo_consistency_stat(&sample2, &pop2).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn all_zero_trace_reports_zero_slope() {
        let ys: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let xs = vec![vec![0.0]; 30];
        let pop = pop_from(&ys, &xs);
        let traces = stability_trace(
            &pop,
            &TraceDesign::Srs,
            &LearnerSpec::wls(false),
            &[4, 8, 16],
            3,
            StreamKey::new(8),
        )
        .unwrap();
        let q = traces
            .iter()
            .find(|t| t.condition == StabilityCondition::QStable)
            .unwrap();
        assert!(q.medians.iter().all(|m| *m == 0.0));
        assert_eq!(q.slope, 0.0);
    }
}
