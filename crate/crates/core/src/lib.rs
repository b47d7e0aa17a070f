//! Design-unbiased model-assisted survey estimation.
//!
//! The estimators in this crate combine three ingredients:
//!
//! 1. a probability sample `s` drawn from a fixed finite population with
//!    known inclusion probabilities,
//! 2. a training/test split `(s1, s2)` of the sample with a known
//!    subsampling law, so that an assisting model fitted on `s1` produces
//!    *errors* (not residuals) on `s2`, and
//! 3. Rao-Blackwellisation over the splits, which removes the variance
//!    cost of subsampling while keeping exact design-unbiasedness for any
//!    assisting model, linear or not.
//!
//! The crate ships the estimator family (Horvitz-Thompson, GREG, the
//! subsampled difference estimator, its exact / Monte Carlo / delete-one
//! Rao-Blackwell averages), the matching variance estimators, empirical
//! stability diagnostics, synthetic-population generators and a replicated
//! study harness, plus exhaustive enumeration over small designs which is
//! how the unbiasedness claims are certified in the test suite.

pub mod data;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod learners;
pub mod numeric;
pub mod rng;
pub mod simulation;
pub mod stability;
pub mod variance;

pub use data::{load_population, save_population, CsvSchema, Population, UnitRecord};
pub use designs::{
    cond_pi2, draw_sample, draw_split, enumerate_samples, enumerate_splits, pps_inclusion_probs,
    Allocation, DesignSpec, DesignTag, Pi2, SampleDraw, Split, SubsampleSpec,
};
pub use error::{Error, Result};
pub use estimators::{
    greg, greg_jackknife_avg, ht, rb_exact, rb_linear_weights, rb_loo, rb_mc, y1, EstimateReport,
    FoldEstimates,
};
pub use learners::{fit, LearnerSpec, Predictor, TrainingSet};
pub use rng::StreamKey;
pub use simulation::{
    exhaustive_expectation, exhaustive_pq_expectation, generate_scenario, run_study,
    EstimatorChoice, Scenario, ScenarioSpec, StudyReport,
};
pub use variance::{jackknife_var, loo_mc_var, mc_rb_var, rb_var, y1_var_srs, VarianceReport};
