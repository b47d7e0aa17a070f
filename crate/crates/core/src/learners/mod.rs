//! Assisting models: fit on a design-weighted training set, predict
//! anywhere in the population.
//!
//! Every fitted predictor carries a fingerprint of the units it was
//! trained on. The difference estimator refuses to evaluate a predictor
//! whose fingerprint does not match the training half of the split; that
//! check is what keeps test-set discrepancies *errors* rather than
//! residuals, which the unbiasedness of the whole method rests on.

mod tree;
mod wls;

pub use tree::{grow_tree, Tree, TreeParams};
pub use wls::{wls_fit, WlsFit};

use serde::{Deserialize, Serialize};

use crate::data::Population;
use crate::designs::Split;
use crate::error::{Error, Result};
use crate::rng::{fingerprint_indices, StreamKey};

/// A design-weighted training set. Rows are sorted by population position
/// at construction, so fits do not depend on presentation order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    positions: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    ws: Vec<f64>,
    p: usize,
    fingerprint: u64,
    /// per-feature row order sorted by feature value, built on first use
    /// and shared by every tree grown on this set
    sorted: std::sync::OnceLock<Vec<Vec<u32>>>,
}

impl TrainingSet {
    pub fn from_units(pop: &Population, positions: &[usize], weights: &[f64]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("training set must contain at least one row".into()));
        }
        if positions.len() != weights.len() {
            return Err(Error::Invalid("positions and weights differ in length".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!(
                "design weights must be finite and positive, got {w}"
            )));
        }
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_unstable_by_key(|i| positions[*i]);
        let p = pop.dim();
        let mut sorted_pos = Vec::with_capacity(order.len());
        let mut xs = Vec::with_capacity(order.len() * p);
        let mut ys = Vec::with_capacity(order.len());
        let mut ws = Vec::with_capacity(order.len());
        for i in order {
            let pos = positions[i];
            sorted_pos.push(pos);
            xs.extend_from_slice(pop.x(pos));
            ys.push(pop.y(pos));
            ws.push(weights[i]);
        }
        let ids: Vec<u64> = sorted_pos.iter().map(|pos| pop.id(*pos)).collect();
        let fingerprint = fingerprint_indices(&ids);
        Ok(TrainingSet {
            positions: sorted_pos,
            xs,
            ys,
            ws,
            p,
            fingerprint,
            sorted: std::sync::OnceLock::new(),
        })
    }

    /// Training half of a split, weighted by 1/pi1.
    pub fn from_split(pop: &Population, split: &Split) -> Result<Self> {
        let weights: Vec<f64> = split.pi1.iter().map(|pi| 1.0 / pi).collect();
        Self::from_units(pop, &split.s1, &weights)
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.p..(i + 1) * self.p]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn w(&self, i: usize) -> f64 {
        self.ws[i]
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Row indices sorted by each feature's value (ties by row index).
    pub fn sorted_orders(&self) -> &[Vec<u32>] {
        self.sorted.get_or_init(|| {
            (0..self.p)
                .map(|f| {
                    let mut order: Vec<u32> = (0..self.len() as u32).collect();
                    order.sort_by(|a, b| {
                        self.row(*a as usize)[f]
                            .partial_cmp(&self.row(*b as usize)[f])
                            .unwrap()
                            .then(a.cmp(b))
                    });
                    order
                })
                .collect()
        })
    }
}

/// Learner selection plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearnerSpec {
    Wls {
        intercept: bool,
    },
    Tree {
        max_depth: Option<usize>,
        min_leaf: usize,
        /// features considered per split; None means all
        mtry: Option<usize>,
        seed: u64,
    },
    Forest {
        n_trees: usize,
        /// None means ceil(p/3)
        mtry: Option<usize>,
        min_leaf: usize,
        max_depth: Option<usize>,
        bootstrap: bool,
        seed: u64,
    },
}

impl LearnerSpec {
    pub fn wls(intercept: bool) -> Self {
        LearnerSpec::Wls { intercept }
    }

    /// Deterministic single tree: all features at every split.
    pub fn tree_default(seed: u64) -> Self {
        LearnerSpec::Tree {
            max_depth: None,
            min_leaf: 1,
            mtry: None,
            seed,
        }
    }

    pub fn forest_default(seed: u64) -> Self {
        LearnerSpec::Forest {
            n_trees: 200,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            bootstrap: true,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Wls { .. } => "wls",
            LearnerSpec::Tree { .. } => "tree",
            LearnerSpec::Forest { .. } => "forest",
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        let check_mtry = |mtry: &Option<usize>| -> Result<()> {
            if let Some(m) = mtry {
                if *m < 1 || *m > p {
                    return Err(Error::Invalid(format!(
                        "learner.mtry = {m} violates 1 <= mtry <= p (p = {p})"
                    )));
                }
            }
            Ok(())
        };
        match self {
            LearnerSpec::Wls { .. } => Ok(()),
            LearnerSpec::Tree { min_leaf, mtry, .. } => {
                if *min_leaf < 1 {
                    return Err(Error::Invalid("learner.min_leaf must be >= 1".into()));
                }
                check_mtry(mtry)
            }
            LearnerSpec::Forest {
                n_trees,
                min_leaf,
                mtry,
                ..
            } => {
                if *n_trees < 1 {
                    return Err(Error::Invalid("learner.n_trees must be >= 1".into()));
                }
                if *min_leaf < 1 {
                    return Err(Error::Invalid("learner.min_leaf must be >= 1".into()));
                }
                check_mtry(mtry)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Wls(WlsFit),
    Tree(Tree),
    Forest(Vec<Tree>),
}

/// An immutable fitted model. Prediction is deterministic and finite for
/// finite input.
#[derive(Debug, Clone)]
pub struct Predictor {
    model: Model,
    pub descriptor: String,
    pub fingerprint: u64,
    pub degenerate: bool,
}

impl Predictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::Wls(fit) => fit.predict(x),
            Model::Tree(tree) => tree.predict(x),
            Model::Forest(trees) => {
                let mut acc = 0.0;
                for t in trees {
                    acc += t.predict(x);
                }
                acc / trees.len() as f64
            }
        }
    }

    /// Linear coefficients when the model is WLS.
    pub fn wls_coefficients(&self) -> Option<&WlsFit> {
        match &self.model {
            Model::Wls(fit) => Some(fit),
            _ => None,
        }
    }
}

/// Fit an assisting model. Randomized learners consume a stream keyed by
/// (seed, training-set fingerprint), so refits on the same subsample are
/// reproducible and independent of row order.
pub fn fit(spec: &LearnerSpec, ts: &TrainingSet) -> Result<Predictor> {
    spec.validate(ts.dim())?;
    let fingerprint = ts.fingerprint();
    match spec {
        LearnerSpec::Wls { intercept } => {
            let fit = wls_fit(ts, *intercept);
            let degenerate = fit.degenerate;
            Ok(Predictor {
                model: Model::Wls(fit),
                descriptor: format!("wls(intercept={intercept},fp={fingerprint:016x})"),
                fingerprint,
                degenerate,
            })
        }
        LearnerSpec::Tree {
            max_depth,
            min_leaf,
            mtry,
            seed,
        } => {
            let params = TreeParams {
                max_depth: *max_depth,
                min_leaf: *min_leaf,
                mtry: mtry.unwrap_or(ts.dim()),
            };
            let mut rng = StreamKey::new(*seed)
                .child("tree-fit")
                .index(fingerprint)
                .rng();
            let rows: Vec<u32> = (0..ts.len() as u32).collect();
            let tree = grow_tree(ts, &rows, &params, &mut rng);
            Ok(Predictor {
                model: Model::Tree(tree),
                descriptor: format!(
                    "tree(max_depth={max_depth:?},min_leaf={min_leaf},mtry={},fp={fingerprint:016x})",
                    params.mtry
                ),
                fingerprint,
                degenerate: false,
            })
        }
        LearnerSpec::Forest {
            n_trees,
            mtry,
            min_leaf,
            max_depth,
            bootstrap,
            seed,
        } => {
            let mtry = mtry.unwrap_or_else(|| ts.dim().div_ceil(3));
            let params = TreeParams {
                max_depth: *max_depth,
                min_leaf: *min_leaf,
                mtry,
            };
            let base = StreamKey::new(*seed).child("forest-fit").index(fingerprint);
            let m = ts.len();
            let mut trees = Vec::with_capacity(*n_trees);
            for t in 0..*n_trees {
                let mut rng = base.index(t as u64).rng();
                let rows: Vec<u32> = if *bootstrap {
                    use rand::Rng;
                    (0..m).map(|_| rng.gen_range(0..m) as u32).collect()
                } else {
                    (0..m as u32).collect()
                };
                trees.push(grow_tree(ts, &rows, &params, &mut rng));
            }
            Ok(Predictor {
                model: Model::Forest(trees),
                descriptor: format!(
                    "forest(n_trees={n_trees},mtry={mtry},min_leaf={min_leaf},bootstrap={bootstrap},fp={fingerprint:016x})"
                ),
                fingerprint,
                degenerate: false,
            })
        }
    }
}
