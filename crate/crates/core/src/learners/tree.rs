//! CART-style regression trees. Splits maximize the weighted within-node
//! variance reduction; leaves predict the weighted mean of their rows.
//! Ties break to the lowest feature index, then the smallest threshold;
//! thresholds sit at midpoints of consecutive distinct sorted values, so
//! trees are deterministic across platforms.
//!
//! Row orders per feature are presorted once per training set and
//! partitioned stably down the tree; nothing is re-sorted per node, which
//! is what makes delete-one forests over full populations affordable.

use rand::Rng;

use super::TrainingSet;

#[derive(Debug, Clone)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub mtry: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[cfg(test)]
    fn root(&self) -> &Node {
        &self.nodes[0]
    }
}

struct Grower<'a> {
    ts: &'a TrainingSet,
    /// count-scaled weight and weighted response per training row, dense
    wcnt: Vec<f64>,
    wycnt: Vec<f64>,
    cnt: Vec<u32>,
    /// per feature: the node's distinct rows in ascending feature order,
    /// with their values alongside; nodes own disjoint [start, end)
    /// segments, partitioned in place as the tree grows
    row_arena: Vec<Vec<u32>>,
    val_arena: Vec<Vec<f64>>,
    /// epoch-stamped membership marks used by the partition step
    stamp: Vec<u32>,
    epoch: u32,
    scratch_row: Vec<u32>,
    scratch_val: Vec<f64>,
    params: TreeParams,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    /// arena index of the first right-hand row in the split feature
    cut: usize,
    /// multiplicity going left
    left_size: usize,
}

/// Grow a tree over the given rows (indices into the training set, with
/// repetitions allowed for bootstrap resamples). `rng` is consumed only
/// when mtry < p.
pub fn grow_tree<R: Rng>(ts: &TrainingSet, rows: &[u32], params: &TreeParams, rng: &mut R) -> Tree {
    let m = ts.len();
    let mut cnt = vec![0u32; m];
    for &r in rows {
        cnt[r as usize] += 1;
    }
    let mut wcnt = vec![0.0; m];
    let mut wycnt = vec![0.0; m];
    for i in 0..m {
        if cnt[i] > 0 {
            let w = cnt[i] as f64 * ts.w(i);
            wcnt[i] = w;
            wycnt[i] = w * ts.y(i);
        }
    }
    let mut row_arena = Vec::with_capacity(ts.dim());
    let mut val_arena = Vec::with_capacity(ts.dim());
    for (f, order) in ts.sorted_orders().iter().enumerate() {
        let mut rs = Vec::new();
        let mut vs = Vec::new();
        for &r in order {
            if cnt[r as usize] > 0 {
                rs.push(r);
                vs.push(ts.row(r as usize)[f]);
            }
        }
        row_arena.push(rs);
        val_arena.push(vs);
    }
    let distinct = row_arena[0].len();
    let mut grower = Grower {
        ts,
        wcnt,
        wycnt,
        cnt,
        row_arena,
        val_arena,
        stamp: vec![0; m],
        epoch: 0,
        scratch_row: Vec::with_capacity(distinct),
        scratch_val: Vec::with_capacity(distinct),
        params: params.clone(),
        nodes: Vec::new(),
    };
    grower.build(0, distinct, rows.len(), 0, rng);
    Tree {
        nodes: grower.nodes,
    }
}

impl Grower<'_> {
    fn node_moments(&self, start: usize, end: usize) -> (f64, f64) {
        let mut wsum = 0.0;
        let mut wy = 0.0;
        for &r in &self.row_arena[0][start..end] {
            wsum += self.wcnt[r as usize];
            wy += self.wycnt[r as usize];
        }
        (wsum, wy)
    }

    fn build<R: Rng>(
        &mut self,
        start: usize,
        end: usize,
        size: usize,
        depth: usize,
        rng: &mut R,
    ) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });

        let depth_ok = self.params.max_depth.map_or(true, |d| depth < d);
        let best = if depth_ok && size >= 2 * self.params.min_leaf {
            self.find_split(start, end, size, rng)
        } else {
            None
        };

        match best {
            None => {
                let (wsum, wy) = self.node_moments(start, end);
                self.nodes[id as usize] = Node::Leaf { value: wy / wsum };
                id
            }
            Some(split) => {
                let mid = self.partition(start, end, &split);
                let left = self.build(start, mid, split.left_size, depth + 1, rng);
                let right = self.build(mid, end, size - split.left_size, depth + 1, rng);
                self.nodes[id as usize] = Node::Split {
                    feature: split.feature as u32,
                    threshold: split.threshold,
                    left,
                    right,
                };
                id
            }
        }
    }

    fn find_split<R: Rng>(
        &self,
        start: usize,
        end: usize,
        size: usize,
        rng: &mut R,
    ) -> Option<BestSplit> {
        let p = self.ts.dim();
        let features = sample_features(rng, p, self.params.mtry);
        let min_leaf = self.params.min_leaf;

        let (w_total, wy_total) = self.node_moments(start, end);
        // parent SSE is constant across candidates; maximizing the variance
        // reduction is maximizing (sum wy_L)^2/W_L + (sum wy_R)^2/W_R
        let parent_score = wy_total * wy_total / w_total;

        let mut best: Option<BestSplit> = None;
        for &feature in &features {
            let rows = &self.row_arena[feature][start..end];
            let vals = &self.val_arena[feature][start..end];
            let mut cum_cnt = 0usize;
            let mut w_left = 0.0;
            let mut wy_left = 0.0;
            for k in 0..rows.len().saturating_sub(1) {
                let i = rows[k] as usize;
                cum_cnt += self.cnt[i] as usize;
                w_left += self.wcnt[i];
                wy_left += self.wycnt[i];
                if vals[k + 1] <= vals[k] {
                    continue; // only cut between distinct values
                }
                if cum_cnt < min_leaf || size - cum_cnt < min_leaf {
                    continue;
                }
                let w_right = w_total - w_left;
                let wy_right = wy_total - wy_left;
                let score = wy_left * wy_left / w_left + wy_right * wy_right / w_right;
                let gain = score - parent_score;
                if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (vals[k] + vals[k + 1]),
                        gain,
                        cut: start + k + 1,
                        left_size: cum_cnt,
                    });
                }
            }
        }
        best
    }

    /// Stable in-place partition of every feature segment. The split
    /// feature is already partitioned at `split.cut`; its left rows are
    /// stamped and the other features partition by stamp lookup, keeping
    /// their sorted order on both sides. Returns the split point.
    fn partition(&mut self, start: usize, end: usize, split: &BestSplit) -> usize {
        self.epoch += 1;
        for &row in &self.row_arena[split.feature][start..split.cut] {
            self.stamp[row as usize] = self.epoch;
        }
        let mid = split.cut;
        for f in 0..self.row_arena.len() {
            if f == split.feature {
                continue;
            }
            self.scratch_row.clear();
            self.scratch_val.clear();
            let rows = &mut self.row_arena[f];
            let vals = &mut self.val_arena[f];
            let mut write = start;
            for k in start..end {
                let row = rows[k];
                let val = vals[k];
                if self.stamp[row as usize] == self.epoch {
                    rows[write] = row;
                    vals[write] = val;
                    write += 1;
                } else {
                    self.scratch_row.push(row);
                    self.scratch_val.push(val);
                }
            }
            rows[write..end].copy_from_slice(&self.scratch_row);
            vals[write..end].copy_from_slice(&self.scratch_val);
            debug_assert_eq!(write, mid);
        }
        mid
    }
}

/// Uniform sample of `k` distinct feature indices, returned sorted so the
/// candidate scan order (and therefore tie-breaking) stays deterministic.
fn sample_features<R: Rng>(rng: &mut R, p: usize, k: usize) -> Vec<usize> {
    if k >= p {
        return (0..p).collect();
    }
    let mut idx: Vec<usize> = (0..p).collect();
    for i in 0..k {
        let j = rng.gen_range(i..p);
        idx.swap(i, j);
    }
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Population, UnitRecord};

    fn ts_from(xs: &[Vec<f64>], ys: &[f64]) -> TrainingSet {
        let records = xs
            .iter()
            .zip(ys)
            .enumerate()
            .map(|(i, (x, y))| UnitRecord {
                id: i as u64 + 1,
                y: *y,
                x: x.clone(),
                stratum: None,
            })
            .collect();
        let pop = Population::from_records(records).unwrap();
        let positions: Vec<usize> = (0..ys.len()).collect();
        let weights = vec![1.0; ys.len()];
        TrainingSet::from_units(&pop, &positions, &weights).unwrap()
    }

    /// Exhaustive search over all axis-aligned depth-2 trees with the same
    /// tie-breaking as the grower: root candidates scanned feature-major,
    /// threshold-minor, children chosen greedily the same way.
    fn brute_force_two_level(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let m = ys.len();
        let p = xs[0].len();
        let sse = |rows: &[usize]| -> f64 {
            let mean: f64 = rows.iter().map(|r| ys[*r]).sum::<f64>() / rows.len() as f64;
            rows.iter().map(|r| (ys[*r] - mean) * (ys[*r] - mean)).sum()
        };
        let thresholds = |rows: &[usize], f: usize| -> Vec<f64> {
            let mut vals: Vec<f64> = rows.iter().map(|r| xs[*r][f]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        };
        let partition = |rows: &[usize], f: usize, t: f64| -> (Vec<usize>, Vec<usize>) {
            let (mut l, mut r) = (Vec::new(), Vec::new());
            for &row in rows {
                if xs[row][f] <= t {
                    l.push(row);
                } else {
                    r.push(row);
                }
            }
            (l, r)
        };
        let best_child = |rows: &[usize]| -> Option<(usize, f64, f64)> {
            let mut best: Option<(usize, f64, f64)> = None;
            for f in 0..p {
                for t in thresholds(rows, f) {
                    let (l, r) = partition(rows, f, t);
                    if l.is_empty() || r.is_empty() {
                        continue;
                    }
                    let total = sse(&l) + sse(&r);
                    if best.as_ref().map_or(true, |b| total < b.2 - 1e-12) {
                        best = Some((f, t, total));
                    }
                }
            }
            best
        };

        let all: Vec<usize> = (0..m).collect();
        let mut best_pred: Option<(f64, Vec<f64>)> = None;
        for f in 0..p {
            for t in thresholds(&all, f) {
                let (l, r) = partition(&all, f, t);
                if l.is_empty() || r.is_empty() {
                    continue;
                }
                let mut total = 0.0;
                let mut pred = vec![0.0; m];
                for side in [&l, &r] {
                    match best_child(side) {
                        Some((cf, ct, child_sse)) => {
                            total += child_sse;
                            let (cl, cr) = partition(side, cf, ct);
                            for grand in [&cl, &cr] {
                                let mean: f64 =
                                    grand.iter().map(|r| ys[*r]).sum::<f64>() / grand.len() as f64;
                                for &row in grand.iter() {
                                    pred[row] = mean;
                                }
                            }
                        }
                        None => {
                            total += sse(side);
                            let mean: f64 =
                                side.iter().map(|r| ys[*r]).sum::<f64>() / side.len() as f64;
                            for &row in side.iter() {
                                pred[row] = mean;
                            }
                        }
                    }
                }
                if best_pred.as_ref().map_or(true, |b| total < b.0 - 1e-12) {
                    best_pred = Some((total, pred));
                }
            }
        }
        best_pred.unwrap().1
    }

    #[test]
    fn two_level_tree_matches_exhaustive_search() {
        // piecewise-constant on quadrants of (x1, x2): greedy and global
        // two-level search agree here by construction
        let xs: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![2.0, 1.0],
            vec![0.5, 6.0],
            vec![1.5, 7.0],
            vec![2.5, 8.0],
            vec![10.0, 0.2],
            vec![11.0, 0.8],
            vec![12.0, 1.4],
            vec![10.5, 6.5],
            vec![11.5, 7.5],
            vec![12.5, 8.5],
        ];
        let ys = vec![
            1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 20.0, 20.0, 20.0, 33.0, 33.0, 33.0,
        ];
        let ts = ts_from(&xs, &ys);
        let rows: Vec<u32> = (0..12).collect();
        let params = TreeParams {
            max_depth: Some(2),
            min_leaf: 1,
            mtry: 2,
        };
        let mut rng = crate::rng::StreamKey::new(0).rng();
        let tree = grow_tree(&ts, &rows, &params, &mut rng);
        let oracle = brute_force_two_level(&xs, &ys);
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(tree.predict(x), oracle[i], "unit {i}");
        }
    }

    #[test]
    fn min_leaf_is_respected() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 10.0 }).collect();
        let ts = ts_from(&xs, &ys);
        let rows: Vec<u32> = (0..10).collect();
        let params = TreeParams {
            max_depth: None,
            min_leaf: 5,
            mtry: 1,
        };
        let mut rng = crate::rng::StreamKey::new(0).rng();
        let tree = grow_tree(&ts, &rows, &params, &mut rng);
        // one split only: both halves already have exactly min_leaf rows
        assert_eq!(tree.n_nodes(), 3);
        assert_eq!(tree.predict(&[2.0]), 0.0);
        assert_eq!(tree.predict(&[7.0]), 10.0);
    }

    #[test]
    fn bootstrap_multiplicity_counts_toward_min_leaf() {
        let xs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let ys = vec![0.0, 0.0, 8.0, 8.0];
        let ts = ts_from(&xs, &ys);
        // row 0 drawn three times, rows 2..3 once, row 1 missing
        let rows: Vec<u32> = vec![0, 0, 0, 2, 3];
        let params = TreeParams {
            max_depth: Some(1),
            min_leaf: 2,
            mtry: 1,
        };
        let mut rng = crate::rng::StreamKey::new(0).rng();
        let tree = grow_tree(&ts, &rows, &params, &mut rng);
        // split between 0 and 2 is allowed: left has multiplicity 3
        assert_eq!(tree.predict(&[0.0]), 0.0);
        assert_eq!(tree.predict(&[3.0]), 8.0);
    }

    #[test]
    fn tie_breaks_to_lowest_feature_and_smallest_threshold() {
        // two features with identical split power; feature 0 must win
        let xs: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        ];
        let ys = vec![0.0, 0.0, 4.0, 4.0];
        let ts = ts_from(&xs, &ys);
        let rows: Vec<u32> = (0..4).collect();
        let params = TreeParams {
            max_depth: Some(1),
            min_leaf: 1,
            mtry: 2,
        };
        let mut rng = crate::rng::StreamKey::new(0).rng();
        let tree = grow_tree(&ts, &rows, &params, &mut rng);
        match tree.root() {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 0.5);
            }
            _ => panic!("expected a split at the root"),
        }
    }
}
