//! Random forest of Gini-split classification trees.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features examined per split; `None` means ⌊√d⌋.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 12,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
            bootstrap: true,
        }
    }
}

pub(crate) const LEAF: u32 = u32::MAX;

/// Flattened tree. Node 0 is the root; a node is a leaf when its feature is [`LEAF`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub feature: Vec<u32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Fraction of positive training samples reaching the node.
    pub value: Vec<f64>,
}

impl Tree {
    pub fn predict(&self, row: ArrayView1<f64>) -> f64 {
        let mut n = 0usize;
        while self.feature[n] != LEAF {
            n = if row[self.feature[n] as usize] <= self.threshold[n] {
                self.left[n]
            } else {
                self.right[n]
            } as usize;
        }
        self.value[n]
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    fn push(&mut self, value: f64) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }

    /// Structural check used after deserialisation.
    pub fn is_well_formed(&self, features: usize) -> bool {
        let n = self.feature.len();
        n > 0
            && [self.threshold.len(), self.left.len(), self.right.len(), self.value.len()]
                .iter()
                .all(|&l| l == n)
            && (0..n).all(|i| {
                self.feature[i] == LEAF
                    || ((self.feature[i] as usize) < features
                        && (self.left[i] as usize) > i
                        && (self.left[i] as usize) < n
                        && (self.right[i] as usize) > i
                        && (self.right[i] as usize) < n)
            })
            && self.value.iter().all(|v| (0.0..=1.0).contains(v))
            && self.threshold.iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl RandomForest {
    pub fn fit(x: &Array2<f64>, y: &[bool], config: &ForestConfig, rng: &mut impl Rng) -> Self {
        let n = x.nrows();
        let d = x.ncols();
        let m = config
            .max_features
            .unwrap_or_else(|| (d as f64).sqrt().floor() as usize)
            .clamp(1, d.max(1));
        // Column-major copy so that per-feature scans are contiguous.
        let columns: Vec<Vec<f64>> = (0..d).map(|j| x.column(j).to_vec()).collect();
        let trees = (0..config.trees)
            .map(|_| {
                let sample: Vec<usize> = if config.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut builder = Builder {
                    columns: &columns,
                    y,
                    config,
                    m,
                    tree: Tree::default(),
                    scratch: Vec::with_capacity(n),
                };
                builder.grow(sample, 0, rng);
                builder.tree
            })
            .collect();
        Self { n_features: d, trees }
    }

    /// Mean of the per-tree positive fractions, in `[0, 1]`.
    pub fn predict(&self, row: ArrayView1<f64>) -> f64 {
        if self.trees.is_empty() {
            return 0.0;
        }
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

struct Builder<'a> {
    columns: &'a [Vec<f64>],
    y: &'a [bool],
    config: &'a ForestConfig,
    m: usize,
    tree: Tree,
    scratch: Vec<(f64, bool)>,
}

struct Split {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut impl Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let node = self.tree.push(pos as f64 / idx.len().max(1) as f64);
        if depth >= self.config.max_depth
            || idx.len() < self.config.min_samples_split
            || pos == 0
            || pos == idx.len()
        {
            return node;
        }
        let Some(split) = self.best_split(&idx, pos, rng) else {
            return node;
        };
        let col = &self.columns[split.feature];
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= split.threshold);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.tree.feature[node] = split.feature as u32;
        self.tree.threshold[node] = split.threshold;
        self.tree.left[node] = left as u32;
        self.tree.right[node] = right as u32;
        node
    }

    /// Examine features in random order; keep going past `m` features only
    /// while no valid split has been found.
    fn best_split(&mut self, idx: &[usize], pos: usize, rng: &mut impl Rng) -> Option<Split> {
        let d = self.columns.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let n = idx.len();
        let parent = gini(pos, n);
        let min_leaf = self.config.min_samples_leaf.max(1);
        let mut best: Option<Split> = None;
        for (visited, &f) in order.iter().enumerate() {
            if visited >= self.m && best.is_some() {
                break;
            }
            let col = &self.columns[f];
            self.scratch.clear();
            self.scratch.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            if self.scratch[0].0 == self.scratch[n - 1].0 {
                continue;
            }
            let mut left_pos = 0usize;
            for k in 1..n {
                left_pos += usize::from(self.scratch[k - 1].1);
                let (lo, hi) = (self.scratch[k - 1].0, self.scratch[k].0);
                if lo == hi || k < min_leaf || n - k < min_leaf {
                    continue;
                }
                let impurity = (k as f64 * gini(left_pos, k)
                    + (n - k) as f64 * gini(pos - left_pos, n - k))
                    / n as f64;
                if impurity < parent - 1e-12 && best.as_ref().map_or(true, |b| impurity < b.impurity) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(Split {
                        feature: f,
                        threshold,
                        impurity,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_a_threshold_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((400, 5), |_| rng.gen_range(0.0..1.0));
        let y: Vec<bool> = x.rows().into_iter().map(|r| r[2] < 0.3).collect();
        let forest = RandomForest::fit(&x, &y, &ForestConfig { trees: 20, ..Default::default() }, &mut rng);
        let test = Array2::from_shape_fn((200, 5), |_| rng.gen_range(0.0..1.0));
        let correct = test
            .rows()
            .into_iter()
            .filter(|r| (forest.predict(*r) >= 0.5) == (r[2] < 0.3))
            .count();
        assert!(correct >= 190, "{correct}");
        assert!(forest.trees.iter().all(|t| t.is_well_formed(5)));
    }

    #[test]
    fn constant_features_give_constant_scores() {
        let x = Array2::from_elem((10, 3), 1.0);
        let y = [true, false, false, true, false, false, false, false, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let forest = RandomForest::fit(&x, &y, &ForestConfig { trees: 5, bootstrap: false, ..Default::default() }, &mut rng);
        assert!(forest.trees.iter().all(|t| t.len() == 1));
        assert!((forest.predict(x.row(0)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn depth_limit_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((300, 4), |_| rng.gen_range(0.0..1.0));
        let y: Vec<bool> = (0..300).map(|_| rng.gen_bool(0.5)).collect();
        let cfg = ForestConfig { trees: 3, max_depth: 3, ..Default::default() };
        let forest = RandomForest::fit(&x, &y, &cfg, &mut rng);
        for t in &forest.trees {
            assert!(t.len() <= 15);
        }
    }
}
