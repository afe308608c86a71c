//! Gradient boosting over depth-limited regression trees, with squared loss
//! or, for 0/1 targets, binomial deviance (Newton leaf steps, predictions on
//! the probability scale).
//!
//! Features are quantile-binned once per fit (at most `max_bins` bins, stored
//! as `u8`), split search runs on per-node gradient histograms, and the
//! larger child of every split gets its histogram by subtraction from the
//! parent.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::sigmoid;
use crate::error::{LdmlError, Result};

/// L2 penalty on leaf values under the deviance loss; keeps pure leaves finite.
const LEAF_L2: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbtLoss {
    /// Deviance when every target is 0 or 1, squared error otherwise.
    #[default]
    Auto,
    Squared,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub max_bins: usize,
    /// Row fraction drawn (without replacement) for each tree.
    pub subsample: f64,
    pub loss: GbtLoss,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            min_leaf: 20,
            max_bins: 32,
            subsample: 1.0,
            loss: GbtLoss::Auto,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate <= 1.0
            && self.min_leaf >= 1
            && (2..=256).contains(&self.max_bins)
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(LdmlError::InvalidConfig(format!("invalid gbt parameters {self:?}")))
        }
    }
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    feature: u32,
    bin: u8,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

impl Node {
    fn leaf(value: f64) -> Self {
        Self {
            feature: LEAF,
            bin: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_raw(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut at = 0;
        loop {
            let n = &self.nodes[at];
            if n.feature == LEAF {
                return n.value;
            }
            at = if x[n.feature as usize] <= n.threshold {
                n.left
            } else {
                n.right
            } as usize;
        }
    }

    fn predict_binned(&self, bins: &[u8]) -> f64 {
        let mut at = 0;
        loop {
            let n = &self.nodes[at];
            if n.feature == LEAF {
                return n.value;
            }
            at = if bins[n.feature as usize] <= n.bin {
                n.left
            } else {
                n.right
            } as usize;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GbtModel {
    base: f64,
    logistic: bool,
    trees: Vec<Tree>,
}

impl GbtModel {
    pub fn fit(params: &GbtParams, x: ArrayView2<'_, f64>, y: &[f64], seed: u64) -> Self {
        let m = y.len();
        let logistic = match params.loss {
            GbtLoss::Squared => false,
            GbtLoss::Logistic => true,
            GbtLoss::Auto => y.iter().all(|&v| v == 0.0 || v == 1.0),
        };
        let mean = y.iter().sum::<f64>() / m as f64;
        let base = if logistic {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        } else {
            mean
        };
        let mut model = GbtModel {
            base,
            logistic,
            trees: Vec::with_capacity(params.trees),
        };
        if params.trees == 0 {
            return model;
        }
        let binned = BinnedFeatures::new(x, params.max_bins);
        let mut score = vec![base; m];
        let mut resid = vec![0.0; m];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all_rows: Vec<u32> = (0..m as u32).collect();
        let take = ((params.subsample * m as f64).ceil() as usize).clamp(1, m);
        let mut grower = Grower::new(&binned, params);

        for _ in 0..params.trees {
            for ((r, &f), &t) in resid.iter_mut().zip(&score).zip(y) {
                *r = if logistic { t - sigmoid(f) } else { t - f };
            }
            let rows = if take < m {
                let mut idx = all_rows.clone();
                idx.partial_shuffle(&mut rng, take);
                let mut s = idx[..take].to_vec();
                s.sort_unstable();
                s
            } else {
                all_rows.clone()
            };
            let (mut tree, leaves) = grower.grow(rows, &resid);
            for (node, rows) in &leaves {
                let g: f64 = rows.iter().map(|&i| resid[i as usize]).sum();
                let step = if logistic {
                    let h: f64 = rows
                        .iter()
                        .map(|&i| {
                            let p = sigmoid(score[i as usize]);
                            p * (1.0 - p)
                        })
                        .sum();
                    g / (h + LEAF_L2)
                } else {
                    g / rows.len().max(1) as f64
                };
                tree.nodes[*node].value = params.learning_rate * step;
            }
            if take < m {
                for (i, f) in score.iter_mut().enumerate() {
                    *f += tree.predict_binned(binned.row(i));
                }
            } else {
                for (node, rows) in leaves {
                    let v = tree.nodes[node].value;
                    for i in rows {
                        score[i as usize] += v;
                    }
                }
            }
            model.trees.push(tree);
        }
        model
    }

    pub fn predict_row(&self, x: ArrayView1<'_, f64>) -> f64 {
        let f = self.base + self.trees.iter().map(|t| t.predict_raw(x)).sum::<f64>();
        if self.logistic {
            sigmoid(f)
        } else {
            f
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn is_logistic(&self) -> bool {
        self.logistic
    }
}

struct BinnedFeatures {
    p: usize,
    /// row-major bin indices
    bins: Vec<u8>,
    cuts: Vec<Vec<f64>>,
    stride: usize,
}

impl BinnedFeatures {
    fn new(x: ArrayView2<'_, f64>, max_bins: usize) -> Self {
        let (m, p) = x.dim();
        let cuts: Vec<Vec<f64>> = x.columns().into_iter().map(|c| cut_points(c, max_bins)).collect();
        let stride = cuts.iter().map(|c| c.len() + 1).max().unwrap_or(1);
        let mut bins = vec![0u8; m * p];
        for (i, row) in x.rows().into_iter().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                bins[i * p + f] = cuts[f].partition_point(|&c| c < v) as u8;
            }
        }
        Self { p, bins, cuts, stride }
    }

    fn row(&self, i: usize) -> &[u8] {
        &self.bins[i * self.p..(i + 1) * self.p]
    }
}

/// Strictly increasing cut values; value `v` falls in bin `#{c < v}`.
fn cut_points(col: ArrayView1<'_, f64>, max_bins: usize) -> Vec<f64> {
    let mut v: Vec<f64> = col.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let mut uniq = v.clone();
    uniq.dedup();
    let mut cuts: Vec<f64> = if uniq.len() <= max_bins {
        uniq
    } else {
        (1..max_bins).map(|j| v[(j * m) / max_bins]).collect()
    };
    cuts.dedup();
    // a cut at the maximum separates nothing
    if cuts.last() == v.last() {
        cuts.pop();
    }
    cuts
}

/// Per feature and bin: `[sum of residuals, row count]`.
struct Histogram {
    cells: Vec<[f64; 2]>,
}

impl Histogram {
    fn subtract(&self, other: &Histogram) -> Histogram {
        Histogram {
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
                .collect(),
        }
    }
}

struct Pending {
    node: usize,
    rows: Vec<u32>,
    hist: Option<Histogram>,
}

struct Grower<'a> {
    data: &'a BinnedFeatures,
    max_depth: usize,
    min_leaf: usize,
}

impl<'a> Grower<'a> {
    fn new(data: &'a BinnedFeatures, params: &GbtParams) -> Self {
        Self {
            data,
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
        }
    }

    fn histogram(&self, rows: &[u32], resid: &[f64]) -> Histogram {
        let (p, stride) = (self.data.p, self.data.stride);
        let mut cells = vec![[0.0; 2]; p * stride];
        for &i in rows {
            let i = i as usize;
            let r = resid[i];
            for (h, &b) in cells.chunks_exact_mut(stride).zip(self.data.row(i)) {
                let c = &mut h[b as usize];
                c[0] += r;
                c[1] += 1.0;
            }
        }
        Histogram { cells }
    }

    /// Best `(feature, bin, gain)` with both children holding at least `min_leaf` rows.
    fn best_split(&self, hist: &Histogram, n: usize) -> Option<(usize, u8, f64)> {
        let stride = self.data.stride;
        let total: f64 = hist.cells[..stride].iter().map(|c| c[0]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<(usize, u8, f64)> = None;
        for f in 0..self.data.p {
            let n_bins = self.data.cuts[f].len() + 1;
            let (mut sl, mut nl) = (0.0, 0usize);
            for b in 0..n_bins - 1 {
                let c = hist.cells[f * stride + b];
                sl += c[0];
                nl += c[1] as usize;
                let nr = n - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                let sr = total - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                if gain > best.map_or(1e-12 * (1.0 + parent), |b| b.2) {
                    best = Some((f, b as u8, gain));
                }
            }
        }
        best
    }

    /// Grow one tree structure; leaf values are left for the caller, which
    /// gets the rows routed to each leaf node.
    fn grow(&mut self, rows: Vec<u32>, resid: &[f64]) -> (Tree, Vec<(usize, Vec<u32>)>) {
        let mut nodes = vec![Node::leaf(0.0)];
        let mut level = vec![Pending {
            node: 0,
            rows,
            hist: None,
        }];
        let mut leaves = Vec::new();
        for depth in 0..self.max_depth {
            let mut next = Vec::new();
            for pend in level {
                let n = pend.rows.len();
                if n < 2 * self.min_leaf {
                    leaves.push(pend);
                    continue;
                }
                let hist = match pend.hist {
                    Some(h) => h,
                    None => self.histogram(&pend.rows, resid),
                };
                let Some((f, b, _)) = self.best_split(&hist, n) else {
                    leaves.push(Pending { hist: None, ..pend });
                    continue;
                };
                let (left, right): (Vec<u32>, Vec<u32>) =
                    pend.rows.iter().partition(|&&i| self.data.row(i as usize)[f] <= b);
                let need_hist = depth + 1 < self.max_depth;
                let (lh, rh) = if need_hist {
                    if left.len() <= right.len() {
                        let lh = self.histogram(&left, resid);
                        let rh = hist.subtract(&lh);
                        (Some(lh), Some(rh))
                    } else {
                        let rh = self.histogram(&right, resid);
                        let lh = hist.subtract(&rh);
                        (Some(lh), Some(rh))
                    }
                } else {
                    (None, None)
                };
                let li = nodes.len();
                nodes.push(Node::leaf(0.0));
                nodes.push(Node::leaf(0.0));
                nodes[pend.node] = Node {
                    feature: f as u32,
                    bin: b,
                    threshold: self.data.cuts[f][b as usize],
                    left: li as u32,
                    right: li as u32 + 1,
                    value: 0.0,
                };
                next.push(Pending {
                    node: li,
                    rows: left,
                    hist: lh,
                });
                next.push(Pending {
                    node: li + 1,
                    rows: right,
                    hist: rh,
                });
            }
            level = next;
        }
        leaves.extend(level);
        let routed = leaves.into_iter().map(|l| (l.node, l.rows)).collect();
        (Tree { nodes }, routed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn sse(model: &GbtModel, x: &Array2<f64>, y: &[f64]) -> f64 {
        x.rows()
            .into_iter()
            .zip(y)
            .map(|(r, v)| (model.predict_row(r) - v).powi(2))
            .sum()
    }

    #[test]
    fn learns_a_step_function() {
        let m = 200;
        let x = Array2::from_shape_fn((m, 2), |(i, j)| ((i * 7 + j * 13) % m) as f64 / m as f64);
        let y: Vec<f64> = x.rows().into_iter().map(|r| f64::from(r[0] > 0.5)).collect();
        let model = GbtModel::fit(&GbtParams::default(), x.view(), &y, 0);
        assert!(sse(&model, &x, &y) / (m as f64) < 1e-3);
        let probe = ndarray::array![0.9, 0.1];
        assert!((model.predict_row(probe.view()) - 1.0).abs() < 0.05);
    }

    #[test]
    fn binned_and_raw_routing_agree_on_training_rows() {
        let m = 300;
        let x = Array2::from_shape_fn((m, 3), |(i, j)| (((i * 31 + j * 17) % 97) as f64).sin());
        let y: Vec<f64> = (0..m).map(|i| (i % 5) as f64).collect();
        let params = GbtParams {
            trees: 5,
            ..Default::default()
        };
        let binned = BinnedFeatures::new(x.view(), params.max_bins);
        let model = GbtModel::fit(&params, x.view(), &y, 0);
        for (i, row) in x.rows().into_iter().enumerate() {
            for t in &model.trees {
                assert_eq!(t.predict_raw(row), t.predict_binned(binned.row(i)));
            }
        }
    }

    #[test]
    fn subsampled_fit_is_seed_deterministic() {
        let m = 120;
        let x = Array2::from_shape_fn((m, 2), |(i, j)| ((i * 3 + j) % 11) as f64);
        let y: Vec<f64> = (0..m).map(|i| (i % 7) as f64).collect();
        let params = GbtParams {
            trees: 20,
            subsample: 0.5,
            ..Default::default()
        };
        let a = GbtModel::fit(&params, x.view(), &y, 9);
        let b = GbtModel::fit(&params, x.view(), &y, 9);
        let c = GbtModel::fit(&params, x.view(), &y, 10);
        let row = x.row(5);
        assert_eq!(a.predict_row(row), b.predict_row(row));
        assert_ne!(sse(&a, &x, &y), sse(&c, &x, &y));
    }

    fn deviance(model: &GbtModel, x: &Array2<f64>, y: &[f64]) -> f64 {
        x.rows()
            .into_iter()
            .zip(y)
            .map(|(r, &v)| {
                let p = model.predict_row(r);
                -(v * p.ln() + (1.0 - v) * (1.0 - p).ln())
            })
            .sum()
    }

    #[test]
    fn binary_targets_use_deviance_and_stay_in_the_unit_interval() {
        let m = 400;
        let x = Array2::from_shape_fn((m, 2), |(i, j)| (((i * 37 + j * 11) % 101) as f64) / 101.0);
        // noisy labels: P(y=1) rises with the first feature
        let y: Vec<f64> = (0..m)
            .map(|i| f64::from(((i * 7919) % 100) as f64 / 100.0 < x[[i, 0]]))
            .collect();
        let model = GbtModel::fit(&GbtParams::default(), x.view(), &y, 0);
        assert!(model.is_logistic());
        for r in x.rows() {
            let p = model.predict_row(r);
            assert!(p > 0.0 && p < 1.0);
        }
        let squared = GbtModel::fit(
            &GbtParams {
                loss: GbtLoss::Squared,
                ..Default::default()
            },
            x.view(),
            &y,
            0,
        );
        assert!(!squared.is_logistic());
        let mut prev = f64::INFINITY;
        for trees in [0, 1, 5, 20, 60] {
            let model = GbtModel::fit(
                &GbtParams {
                    trees,
                    ..Default::default()
                },
                x.view(),
                &y,
                0,
            );
            let d = deviance(&model, &x, &y);
            assert!(d <= prev + 1e-9, "{trees}: {d} > {prev}");
            prev = d;
        }
    }

    #[test]
    fn zero_trees_predict_the_base_rate() {
        let x = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        let params = GbtParams {
            trees: 0,
            ..Default::default()
        };
        let m = GbtModel::fit(&params, x.view(), &[0.0, 1.0, 1.0, 1.0], 0);
        assert!((m.predict_row(x.row(0)) - 0.75).abs() < 1e-12);
        let m = GbtModel::fit(&params, x.view(), &[0.5, 1.0, 1.0, 1.5], 0);
        assert!((m.predict_row(x.row(0)) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn training_loss_nonincreasing_in_trees(
            vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -5.0f64..5.0), 20..120),
        ) {
            let m = vals.len();
            let x = Array2::from_shape_fn((m, 2), |(i, j)| if j == 0 { vals[i].0 } else { vals[i].1 });
            let y: Vec<f64> = vals.iter().map(|v| v.2).collect();
            let mut prev = f64::INFINITY;
            for trees in [0, 1, 2, 5, 10, 30] {
                let params = GbtParams { trees, min_leaf: 3, ..Default::default() };
                let model = GbtModel::fit(&params, x.view(), &y, 0);
                let loss = sse(&model, &x, &y);
                prop_assert!(loss <= prev + 1e-9 * (1.0 + prev.abs().min(1e12)));
                prev = loss;
            }
        }
    }
}
