//! CART classification tree with Gini impurity.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Features examined per split; `None` means all.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_features: None,
            max_depth: None,
            min_samples_split: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        p1: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    n_features: usize,
    /// Total weighted impurity decrease per feature (unnormalised).
    impurity_decrease: Vec<f64>,
}

fn gini(n0: f64, n1: f64) -> f64 {
    let n = n0 + n1;
    if n == 0.0 {
        return 0.0;
    }
    let (p0, p1) = (n0 / n, n1 / n);
    1.0 - p0 * p0 - p1 * p1
}

struct Best {
    feature: usize,
    threshold: f64,
    child_impurity: f64,
}

impl DecisionTree {
    /// Fits on `samples` (row indices, repeats allowed for bootstrap draws).
    pub fn fit(
        x: &Matrix,
        y: &[u8],
        samples: &[usize],
        params: &TreeParams,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(x.rows, y.len());
        let mut tree = DecisionTree {
            nodes: Vec::new(),
            n_features: x.cols,
            impurity_decrease: vec![0.0; x.cols],
        };
        let max_features = params.max_features.unwrap_or(x.cols).clamp(1, x.cols.max(1));
        let mut features: Vec<usize> = (0..x.cols).collect();
        let mut buf: Vec<(f64, u8)> = Vec::with_capacity(samples.len());
        // (node slot, samples, depth)
        let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, samples.to_vec(), 0)];
        tree.nodes.push(Node::Leaf { p1: 0.0 });
        while let Some((slot, idx, depth)) = stack.pop() {
            let n1 = idx.iter().filter(|&&i| y[i] == 1).count() as f64;
            let n = idx.len() as f64;
            let n0 = n - n1;
            let p1 = if n > 0.0 { n1 / n } else { 0.0 };
            tree.nodes[slot] = Node::Leaf { p1 };
            let parent = gini(n0, n1);
            if parent == 0.0
                || idx.len() < params.min_samples_split
                || params.max_depth.is_some_and(|d| depth >= d)
            {
                continue;
            }
            features.shuffle(rng);
            let mut best: Option<Best> = None;
            let mut visited = 0;
            for &f in &features {
                if visited >= max_features && best.is_some() {
                    break;
                }
                buf.clear();
                buf.extend(idx.iter().map(|&i| (x.get(i, f), y[i])));
                buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
                if buf[0].0 == buf[buf.len() - 1].0 {
                    continue;
                }
                visited += 1;
                let (mut l0, mut l1) = (0.0, 0.0);
                for k in 0..buf.len() - 1 {
                    if buf[k].1 == 1 {
                        l1 += 1.0;
                    } else {
                        l0 += 1.0;
                    }
                    if buf[k].0 == buf[k + 1].0 {
                        continue;
                    }
                    let (r0, r1) = (n0 - l0, n1 - l1);
                    let child = (l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1);
                    if best.as_ref().is_none_or(|b| child < b.child_impurity) {
                        let mut threshold = 0.5 * (buf[k].0 + buf[k + 1].0);
                        if threshold >= buf[k + 1].0 {
                            threshold = buf[k].0;
                        }
                        best = Some(Best {
                            feature: f,
                            threshold,
                            child_impurity: child,
                        });
                    }
                }
            }
            let Some(best) = best else { continue };
            tree.impurity_decrease[best.feature] += n * parent - best.child_impurity;
            let (left, right): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&i| x.get(i, best.feature) <= best.threshold);
            let (li, ri) = (tree.nodes.len(), tree.nodes.len() + 1);
            tree.nodes.push(Node::Leaf { p1: 0.0 });
            tree.nodes.push(Node::Leaf { p1: 0.0 });
            tree.nodes[slot] = Node::Split {
                feature: best.feature,
                threshold: best.threshold,
                left: li,
                right: ri,
            };
            stack.push((ri, right, depth + 1));
            stack.push((li, left, depth + 1));
        }
        tree
    }

    /// Fraction of class-1 training samples in the reached leaf.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { p1 } => return *p1,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Gini importances normalised to sum to 1 (all zero for a stump).
    pub fn feature_importances(&self) -> Vec<f64> {
        let total: f64 = self.impurity_decrease.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.n_features];
        }
        self.impurity_decrease.iter().map(|v| v / total).collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}
