//! Bagged random forest over [`DecisionTree`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecisionTree, Matrix, TreeParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub trees: usize,
    /// Features per split; `None` means `floor(sqrt(cols))`.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_features: None,
            max_depth: None,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_features: usize,
}

impl RandomForest {
    /// Each tree draws from its own ChaCha stream, so the result does not
    /// depend on how the trees are scheduled.
    pub fn fit(x: &Matrix, y: &[u8], params: &ForestParams, seed: u64) -> Self {
        let max_features = params
            .max_features
            .unwrap_or_else(|| ((x.cols as f64).sqrt().floor() as usize).max(1));
        let tree_params = TreeParams {
            max_features: Some(max_features),
            max_depth: params.max_depth,
            min_samples_split: 2,
        };
        let trees = (0..params.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let samples: Vec<usize> = if params.bootstrap {
                    (0..x.rows).map(|_| rng.gen_range(0..x.rows)).collect()
                } else {
                    (0..x.rows).collect()
                };
                DecisionTree::fit(x, y, &samples, &tree_params, &mut rng)
            })
            .collect();
        Self {
            trees,
            n_features: x.cols,
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_proba(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Mean of per-tree normalised Gini importances, renormalised.
    pub fn feature_importances(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.feature_importances()) {
                *a += v;
            }
        }
        let total: f64 = acc.iter().sum();
        if total > 0.0 {
            acc.iter_mut().for_each(|a| *a /= total);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_feature_dominates_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = vec![y[i] as f64];
                r.extend((0..9).map(|_| rng.gen::<f64>()));
                r
            })
            .collect();
        let x = Matrix::from_rows(&rows);
        let f = RandomForest::fit(&x, &y, &ForestParams::default(), 3);
        let imp = f.feature_importances();
        assert!(imp[0] > 0.5, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(f.predict_proba(&[1.0; 10]) > 0.5);
        assert!(f.predict_proba(&[0.0; 10]) < 0.5);
        assert_eq!(f, RandomForest::fit(&x, &y, &ForestParams::default(), 3));
    }
}
