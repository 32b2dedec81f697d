//! Classical binary learners used for neuron ranking and stacking.

mod forest;
mod logistic;
mod svc;
mod tree;

pub use forest::{ForestParams, RandomForest};
pub use logistic::LogisticRegression;
pub use svc::{PlattScaling, Svc, SvcParams};
pub use tree::{DecisionTree, TreeParams};

use serde::{Deserialize, Serialize};

/// Dense row-major `f64` design matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix from columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "ragged columns");
            for (i, v) in c.iter().enumerate() {
                data[i * cols + j] = *v;
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(idx.len(), self.cols, data)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&j| r[j]));
        }
        Self::new(self.rows, cols.len(), data)
    }
}

/// `k` folds of `0..n`, contiguous after a seeded shuffle.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let k = k.clamp(1, n.max(1));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    folds
}

/// Stratified variant: each fold receives a near-equal share of each label.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k.max(1)];
    let mut offset = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = folds.len();
        for (n, i) in idx.into_iter().enumerate() {
            folds[(n + offset) % k].push(i);
        }
        offset += labels.iter().filter(|&&l| l == class).count();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_indices() {
        let folds = kfold_indices(23, 5, 1);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));

        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        let strat = stratified_kfold(&labels, 5, 2);
        for f in &strat {
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
    }

    #[test]
    fn matrix_views() {
        let m = Matrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(m.row(1), &[2.0, 4.0, 6.0]);
        assert_eq!(m.select_columns(&[2, 0]).row(0), &[5.0, 1.0]);
        assert_eq!(m.select_rows(&[1]).column(1), vec![4.0]);
    }
}
