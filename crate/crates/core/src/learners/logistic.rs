//! L2-regularised logistic regression fit by Newton's method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticRegression {
    /// Minimises `0.5 |w|^2 + c * sum(log-loss)`; the intercept is not penalised.
    pub fn fit(x: &Matrix, y: &[u8], c: f64) -> Self {
        let d = x.cols + 1;
        let mut theta = DVector::<f64>::zeros(d);
        let objective = |theta: &DVector<f64>| -> f64 {
            let mut f = 0.5 * theta.rows(0, x.cols).norm_squared();
            for i in 0..x.rows {
                let z = x.row(i).iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>()
                    + theta[x.cols];
                // log(1 + e^{-z}) for y=1, log(1 + e^{z}) for y=0
                let s = if y[i] == 1 { -z } else { z };
                f += c * if s > 0.0 { s + (-s).exp().ln_1p() } else { s.exp().ln_1p() };
            }
            f
        };
        let mut fval = objective(&theta);
        for _ in 0..100 {
            let mut grad = DVector::<f64>::zeros(d);
            let mut hess = DMatrix::<f64>::zeros(d, d);
            for j in 0..x.cols {
                grad[j] = theta[j];
                hess[(j, j)] = 1.0;
            }
            for i in 0..x.rows {
                let row = x.row(i);
                let z = row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>() + theta[x.cols];
                let p = sigmoid(z);
                let r = c * (p - y[i] as f64);
                let w = c * p * (1.0 - p);
                for a in 0..d {
                    let xa = if a < x.cols { row[a] } else { 1.0 };
                    grad[a] += r * xa;
                    for b in 0..d {
                        let xb = if b < x.cols { row[b] } else { 1.0 };
                        hess[(a, b)] += w * xa * xb;
                    }
                }
            }
            if grad.amax() < 1e-10 {
                break;
            }
            for a in 0..d {
                hess[(a, a)] += 1e-12;
            }
            let Some(step) = hess.clone().cholesky().map(|ch| ch.solve(&grad)) else {
                break;
            };
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let cand = &theta - &step * t;
                let f = objective(&cand);
                if f <= fval - 1e-4 * t * grad.dot(&step) {
                    theta = cand;
                    fval = f;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        Self {
            weights: theta.rows(0, x.cols).iter().copied().collect(),
            intercept: theta[x.cols],
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.intercept)
    }
}
