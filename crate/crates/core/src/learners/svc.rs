//! Soft-margin RBF support-vector classifier (SMO with second-order working
//! set selection) and Platt-scaled probabilities.

use serde::{Deserialize, Serialize};

use super::{stratified_kfold, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvcParams {
    pub c: f64,
    /// RBF width; `None` means `1 / (cols * var(X))`.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    /// Folds used to collect held-out decision values for calibration.
    pub calibration_folds: usize,
}

impl Default for SvcParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tolerance: 1e-3,
            calibration_folds: 5,
        }
    }
}

/// `P(y=1 | f) = 1 / (1 + exp(a f + b))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattScaling {
    pub a: f64,
    pub b: f64,
}

impl PlattScaling {
    /// Newton fit with backtracking on regularised targets.
    pub fn fit(decision: &[f64], labels: &[u8]) -> Self {
        let prior1 = labels.iter().filter(|&&l| l == 1).count() as f64;
        let prior0 = labels.len() as f64 - prior1;
        let hi = (prior1 + 1.0) / (prior1 + 2.0);
        let lo = 1.0 / (prior0 + 2.0);
        let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { hi } else { lo }).collect();
        let objective = |a: f64, b: f64| -> f64 {
            decision
                .iter()
                .zip(&t)
                .map(|(&f, &ti)| {
                    let z = f * a + b;
                    if z >= 0.0 {
                        ti * z + (-z).exp().ln_1p()
                    } else {
                        (ti - 1.0) * z + z.exp().ln_1p()
                    }
                })
                .sum()
        };
        let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
        let mut fval = objective(a, b);
        for _ in 0..100 {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
            for (&f, &ti) in decision.iter().zip(&t) {
                let z = f * a + b;
                let (p, q) = if z >= 0.0 {
                    let e = (-z).exp();
                    (e / (1.0 + e), 1.0 / (1.0 + e))
                } else {
                    let e = z.exp();
                    (1.0 / (1.0 + e), e / (1.0 + e))
                };
                let d2 = p * q;
                h11 += f * f * d2;
                h22 += d2;
                h21 += f * d2;
                let d1 = ti - p;
                g1 += f * d1;
                g2 += d1;
            }
            if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= 1e-10 {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    break;
                }
                step /= 2.0;
            }
            if step < 1e-10 {
                break;
            }
        }
        Self { a, b }
    }

    pub fn probability(&self, decision: f64) -> f64 {
        let z = decision * self.a + self.b;
        if z >= 0.0 {
            (-z).exp() / (1.0 + (-z).exp())
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Svc {
    gamma: f64,
    support: Matrix,
    /// `alpha_i * y_i` per support vector.
    coef: Vec<f64>,
    rho: f64,
    platt: PlattScaling,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d).exp()
}

/// Dual solution on the subset `idx` of a precomputed kernel.
struct Solution {
    alpha: Vec<f64>,
    rho: f64,
}

fn solve(kernel: &[f64], n: usize, idx: &[usize], y: &[f64], c: f64, eps: f64) -> Solution {
    const TAU: f64 = 1e-12;
    let l = idx.len();
    let k = |a: usize, b: usize| kernel[idx[a] * n + idx[b]];
    let qd: Vec<f64> = (0..l).map(|i| k(i, i)).collect();
    let mut alpha = vec![0.0; l];
    let mut g = vec![-1.0; l];
    let max_iter = (100 * l).max(10_000_000);
    for _ in 0..max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            let v = if y[t] > 0.0 {
                if alpha[t] < c { -g[t] } else { continue }
            } else if alpha[t] > 0.0 {
                g[t]
            } else {
                continue;
            };
            if v >= gmax {
                gmax = v;
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..l {
            let kit = k(i, t);
            let (grad_diff, quad) = if y[t] > 0.0 {
                if alpha[t] <= 0.0 {
                    continue;
                }
                gmax2 = gmax2.max(g[t]);
                (gmax + g[t], qd[i] + qd[t] - 2.0 * y[i] * y[t] * kit * y[i])
            } else {
                if alpha[t] >= c {
                    continue;
                }
                gmax2 = gmax2.max(-g[t]);
                (gmax - g[t], qd[i] + qd[t] + 2.0 * y[i] * y[t] * kit * y[i])
            };
            if grad_diff > 0.0 {
                let obj = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < eps || j == usize::MAX {
            break;
        }
        let (oi, oj) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
        for t in 0..l {
            g[t] += y[t] * (y[i] * k(i, t) * di + y[j] * k(j, t) * dj);
        }
    }
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0);
    for t in 0..l {
        let yg = y[t] * g[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { 0.5 * (ub + lb) };
    Solution { alpha, rho }
}

fn decision_on(kernel: &[f64], n: usize, train: &[usize], y: &[f64], sol: &Solution, row: usize) -> f64 {
    train
        .iter()
        .enumerate()
        .filter(|(t, _)| sol.alpha[*t] > 0.0)
        .map(|(t, &r)| sol.alpha[t] * y[t] * kernel[r * n + row])
        .sum::<f64>()
        - sol.rho
}

impl Svc {
    pub fn fit(x: &Matrix, labels: &[u8], params: &SvcParams, seed: u64) -> Self {
        let n = x.rows;
        let gamma = params.gamma.unwrap_or_else(|| {
            let mean = x.data.iter().sum::<f64>() / x.data.len().max(1) as f64;
            let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / x.data.len().max(1) as f64;
            if var > 0.0 {
                1.0 / (x.cols as f64 * var)
            } else {
                1.0
            }
        });
        let mut kernel = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rbf(x.row(i), x.row(j), gamma);
                kernel[i * n + j] = v;
                kernel[j * n + i] = v;
            }
        }
        let ysign: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

        let mut held_out = vec![0.0; n];
        for fold in stratified_kfold(labels, params.calibration_folds.max(2), seed) {
            let train: Vec<usize> = (0..n).filter(|i| fold.binary_search(i).is_err()).collect();
            let yt: Vec<f64> = train.iter().map(|&i| ysign[i]).collect();
            let pos = yt.iter().filter(|&&v| v > 0.0).count();
            if pos == 0 || pos == yt.len() {
                let v = if pos == 0 { -1.0 } else { 1.0 };
                fold.iter().for_each(|&r| held_out[r] = v);
                continue;
            }
            let sol = solve(&kernel, n, &train, &yt, params.c, params.tolerance);
            for &r in &fold {
                held_out[r] = decision_on(&kernel, n, &train, &yt, &sol, r);
            }
        }
        let platt = PlattScaling::fit(&held_out, labels);

        let all: Vec<usize> = (0..n).collect();
        let sol = solve(&kernel, n, &all, &ysign, params.c, params.tolerance);
        let sv: Vec<usize> = (0..n).filter(|&i| sol.alpha[i] > 0.0).collect();
        Self {
            gamma,
            support: x.select_rows(&sv),
            coef: sv.iter().map(|&i| sol.alpha[i] * ysign[i]).collect(),
            rho: sol.rho,
            platt,
        }
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        self.coef
            .iter()
            .enumerate()
            .map(|(s, c)| c * rbf(self.support.row(s), row, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.platt.probability(self.decision(row))
    }

    pub fn support_vectors(&self) -> usize {
        self.coef.len()
    }
}
