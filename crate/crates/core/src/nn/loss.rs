use super::tensor::Tensor;

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[label]` computed without forming the probability.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean softmax cross-entropy over a batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.batch();
    assert_eq!(n, labels.len());
    let k = logits.row_len();
    let mut grad = Vec::with_capacity(n * k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += cross_entropy_from_logits(row, y);
        let p = softmax(row);
        for (c, pc) in p.into_iter().enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            grad.push((pc - t) / n as f64);
        }
    }
    (total / n as f64, Tensor::new(vec![n, k], grad))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let l = cross_entropy_from_logits(&[0.0; 10], 3);
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
