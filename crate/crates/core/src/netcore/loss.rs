use alloc::vec::Vec;

use crate::math;

/// Cross-entropy of `softmax(logits)` against a target index. Returns the
/// loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = math::log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|&x| math::exp(x - lse)).collect();
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

/// Binary cross-entropy of `sigmoid(logits)` against targets in `[0, 1]`,
/// averaged over labels.
pub fn sigmoid_bce_mean(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), targets.len());
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(targets) {
        // log(1 + exp(-|x|)) + max(x, 0) - x * y
        loss += math::ln(1.0 + math::exp(-x.abs())) + x.max(0.0) - x * y;
        grad.push((math::sigmoid(x) - y) / n);
    }
    (loss / n, grad)
}
