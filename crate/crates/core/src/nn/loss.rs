//! Classification loss for the discriminators.

/// Mean binary cross-entropy computed directly from logits.
///
/// Uses the max-form identity `max(x, 0) - x t + ln(1 + e^-|x|)` so large
/// logits of either sign stay finite. Returns the loss and the gradient with
/// respect to each logit; the gradient already carries the `1/n` from the
/// mean.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len(), "logits/targets length mismatch");
    assert!(!logits.is_empty(), "empty batch");
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        grad.push((super::sigmoid(x) - t) / n);
    }
    (loss / n, grad)
}
