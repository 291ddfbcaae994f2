use super::error::TensorError;
use super::tensor::{Result, Tensor};

/// Mean negative log-softmax probability of the true class.
///
/// The row maximum is subtracted before exponentiating; it is taken as a
/// constant since log-softmax is invariant to per-row shifts.
pub fn nll_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "nll_loss",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
    }
    let shift = logits.max_axes(&[1])?.detach();
    let z = logits.sub(&shift.expand(shape, &[1])?)?;
    let lse = z.exp()?.sum_axes(&[1])?.clamp_min(1e-12)?.log()?;
    let log_probs = z.sub(&lse.expand(shape, &[1])?)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let picked = log_probs.mul(&Tensor::new(shape, onehot)?)?;
    picked.sum_all()?.scale(-1.0 / n as f64)
}

/// Mean of squared differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    pred.sub(target)?.square()?.mean_all()
}
