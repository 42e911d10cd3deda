use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Cross entropy against `(1 − s)·onehot + s/C`, averaged over the batch.
/// Returns the loss and its gradient with respect to the logits.
pub fn label_smoothed_ce<T: Scalar>(
    logits: &Tensor4<T>,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Tensor4<T>)> {
    let n = logits.n();
    let classes = logits.c() * logits.plane();
    ensure_dim("label_smoothed_ce", "targets", n, targets.len())?;
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} outside [0, 1]")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::InvalidArgument(format!(
            "target {bad} out of range for {classes} classes"
        )));
    }
    let off = smoothing / classes as f64;
    let on = 1.0 - smoothing + off;
    let mut grad = Vec::with_capacity(n * classes);
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(classes).zip(targets) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (c, &z) in row.iter().enumerate() {
            let q = if c == t { on } else { off };
            let logp = z - lse;
            total -= q * logp;
            grad.push(T::of((logp.exp() - q) / n as f64));
        }
    }
    Ok((total / n as f64, Tensor4::from_vec(logits.shape(), grad)?))
}
