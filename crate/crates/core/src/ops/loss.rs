use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over a `[batch, classes]` logit matrix, plus
/// the gradient with respect to the logits: `(softmax - onehot) / batch`.
///
/// Each row uses the log-sum-exp form stabilized by the row maximum, so
/// finite logits of any magnitude stay finite.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    logits.ensure_finite("cross_entropy logits")?;
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let inv_b = T::one() / T::from_usize(b);
    let ld = logits.data();
    let mut grad = Tensor::zeros(&[b, k]);
    let gd = grad.data_mut();
    let mut loss_sum = T::zero();
    for i in 0..b {
        let row = &ld[i * k..(i + 1) * k];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        let grow = &mut gd[i * k..(i + 1) * k];
        for (g, &v) in grow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *g = e;
            sum += e;
        }
        loss_sum += sum.ln() + m - row[labels[i]];
        for g in grow.iter_mut() {
            *g = *g / sum * inv_b;
        }
        grow[labels[i]] -= inv_b;
    }
    Ok((loss_sum * inv_b, grad))
}

/// Loss half of [`cross_entropy`], for callers that do not need the gradient.
pub fn softmax_cross_entropy_loss_only<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    cross_entropy(logits, labels).map(|(l, _)| l)
}

/// Number of rows whose argmax equals the label.
pub fn accuracy_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    let ld = logits.data();
    let mut correct = 0;
    for (i, &l) in labels.iter().enumerate() {
        if argmax_row(&ld[i * k..(i + 1) * k]) == l {
            correct += 1;
        }
    }
    Ok(correct)
}
