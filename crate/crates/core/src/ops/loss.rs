use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c] = logits.shape() else {
        return Err(TernError::Shape {
            shape: logits.shape().to_vec(),
            reason: "softmax expects N×C logits".into(),
        });
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Mean negative log-likelihood of `targets`; returns the loss and the
/// softmax probabilities for the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(TernError::dim(
            "softmax_cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let mut loss = T::zero();
    for (row, &t) in logits.data().chunks_exact(c).zip(targets) {
        if t >= c {
            return Err(TernError::Config(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        loss += lse - row[t];
    }
    Ok((loss / T::of_usize(n), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad_loss / T::of_usize(n);
    let mut g = probs.data().to_vec();
    for (row, &t) in g.chunks_exact_mut(c).zip(targets) {
        row[t] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_parts(vec![n, c], g)
}
