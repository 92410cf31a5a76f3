use crate::error::{Result, TernError};
use crate::scalar::Scalar;

/// Eval-mode batch-norm parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn apply(&self, channel: usize, z: T) -> T {
        self.gamma[channel] * (z - self.mean[channel]) / (self.var[channel] + self.eps).sqrt()
            + self.beta[channel]
    }
}

/// Rewrites batch-norm statistics so that feeding it the un-scaled code sum
/// `k` reproduces feeding the original layer output `α·k`.
///
/// `(α·k − μ)/√(σ²+ε) = (k − μ/α)/√((σ²+ε)/α²)`, so the folded mean is `μ/α`
/// and the folded variance is `(σ²+ε)/α² − ε`.
pub fn fold_alpha_into_bn<T: Scalar>(alpha: T, bn: &BnParams<T>) -> Result<BnParams<T>> {
    if !(alpha > T::zero() && alpha.is_finite()) {
        return Err(TernError::Config(format!(
            "cannot fold scaling factor {alpha}; keep it explicit"
        )));
    }
    if alpha == T::one() {
        return Ok(bn.clone());
    }
    let a2 = alpha * alpha;
    Ok(BnParams {
        gamma: bn.gamma.clone(),
        beta: bn.beta.clone(),
        mean: bn.mean.iter().map(|&m| m / alpha).collect(),
        var: bn.var.iter().map(|&v| (v + bn.eps) / a2 - bn.eps).collect(),
        eps: bn.eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(mean: f64, var: f64, eps: f64) -> BnParams<f64> {
        BnParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            mean: vec![mean],
            var: vec![var],
            eps,
        }
    }

    #[test]
    fn unit_alpha_is_identity() {
        let p = bn(0.3, 2.0, 1e-5);
        assert_eq!(fold_alpha_into_bn(1.0, &p).unwrap(), p);
    }

    #[test]
    fn alpha_two_halves_mean_and_quarters_variance() {
        let (mu, var) = (0.8, 3.0);
        let f = fold_alpha_into_bn(2.0, &bn(mu, var, 0.0)).unwrap();
        assert_eq!(f.mean, vec![mu / 2.0]);
        assert_eq!(f.var, vec![var / 4.0]);
        for k in [-3.0, -0.5, 0.0, 1.0, 7.25] {
            let unfolded = bn(mu, var, 0.0).apply(0, 2.0 * k);
            assert!((f.apply(0, k) - unfolded).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_is_exact_with_eps_and_affine() {
        let p = BnParams {
            gamma: vec![1.5, -0.7],
            beta: vec![0.2, 3.0],
            mean: vec![0.1, -2.0],
            var: vec![0.04, 9.0],
            eps: 1e-5,
        };
        let alpha = 0.037f64;
        let f = fold_alpha_into_bn(alpha, &p).unwrap();
        for c in 0..2 {
            for k in [-10.0, -1.0, 0.5, 4.0] {
                let a = p.apply(c, alpha * k);
                let b = f.apply(c, k);
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_alpha_cannot_be_folded() {
        assert!(fold_alpha_into_bn(0.0, &bn(0.0, 1.0, 1e-5)).is_err());
    }
}
