use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running statistics, updated in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
        }
    }
}

/// Everything the backward pass needs from a batch-norm forward.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

/// `(channels, batch, spatial)` for a rank-2 `N×C` or rank-4 `N×C×H×W` input.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((c, n, 1)),
        [n, c, h, w] => Ok((c, n, h * w)),
        _ => Err(TernError::Shape {
            shape: shape.to_vec(),
            reason: "batch norm expects N×C or N×C×H×W".into(),
        }),
    }
}

#[inline]
fn for_channel<T: Copy>(
    data: &[T],
    c: usize,
    channels: usize,
    n: usize,
    spatial: usize,
    mut f: impl FnMut(usize, T),
) {
    for b in 0..n {
        let base = (b * channels + c) * spatial;
        for (k, &v) in data[base..base + spatial].iter().enumerate() {
            f(base + k, v);
        }
    }
}

/// Batch normalisation with per-channel affine `gamma`, `beta`.
///
/// Train mode normalises with the biased batch variance and folds the
/// unbiased variance into `stats`; eval mode reads `stats` only.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (channels, n, spatial) = layout(input.shape())?;
    for p in [gamma.shape(), beta.shape()] {
        if p != [channels] {
            return Err(TernError::dim("batchnorm", input.shape(), p));
        }
    }
    if stats.mean.len() != channels || stats.var.len() != channels {
        return Err(TernError::dim(
            "batchnorm running stats",
            input.shape(),
            &[stats.mean.len()],
        ));
    }
    if mode == NormMode::Train && n < 2 {
        return Err(TernError::Config(
            "batch norm in train mode needs a batch of at least 2".into(),
        ));
    }
    let x = input.data();
    let count = n * spatial;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    let m = T::of_usize(count);
    for c in 0..channels {
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut sum = T::zero();
                for_channel(x, c, channels, n, spatial, |_, v| sum += v);
                let mean = sum / m;
                let mut sq = T::zero();
                for_channel(x, c, channels, n, spatial, |_, v| {
                    sq += (v - mean) * (v - mean)
                });
                let var = sq / m;
                let unbiased = if count > 1 {
                    sq / T::of_usize(count - 1)
                } else {
                    var
                };
                let mom = stats.momentum;
                stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean;
                stats.var[c] = (T::one() - mom) * stats.var[c] + mom * unbiased;
                (mean, var)
            }
            NormMode::Eval => (stats.mean[c], stats.var[c]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for_channel(x, c, channels, n, spatial, |i, v| {
            // zero variance with eps = 0 leaves (v - mean) = 0, keep it finite
            let xh = if is.is_finite() {
                (v - mean) * is
            } else {
                T::zero()
            };
            xhat[i] = xh;
            out[i] = g * xh + b;
        });
        if !is.is_finite() {
            inv_std[c] = T::zero();
        }
    }
    let out = Tensor::from_parts(input.shape().to_vec(), out);
    out.debug_check("batchnorm")?;
    Ok((
        out,
        NormCache {
            xhat: Tensor::from_parts(input.shape().to_vec(), xhat),
            inv_std,
            mode,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(TernError::dim(
            "batchnorm_backward",
            grad_out.shape(),
            cache.xhat.shape(),
        ));
    }
    let (channels, n, spatial) = layout(grad_out.shape())?;
    let (g, xh) = (grad_out.data(), cache.xhat.data());
    let m = T::of_usize(n * spatial);
    let mut gx = vec![T::zero(); g.len()];
    let mut gg = vec![T::zero(); channels];
    let mut gb = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for_channel(g, c, channels, n, spatial, |i, v| {
            sum_g += v;
            sum_gx += v * xh[i];
        });
        gg[c] = sum_gx;
        gb[c] = sum_g;
        let scale = gamma.data()[c] * cache.inv_std[c];
        match cache.mode {
            NormMode::Train => {
                for_channel(g, c, channels, n, spatial, |i, v| {
                    gx[i] = scale * (v - sum_g / m - xh[i] * sum_gx / m);
                });
            }
            NormMode::Eval => {
                for_channel(g, c, channels, n, spatial, |i, v| gx[i] = scale * v);
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(vec![channels], gg),
        Tensor::from_parts(vec![channels], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let x = Tensor::<f64>::full(&[4, 2, 3, 3], 7.5);
        let mut st = RunningStats::new(2);
        let (y, _) = batchnorm(
            &x,
            &ones(2),
            &Tensor::zeros(&[2]),
            &mut st,
            NormMode::Train,
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn standardised_input_is_a_fixed_point() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut st = RunningStats::new(1);
        let (y, _) = batchnorm(
            &x,
            &ones(1),
            &Tensor::zeros(&[1]),
            &mut st,
            NormMode::Train,
            1e-8,
        )
        .unwrap();
        assert!(y.max_rel_diff(&x, 1e-12) < 1e-3);
    }

    #[test]
    fn hand_normalisation() {
        let x = Tensor::<f64>::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut st = RunningStats::new(1);
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 1.0);
        let (y, _) = batchnorm(&x, &gamma, &beta, &mut st, NormMode::Train, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
        // running stats: momentum 0.1 toward mean 2 and unbiased variance 2
        assert!((st.mean[0] - 0.2).abs() < 1e-12);
        assert!((st.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::new(vec![1, 1], vec![5.0]).unwrap();
        let mut st = RunningStats::new(1);
        st.mean[0] = 1.0;
        st.var[0] = 4.0;
        let (y, _) = batchnorm(
            &x,
            &ones(1),
            &Tensor::zeros(&[1]),
            &mut st,
            NormMode::Eval,
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0]);
        assert_eq!(st.mean[0], 1.0);
    }

    #[test]
    fn train_batch_of_one_is_rejected() {
        let x = Tensor::<f64>::full(&[1, 3], 1.0);
        let mut st = RunningStats::new(3);
        assert!(batchnorm(
            &x,
            &ones(3),
            &Tensor::zeros(&[3]),
            &mut st,
            NormMode::Train,
            1e-5
        )
        .is_err());
    }
}
