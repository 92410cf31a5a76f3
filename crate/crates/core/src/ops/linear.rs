use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (input.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(TernError::dim("dense", xs, ws));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[1]] {
            return Err(TernError::dim("dense bias", b.shape(), &[ws[1]]));
        }
    }
    Ok((xs[0], xs[1], ws[1]))
}

/// `input (N×F) · weight (F×G) + bias (G)`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, f, g) = check_dense(input, weight, bias)?;
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![T::zero(); n * g];
    for i in 0..n {
        let orow = &mut out[i * g..][..g];
        if let Some(b) = bias {
            orow.copy_from_slice(b.data());
        }
        for k in 0..f {
            let xv = x[i * f + k];
            let wrow = &w[k * g..][..g];
            for j in 0..g {
                orow[j] += xv * wrow[j];
            }
        }
    }
    let out = Tensor::from_parts(vec![n, g], out);
    out.debug_check("dense")?;
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the bias gradient is the
/// column sum of `grad_out`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f, g) = check_dense(input, weight, None)?;
    if grad_out.shape() != [n, g] {
        return Err(TernError::dim("dense_backward", grad_out.shape(), &[n, g]));
    }
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); f * g];
    let mut gb = vec![T::zero(); g];
    for i in 0..n {
        let grow = &go[i * g..][..g];
        for k in 0..f {
            let wrow = &w[k * g..][..g];
            let xv = x[i * f + k];
            let gwrow = &mut gw[k * g..][..g];
            let mut acc = T::zero();
            for j in 0..g {
                acc += grow[j] * wrow[j];
                gwrow[j] += xv * grow[j];
            }
            gx[i * f + k] = acc;
        }
        for j in 0..g {
            gb[j] += grow[j];
        }
    }
    Ok((
        Tensor::from_parts(vec![n, f], gx),
        Tensor::from_parts(vec![f, g], gw),
        Tensor::from_parts(vec![g], gb),
    ))
}

pub fn dense_macs(input: &[usize], weight: &[usize]) -> Result<u64> {
    if input.len() != 2 || weight.len() != 2 || input[1] != weight[0] {
        return Err(TernError::dim("dense", input, weight));
    }
    Ok((input[0] * input[1] * weight[1]) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&i2, &i2, None).unwrap(), i2);
    }

    #[test]
    fn zero_weight() {
        let y = dense(&t(&[1, 2], &[1.0, 2.0]), &Tensor::zeros(&[2, 2]), None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_product() {
        let y = dense(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]),
            None,
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn bias_broadcasts_over_rows() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let w = t(&[1, 2], &[1.0, 10.0]);
        let b = t(&[2], &[0.5, -0.5]);
        assert_eq!(
            dense(&x, &w, Some(&b)).unwrap().data(),
            &[1.5, 9.5, 2.5, 19.5]
        );
    }

    #[test]
    fn inner_dimension_mismatch() {
        let err = dense(
            &Tensor::<f32>::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 3]),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TernError::Dimension { .. }));
    }
}
