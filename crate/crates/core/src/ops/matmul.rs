use super::{MaddCounter, NoCount, Tally};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn matmul_impl<T: Scalar, C: MaddCounter>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    counter: &mut C,
) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    let ov = out.data_mut();
    // out[i][j] accumulates over ascending kk; the inner j loop is contiguous.
    for i in 0..m {
        let orow = &mut ov[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = av[i * k + kk];
            let brow = &bv[kk * n..(kk + 1) * n];
            for (o, &bvv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bvv;
                counter.madd();
            }
        }
    }
    Ok(out)
}

/// `a (m x k)` times `b (k x n)`, accumulated over ascending `k`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_impl(a, b, &mut NoCount)
}

/// Same product, plus the literal multiply-add count.
pub fn matmul_counted<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
    let mut tally = Tally::default();
    let out = matmul_impl(a, b, &mut tally)?;
    Ok((out, tally.0))
}

/// Gradients of `matmul(a, b)` given the upstream gradient:
/// `da = up . b^T`, `db = a^T . up`.
pub fn matmul_grads<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul(upstream, &b.transposed2()?)?;
    let db = matmul(&a.transposed2()?, upstream)?;
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn rectangular_and_count() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64) * 0.5 - 1.0);
        let b = Tensor::from_fn(&[4, 5], |i| (i as f64) * 0.25 + 0.5);
        let (c, count) = matmul_counted(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 5]);
        assert_eq!(count, 3 * 4 * 5);
    }

    #[test]
    fn inner_dim_mismatch_errors() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn deterministic_repeat() {
        let a = Tensor::from_fn(&[7, 9], |i| ((i * 37 % 11) as f32) * 0.3 - 1.1);
        let b = Tensor::from_fn(&[9, 8], |i| ((i * 53 % 13) as f32) * 0.7 - 2.0);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }
}
