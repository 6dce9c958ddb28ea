use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor inside the normalizing square root.
pub const BN_EPS: f64 = 1e-5;

/// Running statistics keep this fraction of their previous value:
/// `running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel values cached by the training forward pass for backward.
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

fn check_channels<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm scale/shift lengths {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((b, c, h * w))
}

/// Training-mode batch normalization over `[batch, channels, h, w]`.
///
/// Batch statistics are computed per channel over batch and spatial axes; the
/// variance is the biased estimator (divide by the element count), both in
/// normalization and in the running statistics. Running stats are updated in
/// place.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, hw) = check_channels(x, gamma, beta)?;
    let m = b * hw;
    if m < 2 {
        return Err(Error::Config(format!(
            "batchnorm needs at least 2 values per channel, got {m}"
        )));
    }
    let inv_m = T::one() / T::from_usize(m);
    let eps = T::from_f64(BN_EPS);
    let keep = T::from_f64(BN_MOMENTUM);
    let blend = T::one() - keep;

    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let mut cache = BnCache { mean: vec![T::zero(); c], inv_std: vec![T::zero(); c] };

    for ci in 0..c {
        let mut sum = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &xd[base..base + hw] {
                sum += v;
            }
        }
        let mean = sum * inv_m;
        let mut varsum = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for &v in &xd[base..base + hw] {
                let d = v - mean;
                varsum += d * d;
            }
        }
        let var = varsum * inv_m;
        let inv_std = T::one() / (var + eps).sqrt();
        cache.mean[ci] = mean;
        cache.inv_std[ci] = inv_std;
        running_mean[ci] = keep * running_mean[ci] + blend * mean;
        running_var[ci] = keep * running_var[ci] + blend * var;

        let g = gamma[ci];
        let bt = beta[ci];
        let od = out.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for (o, &v) in od[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                *o = g * ((v - mean) * inv_std) + bt;
            }
        }
    }
    Ok((out, cache))
}

/// Eval-mode batch normalization using frozen running statistics. Pure.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let (b, c, hw) = check_channels(x, gamma, beta)?;
    let eps = T::from_f64(BN_EPS);
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for ci in 0..c {
        let inv_std = T::one() / (running_var[ci] + eps).sqrt();
        let mean = running_mean[ci];
        let g = gamma[ci];
        let bt = beta[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for (o, &v) in od[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                *o = g * ((v - mean) * inv_std) + bt;
            }
        }
    }
    Ok(out)
}

/// Backward pass for training-mode batch normalization.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    upstream: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (b, c, h, w) = x.dims4()?;
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm upstream {:?} vs input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let m = b * hw;
    let inv_m = T::one() / T::from_usize(m);

    let xd = x.data();
    let ud = upstream.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];

    for ci in 0..c {
        let mean = cache.mean[ci];
        let inv_std = cache.inv_std[ci];
        // First pass: sum of upstream and of upstream * xhat.
        let mut sum_u = T::zero();
        let mut sum_ux = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for (&u, &v) in ud[base..base + hw].iter().zip(&xd[base..base + hw]) {
                sum_u += u;
                sum_ux += u * ((v - mean) * inv_std);
            }
        }
        dbeta[ci] = sum_u;
        dgamma[ci] = sum_ux;

        // dx = (gamma * inv_std / m) * (m * u - sum_u - xhat * sum_ux)
        let g = gamma[ci];
        let scale = g * inv_std * inv_m;
        let mf = T::from_usize(m);
        let dd = dx.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for ((o, &u), &v) in
                dd[base..base + hw].iter_mut().zip(&ud[base..base + hw]).zip(&xd[base..base + hw])
            {
                let xhat = (v - mean) * inv_std;
                *o = scale * (mf * u - sum_u - xhat * sum_ux);
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let x = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 * 3.0 - 4.0);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, _) = batchnorm_train(&x, &[1.0], &[0.0], &mut rm, &mut rv).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 8.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn running_stats_blend() {
        let x = Tensor::filled(&[1, 1, 1, 2], 10.0f64);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        batchnorm_train(&x, &[1.0], &[0.0], &mut rm, &mut rv).unwrap();
        // batch mean 10, batch var 0 (biased)
        assert!((rm[0] - 0.9 * 0.0 - 0.1 * 10.0).abs() < 1e-12);
        assert!((rv[0] - 0.9 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0f64, 5.0]).unwrap();
        let y = batchnorm_eval(&x, &[2.0], &[1.0], &[4.0], &[1.0 - BN_EPS]).unwrap();
        // (3-4)/1 * 2 + 1 = -1 ; (5-4)/1 * 2 + 1 = 3
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn scale_shift_applied() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0f64, 1.0]).unwrap();
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, _) = batchnorm_train(&x, &[3.0], &[0.5], &mut rm, &mut rv).unwrap();
        assert!(y.data()[0] < 0.0 && y.data()[1] > 0.0);
        let mid = (y.data()[0] + y.data()[1]) / 2.0;
        assert!((mid - 0.5).abs() < 1e-9);
    }
}
