use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise max(0, x). The derivative at exactly 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(upstream, |xv, u| if xv > T::zero() { u } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Row-wise softmax of a `[rows, cols]` matrix, stabilized by subtracting the
/// row maximum before exponentiation.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let mut out = Tensor::zeros(&[r, c]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..r {
        let row = &ad[i * c..(i + 1) * c];
        let orow = &mut od[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Backward pass through [`softmax_rows`] given the forward output `y`:
/// `dx_i = y_i * (up_i - sum_j up_j * y_j)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = y.dims2()?;
    let (ur, uc) = upstream.dims2()?;
    if (ur, uc) != (r, c) {
        return Err(crate::error::Error::ShapeMismatch(format!(
            "softmax backward: y {:?} vs upstream {:?}",
            y.shape(),
            upstream.shape()
        )));
    }
    let mut out = Tensor::zeros(&[r, c]);
    let yd = y.data();
    let ud = upstream.data();
    let od = out.data_mut();
    for i in 0..r {
        let yrow = &yd[i * c..(i + 1) * c];
        let urow = &ud[i * c..(i + 1) * c];
        let mut dot = T::zero();
        for (&yv, &uv) in yrow.iter().zip(urow) {
            dot += yv * uv;
        }
        for ((o, &yv), &uv) in od[i * c..(i + 1) * c].iter_mut().zip(yrow).zip(urow) {
            *o = yv * (uv - dot);
        }
    }
    Ok(out)
}
