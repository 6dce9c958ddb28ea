use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-overlapping average pooling with a square window (stride = window).
/// Spatial dims must be divisible by the window.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::ShapeMismatch(format!(
            "avg_pool window {window} does not tile {h}x{w}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let inv = T::one() / T::from_usize(window * window);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let ibase = (bi * c + ci) * h * w;
            let obase = (bi * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for dh in 0..window {
                        let row = ibase + (oh * window + dh) * w + ow * window;
                        for dw in 0..window {
                            acc += xd[row + dw];
                        }
                    }
                    od[obase + oh * wo + ow] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(
    x_shape: &[usize],
    window: usize,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x_shape[..] else {
        return Err(Error::ShapeMismatch(format!("avg_pool input shape {x_shape:?}")));
    };
    let (ub, uc, ho, wo) = upstream.dims4()?;
    if ub != b || uc != c || ho != h / window || wo != w / window {
        return Err(Error::ShapeMismatch(format!(
            "avg_pool upstream {:?} for input {x_shape:?} window {window}",
            upstream.shape()
        )));
    }
    let inv = T::one() / T::from_usize(window * window);
    let mut dx = Tensor::zeros(x_shape);
    let ud = upstream.data();
    let dd = dx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let ibase = (bi * c + ci) * h * w;
            let obase = (bi * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = ud[obase + oh * wo + ow] * inv;
                    for dh in 0..window {
                        let row = ibase + (oh * window + dh) * w + ow * window;
                        for dw in 0..window {
                            dd[row + dw] = g;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over all spatial positions per channel: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::ShapeMismatch("global_avg_pool on empty spatial dims".into()));
    }
    let inv = T::one() / T::from_usize(hw);
    let mut out = Tensor::zeros(&[b, c]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let mut acc = T::zero();
            for &v in &xd[base..base + hw] {
                acc += v;
            }
            od[bi * c + ci] = acc * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    x_shape: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x_shape[..] else {
        return Err(Error::ShapeMismatch(format!("global_avg_pool input shape {x_shape:?}")));
    };
    let (ub, uc) = upstream.dims2()?;
    if ub != b || uc != c {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool upstream {:?} for input {x_shape:?}",
            upstream.shape()
        )));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw);
    let mut dx = Tensor::zeros(x_shape);
    let ud = upstream.data();
    let dd = dx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let g = ud[bi * c + ci] * inv;
            let base = (bi * c + ci) * hw;
            dd[base..base + hw].fill(g);
        }
    }
    Ok(dx)
}
