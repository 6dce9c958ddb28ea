use super::{MaddCounter, NoCount, Tally};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config(format!("kernel {kernel} and stride {stride} must be nonzero")));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Materializes the zero-padded copy of `x`. Padding is physical so the
/// instrumented multiply-add count matches the closed-form cost exactly.
pub fn pad_input<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[b, c, hp, wp]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((bi * c + ci) * h + hi) * w;
                let dst = ((bi * c + ci) * hp + hi + pad) * wp + pad;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    Ok(out)
}

fn check_bias<T: Scalar>(bias: Option<&[T]>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} for {} output channels",
                b.len(),
                n
            )));
        }
    }
    Ok(())
}

fn conv2d_impl<T: Scalar, CT: MaddCounter>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    counter: &mut CT,
) -> Result<Tensor<T>> {
    let (b, c, h, wi) = x.dims4()?;
    let (n, cw, kh, kw) = w.dims4()?;
    if cw != c {
        return Err(Error::ShapeMismatch(format!(
            "conv weight wants {cw} input channels, activation has {c}"
        )));
    }
    check_bias(bias, n)?;
    let hout = conv_out_dim(h, kh, stride, pad)?;
    let wout = conv_out_dim(wi, kw, stride, pad)?;

    // 1x1/stride-1 projections take a fused spatial loop; the per-element
    // accumulation chain (bias first, then ascending input channel) is the
    // same as the general path's.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let hw = h * wi;
        let mut out = Tensor::zeros(&[b, n, h, wi]);
        let xd = x.data();
        let wd = w.data();
        let od = out.data_mut();
        for bi in 0..b {
            for ni in 0..n {
                let orow = &mut od[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                if let Some(bv) = bias {
                    orow.fill(bv[ni]);
                }
                for ci in 0..c {
                    let wv = wd[ni * c + ci];
                    let xrow = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o = *o + wv * xv;
                        counter.madd();
                    }
                }
            }
        }
        return Ok(out);
    }

    let padded;
    let xe = if pad > 0 {
        padded = pad_input(x, pad)?;
        &padded
    } else {
        x
    };
    let (hp, wp) = (h + 2 * pad, wi + 2 * pad);
    let mut out = Tensor::zeros(&[b, n, hout, wout]);
    let xd = xe.data();
    let wd = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ni in 0..n {
            let obase = (bi * n + ni) * hout * wout;
            if let Some(bv) = bias {
                od[obase..obase + hout * wout].fill(bv[ni]);
            }
            for ci in 0..c {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let wv = wd[((ni * c + ci) * kh + dh) * kw + dw];
                        for oh in 0..hout {
                            let ih = oh * stride + dh;
                            let xbase = ((bi * c + ci) * hp + ih) * wp + dw;
                            let orow = &mut od[obase + oh * wout..obase + (oh + 1) * wout];
                            if stride == 1 {
                                let xrow = &xd[xbase..xbase + wout];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o = *o + wv * xv;
                                    counter.madd();
                                }
                            } else {
                                for (ow, o) in orow.iter_mut().enumerate() {
                                    *o = *o + wv * xd[xbase + ow * stride];
                                    counter.madd();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2d convolution over `[batch, channels, h, w]` with weights
/// `[out, in, kh, kw]`. Accumulation starts at the bias and runs over
/// ascending (input channel, kh, kw).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_impl(x, w, bias, stride, pad, &mut NoCount)
}

/// Same convolution, plus the literal multiply-add count.
pub fn conv2d_counted<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, u64)> {
    let mut tally = Tally::default();
    let out = conv2d_impl(x, w, bias, stride, pad, &mut tally)?;
    Ok((out, tally.0))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

/// Gradients of a 1x1 stride-1 unpadded convolution with weight matrix
/// `w (n x c)`. Summation runs over ascending (batch, spatial) per output
/// element; the general backward path produces bit-identical results for the
/// same layer.
pub fn conv1x1_grads<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    upstream: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (b, c, h, wi) = x.dims4()?;
    let (n, cw) = w.dims2()?;
    let (ub, un, uh, uw) = upstream.dims4()?;
    if cw != c || ub != b || un != n || uh != h || uw != wi {
        return Err(Error::ShapeMismatch(format!(
            "conv1x1 grads: x {:?}, w {:?}, upstream {:?}",
            x.shape(),
            w.shape(),
            upstream.shape()
        )));
    }
    let hw = h * wi;
    let xd = x.data();
    let ud = upstream.data();

    let mut db = vec![T::zero(); n];
    for bi in 0..b {
        for ni in 0..n {
            let base = (bi * n + ni) * hw;
            let mut acc = db[ni];
            for &u in &ud[base..base + hw] {
                acc += u;
            }
            db[ni] = acc;
        }
    }

    // dw[n][c] += upstream[b][n][s] * x[b][c][s], s ascending within each
    // batch item; the transposed activation makes the inner loop contiguous.
    let mut dw = Tensor::zeros(&[n, c]);
    {
        let dwd = dw.data_mut();
        let mut xt = vec![T::zero(); hw * c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for (s, &v) in xd[base..base + hw].iter().enumerate() {
                    xt[s * c + ci] = v;
                }
            }
            for ni in 0..n {
                let ubase = (bi * n + ni) * hw;
                let drow = &mut dwd[ni * c..(ni + 1) * c];
                for s in 0..hw {
                    let u = ud[ubase + s];
                    let xrow = &xt[s * c..(s + 1) * c];
                    for (d, &xv) in drow.iter_mut().zip(xrow) {
                        *d = *d + u * xv;
                    }
                }
            }
        }
    }

    let dx = if need_dx {
        let wt = w.transposed2()?;
        let wtd = wt.data();
        let mut dx = Tensor::zeros(&[b, c, h, wi]);
        let dxd = dx.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let dbase = (bi * c + ci) * hw;
                let drow = &mut dxd[dbase..dbase + hw];
                for ni in 0..n {
                    let wv = wtd[ci * n + ni];
                    let ubase = (bi * n + ni) * hw;
                    let urow = &ud[ubase..ubase + hw];
                    for (d, &u) in drow.iter_mut().zip(urow) {
                        *d = *d + wv * u;
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

/// Gradients of [`conv2d`] with respect to input, weights, and bias.
/// `need_dx` skips the input gradient for a network's first layer.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (b, c, h, wi) = x.dims4()?;
    let (n, _, kh, kw) = w.dims4()?;
    let (ub, un, hout, wout) = upstream.dims4()?;
    if ub != b || un != n {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} for conv with batch {b}, out {n}",
            upstream.shape()
        )));
    }
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let wm = w.clone().reshaped(&[n, c])?;
        let grads = conv1x1_grads(x, &wm, upstream, need_dx)?;
        return Ok(ConvGrads {
            dx: grads.dx,
            dw: grads.dw.reshaped(&[n, c, 1, 1])?,
            db: grads.db,
        });
    }
    let padded;
    let xe = if pad > 0 {
        padded = pad_input(x, pad)?;
        &padded
    } else {
        x
    };
    let (hp, wp) = (h + 2 * pad, wi + 2 * pad);
    let xd = xe.data();
    let ud = upstream.data();
    let wd = w.data();

    let mut db = vec![T::zero(); n];
    for bi in 0..b {
        for ni in 0..n {
            let ubase = (bi * n + ni) * hout * wout;
            let mut acc = db[ni];
            for &u in &ud[ubase..ubase + hout * wout] {
                acc += u;
            }
            db[ni] = acc;
        }
    }

    let mut dw = Tensor::zeros(&[n, c, kh, kw]);
    {
        let dwd = dw.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                for dh in 0..kh {
                    for dwi in 0..kw {
                        let mut acc = T::zero();
                        for bi in 0..b {
                            let ubase = (bi * n + ni) * hout * wout;
                            for oh in 0..hout {
                                let ih = oh * stride + dh;
                                let xbase = ((bi * c + ci) * hp + ih) * wp + dwi;
                                let urow = &ud[ubase + oh * wout..ubase + (oh + 1) * wout];
                                for (ow, &u) in urow.iter().enumerate() {
                                    acc += u * xd[xbase + ow * stride];
                                }
                            }
                        }
                        dwd[((ni * c + ci) * kh + dh) * kw + dwi] = acc;
                    }
                }
            }
        }
    }

    let dx = if need_dx {
        let mut dxp = Tensor::<T>::zeros(&[b, c, hp, wp]);
        {
            let dxd = dxp.data_mut();
            for bi in 0..b {
                for ni in 0..n {
                    let ubase = (bi * n + ni) * hout * wout;
                    for ci in 0..c {
                        for dh in 0..kh {
                            for dwi in 0..kw {
                                let wv = wd[((ni * c + ci) * kh + dh) * kw + dwi];
                                for oh in 0..hout {
                                    let ih = oh * stride + dh;
                                    let xbase = ((bi * c + ci) * hp + ih) * wp + dwi;
                                    let urow = &ud[ubase + oh * wout..ubase + (oh + 1) * wout];
                                    if stride == 1 {
                                        let xrow = &mut dxd[xbase..xbase + wout];
                                        for (o, &u) in xrow.iter_mut().zip(urow) {
                                            *o = *o + wv * u;
                                        }
                                    } else {
                                        for (ow, &u) in urow.iter().enumerate() {
                                            dxd[xbase + ow * stride] += wv * u;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(if pad > 0 { crop_pad(&dxp, pad, h, wi)? } else { dxp })
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

fn crop_pad<T: Scalar>(xp: &Tensor<T>, pad: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, hp, wp) = xp.dims4()?;
    debug_assert_eq!(hp, h + 2 * pad);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let xd = xp.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((bi * c + ci) * hp + hi + pad) * wp + pad;
                let dst = ((bi * c + ci) * h + hi) * w;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    Ok(out)
}

fn depthwise_impl<T: Scalar, CT: MaddCounter>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    counter: &mut CT,
) -> Result<Tensor<T>> {
    let (b, c, h, wi) = x.dims4()?;
    let (cw, one, kh, kw) = w.dims4()?;
    if cw != c || one != 1 {
        return Err(Error::ShapeMismatch(format!(
            "depthwise weight {:?} for {c} channels (want [{c}, 1, kh, kw])",
            w.shape()
        )));
    }
    check_bias(bias, c)?;
    let hout = conv_out_dim(h, kh, stride, pad)?;
    let wout = conv_out_dim(wi, kw, stride, pad)?;
    let padded;
    let xe = if pad > 0 {
        padded = pad_input(x, pad)?;
        &padded
    } else {
        x
    };
    let (hp, wp) = (h + 2 * pad, wi + 2 * pad);
    let mut out = Tensor::zeros(&[b, c, hout, wout]);
    let xd = xe.data();
    let wd = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let obase = (bi * c + ci) * hout * wout;
            if let Some(bv) = bias {
                od[obase..obase + hout * wout].fill(bv[ci]);
            }
            for dh in 0..kh {
                for dw in 0..kw {
                    let wv = wd[(ci * kh + dh) * kw + dw];
                    for oh in 0..hout {
                        let ih = oh * stride + dh;
                        let xbase = ((bi * c + ci) * hp + ih) * wp + dw;
                        let orow = &mut od[obase + oh * wout..obase + (oh + 1) * wout];
                        if stride == 1 {
                            let xrow = &xd[xbase..xbase + wout];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + wv * xv;
                                counter.madd();
                            }
                        } else {
                            for (ow, o) in orow.iter_mut().enumerate() {
                                *o = *o + wv * xd[xbase + ow * stride];
                                counter.madd();
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise 2d convolution: weights `[channels, 1, kh, kw]`, one filter per
/// input channel. Accumulation starts at the bias and runs over ascending
/// (kh, kw).
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    depthwise_impl(x, w, bias, stride, pad, &mut NoCount)
}

/// Same convolution, plus the literal multiply-add count.
pub fn depthwise_conv2d_counted<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, u64)> {
    let mut tally = Tally::default();
    let out = depthwise_impl(x, w, bias, stride, pad, &mut tally)?;
    Ok((out, tally.0))
}

/// Gradients of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (b, c, h, wi) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let (ub, uc, hout, wout) = upstream.dims4()?;
    if ub != b || uc != c {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} for depthwise conv with batch {b}, channels {c}",
            upstream.shape()
        )));
    }
    let padded;
    let xe = if pad > 0 {
        padded = pad_input(x, pad)?;
        &padded
    } else {
        x
    };
    let (hp, wp) = (h + 2 * pad, wi + 2 * pad);
    let xd = xe.data();
    let ud = upstream.data();
    let wd = w.data();

    let mut db = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let ubase = (bi * c + ci) * hout * wout;
            let mut acc = db[ci];
            for &u in &ud[ubase..ubase + hout * wout] {
                acc += u;
            }
            db[ci] = acc;
        }
    }

    let mut dw = Tensor::zeros(&[c, 1, kh, kw]);
    {
        let dwd = dw.data_mut();
        for ci in 0..c {
            for dh in 0..kh {
                for dwi in 0..kw {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let ubase = (bi * c + ci) * hout * wout;
                        for oh in 0..hout {
                            let ih = oh * stride + dh;
                            let xbase = ((bi * c + ci) * hp + ih) * wp + dwi;
                            let urow = &ud[ubase + oh * wout..ubase + (oh + 1) * wout];
                            for (ow, &u) in urow.iter().enumerate() {
                                acc += u * xd[xbase + ow * stride];
                            }
                        }
                    }
                    dwd[(ci * kh + dh) * kw + dwi] = acc;
                }
            }
        }
    }

    let dx = if need_dx {
        let mut dxp = Tensor::<T>::zeros(&[b, c, hp, wp]);
        {
            let dxd = dxp.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let ubase = (bi * c + ci) * hout * wout;
                    for dh in 0..kh {
                        for dwi in 0..kw {
                            let wv = wd[(ci * kh + dh) * kw + dwi];
                            for oh in 0..hout {
                                let ih = oh * stride + dh;
                                let xbase = ((bi * c + ci) * hp + ih) * wp + dwi;
                                let urow = &ud[ubase + oh * wout..ubase + (oh + 1) * wout];
                                if stride == 1 {
                                    let xrow = &mut dxd[xbase..xbase + wout];
                                    for (o, &u) in xrow.iter_mut().zip(urow) {
                                        *o = *o + wv * u;
                                    }
                                } else {
                                    for (ow, &u) in urow.iter().enumerate() {
                                        dxd[xbase + ow * stride] += wv * u;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(if pad > 0 { crop_pad(&dxp, pad, h, wi)? } else { dxp })
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::matmul;

    fn seq_tensor(shape: &[usize], scale: f64, offset: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 2654435761 % 97) as f64) * scale + offset)
    }

    #[test]
    fn out_dim_examples() {
        assert_eq!(conv_out_dim(28, 3, 1, 1).unwrap(), 28);
        assert_eq!(conv_out_dim(28, 3, 2, 1).unwrap(), 14);
        assert_eq!(conv_out_dim(5, 1, 1, 0).unwrap(), 5);
        assert!(conv_out_dim(2, 5, 1, 0).is_err());
        assert!(conv_out_dim(4, 3, 0, 1).is_err());
    }

    #[test]
    fn hand_computed_3x3() {
        // Single channel, 3x3 input, 3x3 kernel of ones, pad 1: each output is
        // the sum of the 3x3 neighborhood.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0f64);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Center: 1+2+...+9 = 45. Corner (0,0): 1+2+4+5 = 12.
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
        assert_eq!(y.data()[2], 2.0 + 3.0 + 5.0 + 6.0);
    }

    #[test]
    fn bias_initializes_accumulator() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]).unwrap();
        let w = Tensor::from_vec(&[2, 1, 1, 1], vec![3.0, -1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&[10.0, 20.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[16.0, 18.0]);
    }

    #[test]
    fn conv_1x1_matches_matmul() {
        // A 1x1 convolution is a matrix product per batch item: W (n x c)
        // times the flattened activation (c x hw).
        for trial in 0..200 {
            let b = 1 + trial % 3;
            let c = 1 + (trial * 7) % 9;
            let n = 1 + (trial * 5) % 11;
            let h = 1 + (trial * 3) % 6;
            let wdim = 1 + (trial * 11) % 5;
            let x = seq_tensor(&[b, c, h, wdim], 0.13, -2.0 + (trial as f64) * 0.01);
            let w = seq_tensor(&[n, c, 1, 1], 0.07, -0.4);
            let y = conv2d(&x, &w, None, 1, 0).unwrap();
            let wm = w.clone().reshaped(&[n, c]).unwrap();
            for bi in 0..b {
                let hw = h * wdim;
                let xb = Tensor::from_vec(
                    &[c, hw],
                    x.data()[bi * c * hw..(bi + 1) * c * hw].to_vec(),
                )
                .unwrap();
                let want = matmul(&wm, &xb).unwrap();
                let got = Tensor::from_vec(
                    &[n, hw],
                    y.data()[bi * n * hw..(bi + 1) * n * hw].to_vec(),
                )
                .unwrap();
                let scale = want.max_abs().max(1e-8);
                assert!(
                    got.max_abs_diff(&want) / scale < 1e-6,
                    "trial {trial}: 1x1 conv diverged from matmul"
                );
            }
        }
    }

    #[test]
    fn counted_matches_formula() {
        let x = seq_tensor(&[2, 3, 8, 8], 0.1, 0.0);
        let w = seq_tensor(&[5, 3, 3, 3], 0.1, -0.1);
        let (_, count) = conv2d_counted(&x, &w, None, 1, 1).unwrap();
        // 2 batches x (5 out x 3 in x 9 taps x 64 positions)
        assert_eq!(count, 2 * 5 * 3 * 9 * 64);

        let (_, count_s2) = conv2d_counted(&x, &w, None, 2, 1).unwrap();
        assert_eq!(count_s2, 2 * 5 * 3 * 9 * 16);

        let wd = seq_tensor(&[3, 1, 3, 3], 0.2, 0.0);
        let (_, count_dw) = depthwise_conv2d_counted(&x, &wd, None, 1, 1).unwrap();
        assert_eq!(count_dw, 2 * 3 * 9 * 64);
    }

    #[test]
    fn depthwise_hand_example() {
        // Two channels; channel 0 kernel all ones, channel 1 kernel all twos.
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let mut wdat = vec![1.0; 9];
        wdat.extend(std::iter::repeat(2.0).take(9));
        let w = Tensor::from_vec(&[2, 1, 3, 3], wdat).unwrap();
        let y = depthwise_conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert_eq!(y.data()[0], (0..9).map(|v| v as f64).sum::<f64>());
        assert_eq!(y.data()[1], (9..18).map(|v| v as f64).sum::<f64>() * 2.0);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 4, 1, 1]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        let wd = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &wd, None, 1, 1).is_err());
    }

    #[test]
    fn conv1x1_grads_match_naive_reference_bitwise() {
        let x = seq_tensor(&[3, 4, 2, 5], 0.21, -0.9);
        let w = seq_tensor(&[6, 4], 0.17, 0.05);
        let up = seq_tensor(&[3, 6, 2, 5], 0.31, -1.3);
        let grads = conv1x1_grads(&x, &w, &up, true).unwrap();

        // Naive reference. Each dw/db cell sees its terms in ascending
        // (batch, spatial) order and each dx cell in ascending filter order,
        // the same per-element chains the fast path uses, so equality must be
        // exact.
        let (b, c, h, wi) = x.dims4().unwrap();
        let n = 6;
        let hw = h * wi;
        let mut dw_ref = vec![0.0f64; n * c];
        let mut db_ref = vec![0.0f64; n];
        let mut dx_ref = vec![0.0f64; b * c * hw];
        for bi in 0..b {
            for ni in 0..n {
                for s in 0..hw {
                    let u = up.data()[(bi * n + ni) * hw + s];
                    db_ref[ni] += u;
                    for ci in 0..c {
                        dw_ref[ni * c + ci] += u * x.data()[(bi * c + ci) * hw + s];
                    }
                }
            }
        }
        for bi in 0..b {
            for ci in 0..c {
                for ni in 0..n {
                    let wv = w.data()[ni * c + ci];
                    for s in 0..hw {
                        dx_ref[(bi * c + ci) * hw + s] += wv * up.data()[(bi * n + ni) * hw + s];
                    }
                }
            }
        }
        assert_eq!(grads.dw.data(), &dw_ref[..]);
        assert_eq!(&grads.db[..], &db_ref[..]);
        assert_eq!(grads.dx.unwrap().data(), &dx_ref[..]);
    }

    #[test]
    fn padded_equals_manual_padding() {
        let x = seq_tensor(&[1, 2, 4, 4], 0.3, -1.0);
        let w = seq_tensor(&[3, 2, 3, 3], 0.11, 0.02);
        let via_pad_arg = conv2d(&x, &w, None, 1, 1).unwrap();
        let xp = pad_input(&x, 1).unwrap();
        let via_materialized = conv2d(&xp, &w, None, 1, 0).unwrap();
        assert_eq!(via_pad_arg.data(), via_materialized.data());
    }
}
