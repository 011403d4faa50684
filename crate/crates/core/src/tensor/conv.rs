//! Strided 2-D convolution with gradient support.
//!
//! Direct-loop implementation; sizes in this pipeline are small enough that
//! im2col buys nothing. Input is [C_in x H x W], weight [C_out x C_in x kh x kw],
//! bias [C_out]; output [C_out x H' x W'] with H' = (H + 2*pad - kh)/stride + 1
//! (floor division).

use super::{fmt_shape, Element, Tensor};
use crate::error::{Error, Result};

pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    input.check_rank(3, "conv2d input")?;
    weight.check_rank(4, "conv2d weight")?;
    bias.check_rank(1, "conv2d bias")?;
    if stride == 0 {
        return Err(Error::Param("conv2d: stride must be >= 1".into()));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in || bias.shape()[0] != c_out {
        return Err(Error::Shape(format!(
            "conv2d: input {} weight {} bias {} are inconsistent",
            fmt_shape(input.shape()),
            fmt_shape(weight.shape()),
            fmt_shape(bias.shape())
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![E::zero(); c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize]
                                * wt[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }

    let (xi, wi) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        vec![c_out, oh, ow],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        move |g| {
            let x = xi.data();
            let wt = wi.data();
            let mut dx = vec![E::zero(); c_in * h * w];
            let mut dw = vec![E::zero(); c_out * c_in * kh * kw];
            let mut db = vec![E::zero(); c_out];
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(co * oh + oy) * ow + ox];
                        if gv == E::zero() {
                            continue;
                        }
                        db[co] += gv;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xidx = (ci * h + iy as usize) * w + ix as usize;
                                    let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                                    dx[xidx] += gv * wt[widx];
                                    dw[widx] += gv * x[xidx];
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw, db]
        },
    ))
}
