use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

use super::Var;

fn out_size(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds one `[c,h,w]` image into a `[c·k·k, ho·wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let l = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * l);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * l;
                let dst = &mut cols[row..row + l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * l;
                let src = &cols[row..row + l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation with square kernels, zero padding and an
    /// optional `[1,co,1,1]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = weight.value();
        let [n, c, h, w] = x.shape();
        let [co, ci, k, k2] = wt.shape();
        if ci != c || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs kernel {:?}", x.shape(), wt.shape()),
            ));
        }
        let (Some(ho), Some(wo)) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad))
        else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than {h}x{w}"),
            ));
        };
        if let Some(b) = bias {
            if b.shape() != [1, co, 1, 1] {
                return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
            }
        }
        let l = ho * wo;
        let ck = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![T::zero(); ck * l]
        };
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out.data_mut()[b * co * l..(b + 1) * co * l];
            let rhs: &[T] = if direct {
                xb
            } else {
                im2col(xb, c, h, w, k, stride, pad, &mut cols);
                &cols
            };
            matmul(co, ck, l, wt.data(), false, rhs, false, ob, false);
        }
        if let Some(bv) = bias {
            let bias_v = bv.value();
            for b in 0..n {
                for o in 0..co {
                    let bo = bias_v.data()[o];
                    let s = (b * co + o) * l;
                    out.data_mut()[s..s + l].iter_mut().for_each(|v| *v += bo);
                }
            }
        }

        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.op(out, &parents, move |g, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = needs[1].then(|| Tensor::zeros(wt.shape()));
            let mut cols = vec![T::zero(); if direct { 0 } else { ck * l }];
            let mut dcols = vec![T::zero(); if dx.is_some() { ck * l } else { 0 }];
            for b in 0..n {
                let gb = &g.data()[b * co * l..(b + 1) * co * l];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                    let rhs: &[T] = if direct {
                        xb
                    } else {
                        im2col(xb, c, h, w, k, stride, pad, &mut cols);
                        &cols
                    };
                    matmul(co, l, ck, gb, false, rhs, true, dw.data_mut(), true);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
                    if direct {
                        matmul(ck, co, l, wt.data(), true, gb, false, dxb, false);
                    } else {
                        matmul(ck, co, l, wt.data(), true, gb, false, &mut dcols, false);
                        col2im(&dcols, c, h, w, k, stride, pad, dxb);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = Tensor::zeros([1, co, 1, 1]);
                    for b in 0..n {
                        for o in 0..co {
                            let s = (b * co + o) * l;
                            db.data_mut()[o] += g.data()[s..s + l].iter().copied().sum();
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }
}
