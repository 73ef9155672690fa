//! Deformable 3×3 convolution (no modulation) with bilinear sampling.
//!
//! Offsets are a `[n, 18, h, w]` map. Tap `k` runs row-major over the
//! kernel window, i.e. `k = ky·3 + kx` with base displacement
//! `(kx-1, ky-1)`; channel `2k` holds its horizontal offset and `2k+1` its
//! vertical one. Samples that fall outside the map read zeros.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

use super::Var;

pub const TAPS: usize = 9;

/// Bilinear sample of all channels of batch item `b` at fractional `(x, y)`.
/// Neighbours outside the map contribute zero.
pub fn bilinear_sample<T: Scalar>(f: &Tensor<T>, b: usize, x: f64, y: f64) -> Vec<T> {
    let [_, c, h, w] = f.shape();
    let corners = Corners::new(x, y, h, w);
    (0..c)
        .map(|ci| corners.sample(&f.data()[(b * c + ci) * h * w..(b * c + ci + 1) * h * w]))
        .collect()
}

/// The four integer neighbours of a sample point and their weights.
#[derive(Clone, Copy)]
struct Corners {
    /// Flat indices, `None` when outside the map; order (y0,x0),(y0,x1),(y1,x0),(y1,x1).
    idx: [Option<usize>; 4],
    tx: f64,
    ty: f64,
}

impl Corners {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let at = |yy: f64, xx: f64| {
            (yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64)
                .then(|| yy as usize * w + xx as usize)
        };
        Self {
            idx: [
                at(fy, fx),
                at(fy, fx + 1.0),
                at(fy + 1.0, fx),
                at(fy + 1.0, fx + 1.0),
            ],
            tx,
            ty,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (tx, ty) = (self.tx, self.ty);
        [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ]
    }

    fn values<T: Scalar>(&self, plane: &[T]) -> [f64; 4] {
        self.idx.map(|i| i.map_or(0.0, |i| plane[i].as_f64()))
    }

    fn sample<T: Scalar>(&self, plane: &[T]) -> T {
        let v = self.values(plane);
        let wts = self.weights();
        T::from_f64_lossy(v.iter().zip(wts).map(|(a, b)| a * b).sum())
    }

    /// Partial derivatives of the sample w.r.t. `x` and `y`.
    fn grad<T: Scalar>(&self, plane: &[T]) -> (f64, f64) {
        let [v00, v01, v10, v11] = self.values(plane);
        let (tx, ty) = (self.tx, self.ty);
        (
            (1.0 - ty) * (v01 - v00) + ty * (v11 - v10),
            (1.0 - tx) * (v10 - v00) + tx * (v11 - v01),
        )
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Deformable 3×3 convolution of `self` (`[n,c,h,w]`) with stride 1 and
    /// output size equal to the input. Offsets are clamped to
    /// `±max(h, w)`; clamped components receive no gradient.
    pub fn deform_conv(
        self,
        offsets: Var<'t, T>,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let off = offsets.value();
        let wt = weight.value();
        let [n, c, h, w] = x.shape();
        let [co, ci, kh, kw] = wt.shape();
        if off.shape() != [n, 2 * TAPS, h, w] || ci != c || kh != 3 || kw != 3 {
            return Err(Error::shape(
                "deform_conv",
                format!(
                    "source {:?}, offsets {:?}, kernel {:?}",
                    x.shape(),
                    off.shape(),
                    wt.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [1, co, 1, 1] {
                return Err(Error::shape("deform_conv", format!("bias {:?}", b.shape())));
            }
        }
        let l = h * w;
        let ck = c * TAPS;
        let limit = h.max(w) as f64;

        // Sample positions per (batch, tap, pixel), shared by all channels.
        let mut corners = Vec::with_capacity(n * TAPS * l);
        let mut clamped = Vec::with_capacity(n * TAPS * l * 2);
        for b in 0..n {
            for k in 0..TAPS {
                let (rx, ry) = ((k % 3) as f64 - 1.0, (k / 3) as f64 - 1.0);
                let ox_plane = &off.data()[(b * 2 * TAPS + 2 * k) * l..][..l];
                let oy_plane = &off.data()[(b * 2 * TAPS + 2 * k + 1) * l..][..l];
                for p in 0..l {
                    let (ox, oy) = (ox_plane[p].as_f64(), oy_plane[p].as_f64());
                    let (cx, cy) = (ox.clamp(-limit, limit), oy.clamp(-limit, limit));
                    clamped.push(cx != ox);
                    clamped.push(cy != oy);
                    let (px, py) = ((p % w) as f64, (p / w) as f64);
                    corners.push(Corners::new(px + rx + cx, py + ry + cy, h, w));
                }
            }
        }

        let mut cols = vec![T::zero(); n * ck * l];
        for b in 0..n {
            for cc in 0..c {
                let plane = &x.data()[(b * c + cc) * l..(b * c + cc + 1) * l];
                for k in 0..TAPS {
                    let row = &mut cols[(b * ck + cc * TAPS + k) * l..][..l];
                    let cs = &corners[(b * TAPS + k) * l..][..l];
                    for (v, cr) in row.iter_mut().zip(cs) {
                        *v = cr.sample(plane);
                    }
                }
            }
        }
        let mut out = Tensor::zeros([n, co, h, w]);
        for b in 0..n {
            matmul(
                co,
                ck,
                l,
                wt.data(),
                false,
                &cols[b * ck * l..(b + 1) * ck * l],
                false,
                &mut out.data_mut()[b * co * l..(b + 1) * co * l],
                false,
            );
        }
        if let Some(bv) = bias {
            let bias_v = bv.value();
            for b in 0..n {
                for o in 0..co {
                    let bo = bias_v.data()[o];
                    out.data_mut()[(b * co + o) * l..][..l]
                        .iter_mut()
                        .for_each(|v| *v += bo);
                }
            }
        }

        let mut parents = vec![self, offsets, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.op(out, &parents, move |g, needs| {
            let mut dw = needs[2].then(|| Tensor::zeros(wt.shape()));
            let need_cols = needs[0] || needs[1];
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut doff = needs[1].then(|| Tensor::zeros(off.shape()));
            let mut dcols = vec![T::zero(); if need_cols { ck * l } else { 0 }];
            for b in 0..n {
                let gb = &g.data()[b * co * l..(b + 1) * co * l];
                if let Some(dw) = dw.as_mut() {
                    let cb = &cols[b * ck * l..(b + 1) * ck * l];
                    matmul(co, l, ck, gb, false, cb, true, dw.data_mut(), true);
                }
                if !need_cols {
                    continue;
                }
                matmul(ck, co, l, wt.data(), true, gb, false, &mut dcols, false);
                for cc in 0..c {
                    let plane = &x.data()[(b * c + cc) * l..(b * c + cc + 1) * l];
                    for k in 0..TAPS {
                        let drow = &dcols[(cc * TAPS + k) * l..][..l];
                        let cs = &corners[(b * TAPS + k) * l..][..l];
                        if let Some(dx) = dx.as_mut() {
                            let dplane = &mut dx.data_mut()[(b * c + cc) * l..][..l];
                            for (cr, &gv) in cs.iter().zip(drow) {
                                let gv = gv.as_f64();
                                for (i, wv) in cr.idx.iter().zip(cr.weights()) {
                                    if let Some(i) = *i {
                                        dplane[i] += T::from_f64_lossy(gv * wv);
                                    }
                                }
                            }
                        }
                        if let Some(doff) = doff.as_mut() {
                            let base = (b * 2 * TAPS + 2 * k) * l;
                            for (p, (cr, &gv)) in cs.iter().zip(drow).enumerate() {
                                let (gx, gy) = cr.grad(plane);
                                let gv = gv.as_f64();
                                let ci = ((b * TAPS + k) * l + p) * 2;
                                let d = doff.data_mut();
                                if !clamped[ci] {
                                    d[base + p] += T::from_f64_lossy(gv * gx);
                                }
                                if !clamped[ci + 1] {
                                    d[base + l + p] += T::from_f64_lossy(gv * gy);
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, doff, dw];
            if has_bias {
                grads.push(needs[3].then(|| {
                    let mut db = Tensor::zeros([1, co, 1, 1]);
                    for b in 0..n {
                        for o in 0..co {
                            db.data_mut()[o] +=
                                g.data()[(b * co + o) * l..][..l].iter().copied().sum();
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }
}
