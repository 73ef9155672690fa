use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Tape, Var};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Clamped mean binary cross-entropy, accumulated in f64. This is the one
/// implementation behind the training mask loss and the evaluation metric.
pub(crate) fn bce_mean_kernel<T: Scalar>(pred: &[T], target: &[T]) -> f64 {
    const EPS: f64 = 1e-7;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(EPS, 1.0 - EPS);
            let t = t.as_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len().max(1) as f64
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.tape.op(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.tape.op(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &b, |x, y| x * y)),
                needs[1].then(|| zip_map(g, &a, |x, y| x * y)),
            ]
        }))
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t, T> {
        let (s, c) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let out = self.value().map(|v| s * v + c);
        self.tape
            .op(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        self.tape.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &y, |gv, yv| gv * yv * (T::one() - yv)))]
        })
    }

    pub fn abs(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.tape.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            }))]
        })
    }

    /// Mean over every element, as a scalar node.
    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let len = x.len().max(1);
        let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64_lossy(total / len as f64));
        let shape = x.shape();
        self.tape.op(out, &[self], move |g, _| {
            let v = g.item() / T::from_f64_lossy(len as f64);
            vec![Some(Tensor::full(shape, v))]
        })
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs_diff(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.sub(other)?.abs().mean())
    }

    /// Channel slice `[start, start + len)`.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        if start + len > c {
            return Err(Error::shape(
                "narrow_channels",
                format!("{start}+{len} > {c}"),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        let out = Tensor::new([n, len, h, w], out)?;
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                let base = (b * c + start) * plane;
                dx.data_mut()[base..base + len * plane]
                    .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
            }
            vec![Some(dx)]
        }))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(self) -> Var<'t, T> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for p in 0..n * c {
                let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} by {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let norm = T::from_f64_lossy(1.0 / (k * k) as f64);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * wo + xx / k] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for p in 0..n * c {
                let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = src[(y / k) * wo + xx / k] * norm;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Softmax across the channel axis at every `(batch, y, x)` location.
    pub fn softmax_channels(self) -> Var<'t, T> {
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c)
                    .map(|ch| x.data()[at(ch)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (x.data()[at(ch)] - max).exp();
                    out.data_mut()[at(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    out.data_mut()[at(ch)] = out.data()[at(ch)] / total;
                }
            }
        }
        let s = out.clone();
        self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                for p in 0..plane {
                    let at = |ch: usize| (b * c + ch) * plane + p;
                    let dot: T = (0..c).map(|ch| g.data()[at(ch)] * s.data()[at(ch)]).sum();
                    for ch in 0..c {
                        dx.data_mut()[at(ch)] = s.data()[at(ch)] * (g.data()[at(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Per-location inner product over channels: `[n,c,h,w]·[n,c,h,w] → [n,1,h,w]`.
    pub fn channel_dot(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("channel_dot", &a, &b)?;
        let [n, c, h, w] = a.shape();
        let plane = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        for bi in 0..n {
            let dst = &mut out.data_mut()[bi * plane..(bi + 1) * plane];
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    dst[p] += a.data()[base + p] * b.data()[base + p];
                }
            }
        }
        Ok(self.tape.op(out, &[self, other], move |g, needs| {
            let spread = |other: &Tensor<T>| {
                let mut d = Tensor::zeros([n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            d.data_mut()[base + p] =
                                g.data()[bi * plane + p] * other.data()[base + p];
                        }
                    }
                }
                d
            };
            vec![needs[0].then(|| spread(&b)), needs[1].then(|| spread(&a))]
        }))
    }

    /// Multiplies every channel by a `[n,1,h,w]` map.
    pub fn mul_channels(self, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, s) = (self.value(), weights.value());
        let [n, c, h, w] = x.shape();
        if s.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_channels",
                format!("{:?} vs {:?}", x.shape(), s.shape()),
            ));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    out.data_mut()[base + p] = x.data()[base + p] * s.data()[bi * plane + p];
                }
            }
        }
        Ok(self.tape.op(out, &[self, weights], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut d = Tensor::zeros([n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            d.data_mut()[base + p] = g.data()[base + p] * s.data()[bi * plane + p];
                        }
                    }
                }
                d
            });
            let ds = needs[1].then(|| {
                let mut d = Tensor::zeros([n, 1, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            d.data_mut()[bi * plane + p] += g.data()[base + p] * x.data()[base + p];
                        }
                    }
                }
                d
            });
            vec![dx, ds]
        }))
    }

    /// `(1-m)·self + m·other` with a `[n,1,h,w]` mask `m`. Where `m` is exactly
    /// 0 or 1 the result is the corresponding input bit for bit.
    pub fn masked_blend(self, other: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, d, m) = (self.value(), other.value(), mask.value());
        same_shape("masked_blend", &x, &d)?;
        let [n, c, h, w] = x.shape();
        if m.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "masked_blend",
                format!("{:?} vs mask {:?}", x.shape(), m.shape()),
            ));
        }
        let plane = h * w;
        let mask_at = move |i: usize| m.data()[(i / (c * plane)) * plane + i % plane];
        let out = Tensor::from_fn(x.shape(), |i| {
            let mv = mask_at(i);
            if mv == T::zero() {
                x.data()[i]
            } else if mv == T::one() {
                d.data()[i]
            } else {
                (T::one() - mv) * x.data()[i] + mv * d.data()[i]
            }
        });
        Ok(self.tape.op(out, &[self, other, mask], move |g, needs| {
            let dx = needs[0]
                .then(|| Tensor::from_fn(x.shape(), |i| (T::one() - mask_at(i)) * g.data()[i]));
            let dd = needs[1].then(|| Tensor::from_fn(x.shape(), |i| mask_at(i) * g.data()[i]));
            let dm = needs[2].then(|| {
                let mut t = Tensor::zeros([n, 1, h, w]);
                for i in 0..x.len() {
                    t.data_mut()[(i / (c * plane)) * plane + i % plane] +=
                        (d.data()[i] - x.data()[i]) * g.data()[i];
                }
                t
            });
            vec![dx, dd, dm]
        }))
    }

    /// Extends the bottom and right edges by replicating the last row/column.
    pub fn pad_replicate(self, bottom: usize, right: usize) -> Var<'t, T> {
        if bottom == 0 && right == 0 {
            return self;
        }
        let x = self.value();
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (h + bottom, w + right);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[y.min(h - 1) * w + xx.min(w - 1)];
                }
            }
        }
        self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for p in 0..n * c {
                let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[y.min(h - 1) * w + xx.min(w - 1)] += src[y * wo + xx];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, hi, wi] = x.shape();
        if h > hi || w > wi {
            return Err(Error::shape("crop", format!("{h}x{w} from {hi}x{wi}")));
        }
        if h == hi && w == wi {
            return Ok(self);
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for p in 0..n * c {
            for y in 0..h {
                let src = &x.data()[(p * hi + y) * wi..(p * hi + y) * wi + w];
                out.data_mut()[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(src);
            }
        }
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, hi, wi]);
            for p in 0..n * c {
                for y in 0..h {
                    dx.data_mut()[(p * hi + y) * wi..(p * hi + y) * wi + w]
                        .copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Forward: `x >= threshold → 1, else 0`. Backward: identity
    /// (straight-through estimator).
    pub fn straight_through_binarize(self, threshold: f64) -> Var<'t, T> {
        let t = T::from_f64_lossy(threshold);
        let out = self
            .value()
            .map(|v| if v >= t { T::one() } else { T::zero() });
        self.tape.op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Mean clamped binary cross-entropy against `target`. No gradient flows
    /// into the target.
    pub fn bce_mean(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (p, t) = (self.value(), target.value());
        same_shape("bce_mean", &p, &t)?;
        let out = Tensor::scalar(T::from_f64_lossy(bce_mean_kernel(p.data(), t.data())));
        Ok(self.tape.op(out, &[self, target], move |g, _| {
            let scale = g.item().as_f64() / p.len().max(1) as f64;
            let eps = 1e-7;
            let dp = zip_map(&p, &t, |pv, tv| {
                let pv = pv.as_f64();
                if pv <= eps || pv >= 1.0 - eps {
                    return T::zero();
                }
                let tv = tv.as_f64();
                T::from_f64_lossy(scale * (-tv / pv + (1.0 - tv) / (1.0 - pv)))
            });
            vec![Some(dp), None]
        }))
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenates along the channel axis.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let [n, _, h, w] = first.shape();
        let mut channels = Vec::with_capacity(values.len());
        for v in &values {
            let [vn, vc, vh, vw] = v.shape();
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", v.shape(), first.shape()),
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&channels) {
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new([n, total, h, w], out)?;
        Ok(self.op(out, parts, move |g, needs| {
            let mut offset = 0;
            channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let base = (b * total + start) * plane;
                            d.extend_from_slice(&g.data()[base..base + c * plane]);
                        }
                        Tensor::new([n, c, h, w], d).expect("slice shape")
                    })
                })
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    /// Central differences of `f` w.r.t. the single leaf, contracted with the
    /// all-ones seed used by `mean`-free checks.
    fn check(build: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>, x: Tensor<f64>) {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = build(&tape, leaf);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(leaf).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let tape = Tape::new();
                let leaf = tape.leaf(xp);
                build(&tape, leaf).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-5, "index {i}: analytic {a} numeric {numeric}");
        }
    }

    fn sample(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 1.618).sin() * 0.9 + 0.05)
    }

    fn weighted_sum<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Var<'t, f64> {
        let w = tape.constant(Tensor::from_fn(v.shape(), |i| ((i as f64) * 0.77).cos()));
        v.mul(w).unwrap().mean()
    }

    #[test]
    fn elementwise_gradients() {
        check(|t, x| weighted_sum(t, x.sigmoid()), sample([1, 2, 3, 3]));
        check(|t, x| weighted_sum(t, x.relu()), sample([1, 2, 3, 3]));
        check(|t, x| weighted_sum(t, x.abs()), sample([1, 2, 3, 3]));
        check(
            |t, x| weighted_sum(t, x.affine(-2.0, 0.5)),
            sample([1, 2, 3, 3]),
        );
        check(
            |t, x| weighted_sum(t, x.mul(x.sigmoid()).unwrap()),
            sample([2, 1, 2, 2]),
        );
    }

    #[test]
    fn structural_gradients() {
        check(|t, x| weighted_sum(t, x.upsample2x()), sample([1, 2, 2, 3]));
        check(
            |t, x| weighted_sum(t, x.avg_pool(2).unwrap()),
            sample([1, 2, 4, 4]),
        );
        check(
            |t, x| weighted_sum(t, x.softmax_channels()),
            sample([2, 3, 2, 2]),
        );
        check(
            |t, x| weighted_sum(t, x.pad_replicate(2, 1)),
            sample([1, 2, 3, 3]),
        );
        check(
            |t, x| weighted_sum(t, x.crop(2, 1).unwrap()),
            sample([1, 2, 3, 3]),
        );
        check(
            |t, x| weighted_sum(t, x.narrow_channels(1, 2).unwrap()),
            sample([2, 4, 2, 2]),
        );
        check(
            |t, x| {
                let cat = t.concat_channels(&[x, x.sigmoid(), x]).unwrap();
                weighted_sum(t, cat)
            },
            sample([2, 2, 2, 2]),
        );
        check(
            |t, x| {
                let s = x.narrow_channels(0, 1).unwrap();
                weighted_sum(t, x.mul_channels(s).unwrap())
            },
            sample([2, 3, 2, 2]),
        );
        check(
            |t, x| weighted_sum(t, x.channel_dot(x.sigmoid()).unwrap()),
            sample([2, 3, 2, 2]),
        );
        check(
            |t, x| {
                let m = x.narrow_channels(0, 1).unwrap().sigmoid();
                let d = x.affine(-1.5, 0.25);
                weighted_sum(t, x.masked_blend(d, m).unwrap())
            },
            sample([2, 3, 2, 2]),
        );
        check(
            |t, x| {
                let w = t.constant(sample([3, 2, 3, 3]));
                let b = t.constant(sample([1, 3, 1, 1]));
                weighted_sum(t, x.conv2d(w, Some(b), 2, 1).unwrap())
            },
            sample([2, 2, 5, 4]),
        );
    }

    #[test]
    fn conv_weight_and_bias_gradients() {
        let x = sample([2, 2, 4, 4]);
        check(
            move |t, w| {
                let xin = t.constant(x.clone());
                weighted_sum(t, xin.conv2d(w, None, 1, 1).unwrap())
            },
            sample([3, 2, 3, 3]),
        );
        let x = sample([2, 2, 4, 4]);
        check(
            move |t, b| {
                let xin = t.constant(x.clone());
                let w = t.constant(sample([3, 2, 1, 1]));
                weighted_sum(t, xin.conv2d(w, Some(b), 1, 0).unwrap())
            },
            sample([1, 3, 1, 1]),
        );
    }

    #[test]
    fn bce_gradient_and_value() {
        let target = Tensor::from_fn([1, 1, 3, 3], |i| (i % 2) as f64);
        let t2 = target.clone();
        check(
            move |t, x| x.sigmoid().bce_mean(t.constant(t2.clone())).unwrap(),
            sample([1, 1, 3, 3]),
        );
        let half = Tensor::full([1, 1, 3, 3], 0.5);
        let v = bce_mean_kernel(half.data(), target.data());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 3], vec![0.2, 0.5, 0.9]).unwrap());
        let b = x.straight_through_binarize(0.5);
        assert_eq!(b.value().data(), &[0.0, 1.0, 1.0]);
        let w = tape.constant(Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = b.mul(w).unwrap().mean();
        let g = tape.backward(loss).unwrap();
        let got = g.get(x).unwrap().data().to_vec();
        assert_eq!(got, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }
}
