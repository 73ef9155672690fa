//! Soft blending band around a binary mask by iterated Gaussian smoothing.
//!
//! Blurring a non-convex mask lets alpha rise again inside narrow pockets,
//! where several walls contribute. A final pass caps every pixel by its
//! neighbours closer to the mask, so alpha never increases with distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AlphaMask, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSpec {
    pub iterations: usize,
    pub kernel_radius: usize,
    pub kernel_sigma: f64,
}

impl Default for SmoothSpec {
    fn default() -> Self {
        Self {
            iterations: 4,
            kernel_radius: 2,
            kernel_sigma: 1.0,
        }
    }
}

impl SmoothSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.kernel_radius == 0 || !(self.kernel_sigma > 0.0) {
            return Err(Error::Config(
                "smooth spec needs iterations >= 1, kernel_radius >= 1 and kernel_sigma > 0".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 1-D kernel of length `2r+1`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.kernel_radius as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.kernel_sigma * self.kernel_sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Separable blur with zero padding outside the frame.
fn blur(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Squared distance to the nearest support pixel, searched within `reach`;
/// `None` beyond it.
fn support_dist2(support: &[bool], h: usize, w: usize, reach: usize) -> Vec<Option<usize>> {
    let r = reach as isize;
    (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as isize, (k % w) as isize);
            let mut best = None;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    if support[yy as usize * w + xx as usize] {
                        let d = ((yy - y).pow(2) + (xx - x).pow(2)) as usize;
                        best = Some(best.map_or(d, |b: usize| b.min(d)));
                    }
                }
            }
            best
        })
        .collect()
}

/// Caps each pixel at the smallest alpha among its 8-neighbours that lie
/// strictly closer to the mask, visiting pixels by increasing distance.
fn make_monotone(alpha: &mut [f64], support: &[bool], h: usize, w: usize, reach: usize) {
    let dist = support_dist2(support, h, w, reach);
    let mut order: Vec<usize> = (0..h * w)
        .filter(|&k| alpha[k] > 0.0 && dist[k].is_some_and(|d| d > 0))
        .collect();
    order.sort_by_key(|&k| dist[k]);
    for k in order {
        let (y, x) = ((k / w) as isize, (k % w) as isize);
        let dk = dist[k].expect("ordered pixels have a distance");
        let mut cap = alpha[k];
        for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            let (yy, xx) = (y + dy, x + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue;
            }
            let q = yy as usize * w + xx as usize;
            if dist[q].is_some_and(|d| d < dk) {
                cap = cap.min(alpha[q]);
            }
        }
        alpha[k] = cap;
    }
}

/// Blurs the mask `iterations` times, forcing alpha back to one on the
/// original support after every pass, then removes any rise in alpha with
/// distance from the mask.
pub fn extend_mask_alpha(mask: &Mask, spec: &SmoothSpec) -> Result<AlphaMask> {
    spec.validate()?;
    let (h, w) = mask.dims();
    let kernel = spec.kernel();
    let support: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
    let mut alpha: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    for _ in 0..spec.iterations {
        alpha = blur(&alpha, h, w, &kernel);
        for (a, &inside) in alpha.iter_mut().zip(&support) {
            if inside {
                *a = 1.0;
            }
        }
    }
    make_monotone(&mut alpha, &support, h, w, spec.iterations * spec.kernel_radius);
    AlphaMask::new(
        h,
        w,
        alpha
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect(),
    )
}
