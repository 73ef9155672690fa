//! Procedural clean clips and texture patches.
//!
//! Scenes are continuous functions of the plane sampled with a sub-pixel
//! camera pan, so consecutive frames share content at non-integer shifts.
//! Noise patches use a different family of functions and a separate seed
//! stream, which keeps them disjoint from every clip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Frame;

use super::SourceClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Largest camera pan speed, pixels per frame.
    pub max_pan: f64,
    /// Inclusive range of soft blobs per scene.
    pub blobs: (usize, usize),
    pub fps: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            max_pan: 1.5,
            blobs: (3, 6),
            fps: 24.0,
        }
    }
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    color: [f64; 3],
    velocity: (f64, f64),
}

struct Scene {
    base: [[f64; 3]; 2],
    gradient_dir: (f64, f64),
    waves: Vec<((f64, f64), f64, [f64; 3])>,
    blobs: Vec<Blob>,
    pan: (f64, f64),
    scale: f64,
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Scene {
    fn random(h: usize, w: usize, spec: &SceneSpec, rng: &mut impl Rng) -> Self {
        let scale = h.min(w) as f64;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let waves = (0..2)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let f = rng.random_range(0.5..2.0) * std::f64::consts::TAU / scale;
                let amp = [0.0; 3].map(|_: f64| rng.random_range(-0.08..0.08));
                (
                    (f * a.cos(), f * a.sin()),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amp,
                )
            })
            .collect();
        let count = rng.random_range(spec.blobs.0..=spec.blobs.1.max(spec.blobs.0));
        let blobs = (0..count)
            .map(|_| Blob {
                center: (
                    rng.random_range(-0.2..1.2) * w as f64,
                    rng.random_range(-0.2..1.2) * h as f64,
                ),
                radii: (
                    rng.random_range(0.08..0.3) * scale,
                    rng.random_range(0.08..0.3) * scale,
                ),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: color(rng),
                velocity: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            })
            .collect();
        let pan_r = spec.max_pan * rng.random::<f64>().sqrt();
        let pan_a = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            base: [color(rng), color(rng)],
            gradient_dir: (theta.cos(), theta.sin()),
            waves,
            blobs,
            pan: (pan_r * pan_a.cos(), pan_r * pan_a.sin()),
            scale,
        }
    }

    fn sample(&self, t: f64, x: f64, y: f64) -> [f64; 3] {
        let (px, py) = (x + self.pan.0 * t, y + self.pan.1 * t);
        let g =
            0.5 + 0.5 * ((px * self.gradient_dir.0 + py * self.gradient_dir.1) / self.scale).tanh();
        let mut rgb = [0.0; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            *v = (1.0 - g) * self.base[0][c] + g * self.base[1][c];
        }
        for &((fx, fy), phase, amp) in &self.waves {
            let s = (fx * px + fy * py + phase).sin();
            for c in 0..3 {
                rgb[c] += amp[c] * s;
            }
        }
        for b in &self.blobs {
            let (cx, cy) = (b.center.0 + b.velocity.0 * t, b.center.1 + b.velocity.1 * t);
            let (dx, dy) = (px - cx, py - cy);
            let (s, c) = b.angle.sin_cos();
            let (u, v) = (
                (c * dx + s * dy) / b.radii.0,
                (-s * dx + c * dy) / b.radii.1,
            );
            let r = (u * u + v * v).sqrt();
            let a = 1.0 - smoothstep(0.85, 1.0, r);
            for ch in 0..3 {
                rgb[ch] = (1.0 - a) * rgb[ch] + a * b.color[ch];
            }
        }
        rgb.map(|v| v.clamp(0.0, 1.0))
    }
}

/// A clean clip of `len` frames on the 8-bit grid.
pub fn procedural_clip(
    clip_id: impl Into<String>,
    len: usize,
    height: usize,
    width: usize,
    spec: &SceneSpec,
    seed: u64,
) -> Result<SourceClip> {
    if spec.blobs.0 > spec.blobs.1 || !(spec.max_pan >= 0.0) {
        return Err(Error::Config(
            "scene spec: invalid blob range or pan".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(height, width, spec, &mut rng);
    let frames = (0..len)
        .map(|t| {
            let plane: Vec<[f64; 3]> = (0..height * width)
                .map(|i| scene.sample(t as f64, (i % width) as f64, (i / width) as f64))
                .collect();
            Frame::from_fn(height, width, |c, y, x| plane[y * width + x][c] as f32).quantized()
        })
        .collect();
    SourceClip::new(clip_id, frames, spec.fps)
}

/// A busy texture patch: a sum of oriented plane waves with per-wave colours
/// and sharp stripe edges.
pub fn procedural_noise(height: usize, width: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<((f64, f64), f64, [f64; 3], bool)> = (0..8)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(0.15..0.9);
            (
                (f * a.cos(), f * a.sin()),
                rng.random_range(0.0..std::f64::consts::TAU),
                [0.0; 3].map(|_: f64| rng.random_range(-0.35..0.35)),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let offset = color(&mut rng);
    Frame::from_fn(height, width, |c, y, x| {
        let mut v = offset[c];
        for &((fx, fy), phase, amp, square) in &waves {
            let s = (fx * x as f64 + fy * y as f64 + phase).sin();
            v += amp[c] * if square { s.signum() } else { s } / 2.0;
        }
        v.clamp(0.0, 1.0) as f32
    })
    .quantized()
}

/// Centre crop to the target aspect ratio, then bilinear resize.
pub fn center_crop_resize(frame: &Frame, height: usize, width: usize) -> Frame {
    let (h, w) = frame.dims();
    let target = width as f64 / height as f64;
    let (ch, cw) = if w as f64 / h as f64 > target {
        (h as f64, h as f64 * target)
    } else {
        (w as f64 / target, w as f64)
    };
    let (oy, ox) = ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0);
    let (sy, sx) = (ch / height as f64, cw / width as f64);
    Frame::from_fn(height, width, |c, y, x| {
        let fy = (oy + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = (ox + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        let top = frame.at(c, y0, x0) * (1.0 - tx) + frame.at(c, y0, x1) * tx;
        let bottom = frame.at(c, y1, x0) * (1.0 - tx) + frame.at(c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}
