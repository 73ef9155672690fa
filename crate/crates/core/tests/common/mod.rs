//! Fixtures and oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vinpaint::autograd::Tape;
use vinpaint::image::{AlphaMask, Frame, Mask};
use vinpaint::losses::{batch_losses, Binarization, BatchVars, LossWeights};
use vinpaint::model::{Model, ModelConfig};
use vinpaint::synth::{procedural_clip, procedural_noise, CorruptedClip, SceneSpec};
use vinpaint::tensor::Tensor;

/// Model with every parameter perturbed, so offsets are fractional and no
/// activation sits on a kink by construction.
pub fn perturbed_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.iter_mut() {
        let std = if name.contains(".off2.") { 0.3 } else { 0.05 };
        let noise = Normal::new(0.0, std).unwrap();
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    model
}

/// Perturbed model whose aggregation fuse layer accepts `refs` references
/// (the built model takes `2n`).
pub fn model_for_refs(channels: usize, refs: usize, seed: u64) -> Model<f64> {
    let mut model = perturbed_model(ModelConfig { channels, ..ModelConfig::default() }, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let w = Tensor::from_fn([channels, (refs + 1) * channels + 1, 1, 1], |_| rng.random_range(-0.1..0.1));
    *model.params.get_mut("phi.agg.a.w").unwrap() = w;
    model
}

pub struct GradBatch {
    pub refs: Vec<Tensor<f64>>,
    pub x_t: Tensor<f64>,
    pub y_t: Tensor<f64>,
    pub m_t: Tensor<f64>,
    pub x_next: Tensor<f64>,
    pub m_next: Tensor<f64>,
}

pub fn random_batch(n: usize, h: usize, w: usize, refs: usize, seed: u64) -> GradBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = |c| Tensor::from_fn([n, c, h, w], |_| rng.random_range(0.05..0.95));
    let refs = (0..refs).map(|_| img(3)).collect();
    let (x_t, y_t, x_next) = (img(3), img(3), img(3));
    let mut mask = || Tensor::from_fn([n, 1, h, w], |_| f64::from(rng.random_bool(0.3) as u8));
    let (m_t, m_next) = (mask(), mask());
    GradBatch {
        refs,
        x_t,
        y_t,
        m_t,
        x_next,
        m_next,
    }
}

/// Total training objective, with the soft cycle so it is smooth everywhere.
pub fn objective(model: &Model<f64>, b: &GradBatch, tape: &Tape<f64>) -> f64 {
    objective_var(model, b, tape).item()
}

pub fn objective_var<'t>(
    model: &Model<f64>,
    b: &GradBatch,
    tape: &'t Tape<f64>,
) -> vinpaint::autograd::Var<'t, f64> {
    let vars = BatchVars {
        refs: b.refs.iter().map(|r| tape.constant(r.clone())).collect(),
        x_t: tape.constant(b.x_t.clone()),
        y_t: tape.constant(b.y_t.clone()),
        m_t: tape.constant(b.m_t.clone()),
        x_next: tape.constant(b.x_next.clone()),
        m_next: tape.constant(b.m_next.clone()),
    };
    batch_losses(
        tape,
        model,
        model,
        &vars,
        &LossWeights::default(),
        Binarization::Soft,
        model.config.threshold,
    )
    .unwrap()
    .total
}

pub struct GradSample {
    /// Parameter name, with `[i]` for an entry or `[dir]` for a random
    /// direction over the whole tensor.
    pub probe: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Five-point central difference of `f` at 0.
pub fn five_point(f: &impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Derivative of a piecewise-smooth `f` at 0. The step shrinks until two
/// successive five-point estimates agree, which only happens once no ReLU
/// or sampler breakpoint lies within reach of the stencil. Agreement allows
/// for the rounding noise of the current step.
pub fn converged_derivative(f: impl Fn(f64) -> f64) -> f64 {
    let noise = 1e-15 * f(0.0).abs().max(1e-3);
    let mut h = 1e-3;
    let mut prev = five_point(&f, h);
    while h > 1e-8 {
        h /= 4.0;
        let cur = five_point(&f, h);
        if (cur - prev).abs() <= 1e-5 * cur.abs().max(prev.abs()) + 8.0 * noise / h {
            return cur;
        }
        prev = cur;
    }
    prev
}

/// Compares backward-pass gradients with finite differences for every
/// parameter tensor: one random direction over the whole tensor plus
/// `per_param` random entries.
pub fn gradient_check(cfg: ModelConfig, per_param: usize, seed: u64) -> Vec<GradSample> {
    let model = perturbed_model(cfg, seed);
    let batch = random_batch(1, 8, 8, model.config.num_refs(), seed + 1);
    let tape = Tape::new();
    let total = objective_var(&model, &batch, &tape);
    let grads = tape.backward(total).unwrap().param_map(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let along = |name: &str, dir: &[f64]| {
        converged_derivative(|d| {
            let mut m = model.clone();
            for (v, u) in m.params.get_mut(name).unwrap().data_mut().iter_mut().zip(dir) {
                *v += d * u;
            }
            objective(&m, &batch, &Tape::inference())
        })
    };
    let mut out = Vec::new();
    for (name, g) in &grads {
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        out.push(GradSample {
            probe: format!("{name}[dir]"),
            analytic: g.data().iter().zip(&dir).map(|(a, b)| a * b).sum(),
            numeric: along(name, &dir),
        });
        for _ in 0..per_param {
            let index = rng.random_range(0..g.len());
            let mut unit = vec![0.0; g.len()];
            unit[index] = 1.0;
            out.push(GradSample {
                probe: format!("{name}[{index}]"),
                analytic: g.data()[index],
                numeric: along(name, &unit),
            });
        }
    }
    out
}

/// Clip whose corruption has no soft band: `x = y` off the mask and noise on it.
pub struct BandFreeClip {
    pub frames: Vec<Frame>,
    pub gt: Vec<Frame>,
    pub masks: Vec<Mask>,
}

pub fn band_free_clip(len: usize, h: usize, w: usize, seed: u64) -> BandFreeClip {
    let src = procedural_clip("fixture", len, h, w, &SceneSpec::default(), seed).unwrap();
    let noise = procedural_noise(h, w, seed ^ 0x55);
    let masks: Vec<Mask> = (0..len)
        .map(|t| {
            Mask::from_fn(h, w, |y, x| {
                (h / 4..h / 2).contains(&y) && (w / 5 + t..w / 5 + t + w / 3).contains(&x)
            })
        })
        .collect();
    let frames = src
        .frames
        .iter()
        .zip(&masks)
        .map(|(y, m)| {
            Frame::from_fn(h, w, |c, yy, xx| {
                if m.get(yy, xx) {
                    noise.at(c, yy, xx)
                } else {
                    y.at(c, yy, xx)
                }
            })
        })
        .collect();
    BandFreeClip {
        frames,
        gt: src.frames,
        masks,
    }
}

/// Largest violation of the composite identities: `x == y` where alpha is 0
/// and `x == u` where alpha is 1.
pub fn composite_error(clip: &CorruptedClip, noise: &Frame) -> f32 {
    let mut worst = 0.0f32;
    for ((x, y), a) in clip.frames.iter().zip(&clip.gt_frames).zip(&clip.alphas) {
        let (h, w) = x.dims();
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let target = match a.get(yy, xx) {
                        v if v == 0.0 => y.at(c, yy, xx),
                        v if v == 1.0 => noise.at(c, yy, xx),
                        _ => continue,
                    };
                    worst = worst.max((x.at(c, yy, xx) - target).abs());
                }
            }
        }
    }
    worst
}

/// Counts rays leaving the mask along which alpha rises while moving
/// directly away from the mask (the ray origin is the nearest mask pixel).
/// Also counts pixels of the mask whose alpha is not exactly 1.
pub fn alpha_violations(mask: &Mask, alpha: &AlphaMask) -> usize {
    alpha_violation_sites(mask, alpha).len()
}

/// Violations as `(origin, step, offending point)`; mask pixels whose alpha
/// is not 1 appear with step 0.
pub fn alpha_violation_sites(mask: &Mask, alpha: &AlphaMask) -> Vec<((i64, i64), (i64, i64), (i64, i64))> {
    const DIRS: [(i64, i64); 8] = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let (h, w) = mask.dims();
    let on: Vec<(i64, i64)> = (0..h * w)
        .filter(|&k| mask.data()[k] > 0.5)
        .map(|k| ((k / w) as i64, (k % w) as i64))
        .collect();
    let dist2: Vec<Option<i64>> = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as i64, (k % w) as i64);
            on.iter().map(|&(my, mx)| (my - y).pow(2) + (mx - x).pow(2)).min()
        })
        .collect();
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64;
    let mut bad: Vec<_> = on
        .iter()
        .filter(|&&(y, x)| alpha.get(y as usize, x as usize) != 1.0)
        .map(|&p| (p, (0, 0), p))
        .collect();
    for &(y0, x0) in &on {
        for (dy, dx) in DIRS {
            let mut prev = 1.0f32;
            for s in 1.. {
                let (y, x) = (y0 + s * dy, x0 + s * dx);
                if !inside(y, x) || mask.get(y as usize, x as usize) {
                    break;
                }
                if dist2[y as usize * w + x as usize] != Some((s * dy).pow(2) + (s * dx).pow(2)) {
                    break;
                }
                let v = alpha.get(y as usize, x as usize);
                if v > prev {
                    bad.push(((y0, x0), (dy, dx), (y, x)));
                    break;
                }
                if v == 0.0 {
                    break;
                }
                prev = v;
            }
        }
    }
    bad
}

/// The noise patch a clip was corrupted with.
pub fn noise_for(bank: &vinpaint::synth::NoiseBank, clip: &CorruptedClip) -> Frame {
    let pick = bank
        .source_ids
        .iter()
        .position(|id| *id == clip.provenance.noise_id)
        .expect("noise id from this bank");
    bank.patches[pick].clone()
}
