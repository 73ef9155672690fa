//! Synthetic corruption data: stroke masks with soft borders, natural-looking
//! noise composited into clean clips, and the on-disk corpus layout.

mod dataset;
mod scene;
mod smooth;
mod stroke;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AlphaMask, Frame, Mask};

pub use dataset::{
    frame_file_name, generate_corpus, load_clip, read_manifest, write_clip, write_manifest,
    CorpusConfig, ManifestRecord, MANIFEST_FILE,
};
pub use scene::{center_crop_resize, procedural_clip, procedural_noise, SceneSpec};
pub use smooth::{extend_mask_alpha, SmoothSpec};
pub use stroke::{
    coverage_ok, generate_stroke_geometry, generate_stroke_mask, Stroke, StrokeGeometry,
    StrokeSpec, COVERAGE_BOUNDS,
};

/// Largest per-frame translation of the stroke geometry, pixels.
pub const MAX_STEP_TRANSLATION: f64 = 3.0;
/// Largest per-frame rotation of the stroke geometry, radians (2°).
pub const MAX_STEP_ROTATION: f64 = 2.0 * std::f64::consts::PI / 180.0;

const MOTION_RETRIES: usize = 8;

/// SplitMix64 finalizer, used to split one seed into independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl SourceClip {
    pub fn new(clip_id: impl Into<String>, frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Invalid(format!(
                "source clip needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        check_uniform_dims(&frames)?;
        if !(fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            frames,
            fps,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// Checks that every frame has the first frame's size.
pub fn check_uniform_dims(frames: &[Frame]) -> Result<()> {
    let Some(first) = frames.first() else {
        return Ok(());
    };
    for (i, f) in frames.iter().enumerate() {
        if f.dims() != first.dims() {
            return Err(Error::Invalid(format!(
                "frame {i} is {:?}, expected {:?}",
                f.dims(),
                first.dims()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseBank {
    pub patches: Vec<Frame>,
    pub source_ids: Vec<String>,
}

impl NoiseBank {
    pub fn new(patches: Vec<Frame>, source_ids: Vec<String>) -> Result<Self> {
        if patches.len() != source_ids.len() {
            return Err(Error::Invalid(format!(
                "{} noise patches but {} source ids",
                patches.len(),
                source_ids.len()
            )));
        }
        check_uniform_dims(&patches)?;
        Ok(Self {
            patches,
            source_ids,
        })
    }

    /// Procedural texture patches from their own seed stream.
    pub fn procedural(count: usize, height: usize, width: usize, seed: u64) -> Self {
        let (patches, source_ids) = (0..count)
            .map(|i| {
                let id = format!("noise-{seed:x}-{i:04}");
                (
                    procedural_noise(height, width, derive_seed(seed, 0x6E6F_6973 + i as u64)),
                    id,
                )
            })
            .unzip();
        Self {
            patches,
            source_ids,
        }
    }

    /// Loads every PNG in `dir` (sorted by name) and fits it to the frame size.
    pub fn load_dir(dir: &std::path::Path, height: usize, width: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let mut bank = Self::default();
        for p in paths {
            let frame = Frame::load_png(&p)?;
            bank.patches
                .push(center_crop_resize(&frame, height, width).quantized());
            bank.source_ids.push(
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Per-frame random walk of the stroke geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    /// Constant translation added every frame, pixels.
    pub drift: (f64, f64),
    /// Radius of the uniformly sampled extra translation, pixels.
    pub jitter: f64,
    /// Rotation per frame is uniform in `[-max_rotation, max_rotation]`, radians.
    pub max_rotation: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            drift: (0.0, 0.0),
            jitter: 2.0,
            max_rotation: MAX_STEP_ROTATION,
        }
    }
}

impl MotionSpec {
    pub fn still() -> Self {
        Self {
            drift: (0.0, 0.0),
            jitter: 0.0,
            max_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let drift = self.drift.0.hypot(self.drift.1);
        if !(self.jitter >= 0.0)
            || !drift.is_finite()
            || drift + self.jitter > MAX_STEP_TRANSLATION + 1e-12
        {
            return Err(Error::Config(format!(
                "motion translation per frame must stay within {MAX_STEP_TRANSLATION} px"
            )));
        }
        if !(self.max_rotation >= 0.0) || self.max_rotation > MAX_STEP_ROTATION + 1e-12 {
            return Err(Error::Config(format!(
                "motion rotation per frame must stay within {MAX_STEP_ROTATION} rad"
            )));
        }
        Ok(())
    }

    fn sample_step(&self, rng: &mut impl Rng) -> ((f64, f64), f64) {
        let r = self.jitter * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let angle = rng.random_range(-self.max_rotation..=self.max_rotation);
        (
            (self.drift.0 + r * phi.cos(), self.drift.1 + r * phi.sin()),
            angle,
        )
    }
}

/// Seeds and sources behind one corrupted clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipProvenance {
    pub clip_id: String,
    pub noise_id: String,
    pub seed: u64,
    pub stroke_seed: u64,
    pub motion_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedClip {
    pub frames: Vec<Frame>,
    pub gt_frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub alphas: Vec<AlphaMask>,
    pub provenance: ClipProvenance,
}

impl CorruptedClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clip_id(&self) -> &str {
        &self.provenance.clip_id
    }
}

/// `x = (1-α)·y + α·u`, clamped to `[0,1]`.
pub fn composite_frame(y: &Frame, u: &Frame, alpha: &AlphaMask) -> Result<Frame> {
    if y.dims() != u.dims() || y.dims() != alpha.dims() {
        return Err(Error::shape(
            "composite_frame",
            format!(
                "frame {:?}, noise {:?}, alpha {:?}",
                y.dims(),
                u.dims(),
                alpha.dims()
            ),
        ));
    }
    let (h, w) = y.dims();
    let plane = h * w;
    let a = alpha.data();
    let data = y
        .data()
        .iter()
        .zip(u.data())
        .enumerate()
        .map(|(i, (&yv, &uv))| {
            let al = a[i % plane];
            if al == 0.0 {
                yv
            } else if al == 1.0 {
                uv
            } else {
                ((1.0 - al) * yv + al * uv).clamp(0.0, 1.0)
            }
        })
        .collect();
    Frame::new(h, w, data)
}

/// Corrupts every frame of `src` with one noise patch under a moving stroke
/// mask. All values are on the 8-bit grid, so storing the result is lossless.
pub fn synthesize_clip(
    src: &SourceClip,
    bank: &NoiseBank,
    stroke: &StrokeSpec,
    smooth: &SmoothSpec,
    motion: &MotionSpec,
    seed: u64,
) -> Result<CorruptedClip> {
    motion.validate()?;
    smooth.validate()?;
    let (h, w) = src.dims();
    let candidates: Vec<usize> = (0..bank.len())
        .filter(|&i| bank.source_ids[i] != src.clip_id)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "noise bank has no patch disjoint from clip `{}`",
            src.clip_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = candidates[rng.random_range(0..candidates.len())];
    let u = &bank.patches[pick];
    if u.dims() != (h, w) {
        return Err(Error::shape(
            "synthesize_clip",
            format!("noise patch {:?} vs frames {:?}", u.dims(), (h, w)),
        ));
    }
    let u = u.quantized();

    let stroke_seed = derive_seed(seed, stroke.seed.wrapping_add(1));
    let motion_seed = derive_seed(seed, 0x6D6F_7469_6F6E);
    let (mut geometry, first) =
        generate_stroke_geometry(h, w, stroke, &mut ChaCha8Rng::seed_from_u64(stroke_seed))?;
    let mut motion_rng = ChaCha8Rng::seed_from_u64(motion_seed);
    let mut masks = vec![first];
    for _ in 1..src.frames.len() {
        let mut next = None;
        for _ in 0..MOTION_RETRIES {
            let (t, angle) = motion.sample_step(&mut motion_rng);
            let g = geometry.transformed(t, angle, geometry.centroid());
            let m = g.rasterize(h, w);
            if coverage_ok(&m) {
                next = Some((g, m));
                break;
            }
        }
        let m = match next {
            Some((g, m)) => {
                geometry = g;
                m
            }
            None => masks.last().cloned().expect("nonempty"),
        };
        masks.push(m);
    }

    let mut frames = Vec::with_capacity(masks.len());
    let mut gt_frames = Vec::with_capacity(masks.len());
    let mut alphas = Vec::with_capacity(masks.len());
    for (y, m) in src.frames.iter().zip(&masks) {
        let y = y.quantized();
        let alpha = extend_mask_alpha(m, smooth)?.quantized();
        frames.push(composite_frame(&y, &u, &alpha)?.quantized());
        gt_frames.push(y);
        alphas.push(alpha);
    }
    Ok(CorruptedClip {
        frames,
        gt_frames,
        masks,
        alphas,
        provenance: ClipProvenance {
            clip_id: src.clip_id.clone(),
            noise_id: bank.source_ids[pick].clone(),
            seed,
            stroke_seed,
            motion_seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(len: usize) -> SourceClip {
        procedural_clip("clip-a", len, 48, 48, &SceneSpec::default(), 3).unwrap()
    }

    fn bank() -> NoiseBank {
        NoiseBank::procedural(3, 48, 48, 7)
    }

    #[test]
    fn composite_arithmetic() {
        let y = Frame::filled(2, 2, 0.2);
        let u = Frame::filled(2, 2, 0.6);
        let half = AlphaMask::new(2, 2, vec![0.5; 4]).unwrap();
        let x = composite_frame(&y, &u, &half).unwrap();
        assert!(x.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let zero = AlphaMask::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(composite_frame(&y, &u, &zero).unwrap(), y);
        let one = AlphaMask::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(composite_frame(&y, &u, &one).unwrap(), u);
    }

    #[test]
    fn composite_rejects_mismatched_dims() {
        let y = Frame::filled(2, 2, 0.2);
        let u = Frame::filled(2, 3, 0.6);
        let a = AlphaMask::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(composite_frame(&y, &u, &a).is_err());
    }

    #[test]
    fn still_motion_keeps_masks_fixed() {
        let spec = StrokeSpec::for_resolution(48, 48);
        let clip = synthesize_clip(
            &source(4),
            &bank(),
            &spec,
            &SmoothSpec::default(),
            &MotionSpec::still(),
            1,
        )
        .unwrap();
        assert!(clip.masks.iter().all(|m| *m == clip.masks[0]));
    }

    #[test]
    fn constant_translation_moves_the_polyline() {
        let spec = StrokeSpec::for_resolution(48, 48);
        let motion = MotionSpec {
            drift: (1.0, 0.0),
            jitter: 0.0,
            max_rotation: 0.0,
        };
        let seed = 21;
        let clip = synthesize_clip(
            &source(3),
            &bank(),
            &spec,
            &SmoothSpec::default(),
            &motion,
            seed,
        )
        .unwrap();
        let (g0, m0) = generate_stroke_geometry(
            48,
            48,
            &spec,
            &mut ChaCha8Rng::seed_from_u64(clip.provenance.stroke_seed),
        )
        .unwrap();
        assert_eq!(clip.masks[0], m0);
        let shifted = g0
            .transformed((2.0, 0.0), 0.0, (0.0, 0.0))
            .rasterize(48, 48);
        if coverage_ok(&shifted) {
            assert_eq!(clip.masks[2], shifted);
        }
    }

    #[test]
    fn composite_identities_hold_on_the_stored_grid() {
        let spec = StrokeSpec::for_resolution(48, 48);
        let clip = synthesize_clip(
            &source(3),
            &bank(),
            &spec,
            &SmoothSpec::default(),
            &MotionSpec::default(),
            9,
        )
        .unwrap();
        let pick = bank()
            .source_ids
            .iter()
            .position(|id| *id == clip.provenance.noise_id)
            .unwrap();
        let u = bank().patches[pick].quantized();
        for t in 0..clip.len() {
            let (x, y, a) = (&clip.frames[t], &clip.gt_frames[t], &clip.alphas[t]);
            for (i, &av) in a.data().iter().enumerate() {
                for c in 0..3 {
                    let j = c * 48 * 48 + i;
                    if av == 0.0 {
                        assert_eq!(x.data()[j], y.data()[j]);
                    } else if av == 1.0 {
                        assert_eq!(x.data()[j], u.data()[j]);
                    }
                }
            }
            for (mv, av) in clip.masks[t].data().iter().zip(a.data()) {
                if *mv == 1.0 {
                    assert_eq!(*av, 1.0);
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = StrokeSpec::for_resolution(48, 48);
        let run = || {
            synthesize_clip(
                &source(3),
                &bank(),
                &spec,
                &SmoothSpec::default(),
                &MotionSpec::default(),
                4,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_from_the_same_clip_is_refused() {
        let mut b = bank();
        b.source_ids = vec!["clip-a".into(); 3];
        let spec = StrokeSpec::for_resolution(48, 48);
        assert!(synthesize_clip(
            &source(2),
            &b,
            &spec,
            &SmoothSpec::default(),
            &MotionSpec::still(),
            0
        )
        .is_err());
    }

    #[test]
    fn excessive_motion_is_a_configuration_error() {
        let m = MotionSpec {
            drift: (3.0, 0.0),
            jitter: 1.0,
            max_rotation: 0.0,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn short_source_clip_is_rejected() {
        assert!(SourceClip::new("x", vec![Frame::filled(4, 4, 0.0)], 24.0).is_err());
    }
}
