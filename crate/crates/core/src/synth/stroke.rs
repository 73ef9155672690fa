//! Free-form stroke masks: random-walk polylines stamped with a round brush.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

/// Minimum and maximum fraction of the frame a stroke mask may cover.
pub const COVERAGE_BOUNDS: (f64, f64) = (0.005, 0.40);

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeSpec {
    /// Inclusive range of strokes per mask.
    pub num_strokes: (usize, usize),
    /// Inclusive range of polyline vertices per stroke.
    pub vertices_per_stroke: (usize, usize),
    /// Brush diameter range in pixels.
    pub brush_width: (f64, f64),
    /// Segment length range in pixels.
    pub segment_length: (f64, f64),
    /// Largest heading change between consecutive segments, radians.
    pub max_turn_angle: f64,
    pub seed: u64,
}

impl StrokeSpec {
    /// Defaults tuned at 256×256 and scaled linearly with the shorter side.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64 / 256.0;
        Self {
            num_strokes: (1, 5),
            vertices_per_stroke: (4, 12),
            brush_width: (10.0 * s, 40.0 * s),
            segment_length: (12.0 * s, 40.0 * s),
            max_turn_angle: 60f64.to_radians(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("stroke spec: {what}")));
        if self.num_strokes.0 == 0 || self.num_strokes.0 > self.num_strokes.1 {
            return bad("num_strokes must be a nonempty range starting at 1 or more");
        }
        if self.vertices_per_stroke.0 == 0
            || self.vertices_per_stroke.0 > self.vertices_per_stroke.1
        {
            return bad("vertices_per_stroke must be a nonempty range starting at 1 or more");
        }
        if !(self.brush_width.0 > 0.0) || self.brush_width.0 > self.brush_width.1 {
            return bad("brush_width must be a nonempty range of positive widths");
        }
        if !(self.segment_length.0 >= 0.0) || self.segment_length.0 > self.segment_length.1 {
            return bad("segment_length must be a nonempty non-negative range");
        }
        if !(self.max_turn_angle >= 0.0) {
            return bad("max_turn_angle must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    /// Vertices as `(x, y)` pixel-centre coordinates.
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeGeometry {
    pub strokes: Vec<Stroke>,
}

fn dist2_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

impl StrokeGeometry {
    /// Marks every pixel whose centre lies within half a brush width of a
    /// polyline segment.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut data = vec![0.0f32; height * width];
        for stroke in &self.strokes {
            let r = stroke.width / 2.0;
            let segments: Vec<((f64, f64), (f64, f64))> = if stroke.points.len() == 1 {
                vec![(stroke.points[0], stroke.points[0])]
            } else {
                stroke.points.windows(2).map(|p| (p[0], p[1])).collect()
            };
            for (a, b) in segments {
                let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
                let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
                let x1 = (a.0.max(b.0) + r).ceil();
                let y1 = (a.1.max(b.1) + r).ceil();
                if x1 < 0.0 || y1 < 0.0 {
                    continue;
                }
                let x1 = (x1 as usize).min(width.saturating_sub(1));
                let y1 = (y1 as usize).min(height.saturating_sub(1));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if dist2_to_segment(x as f64, y as f64, a, b) <= r * r {
                            data[y * width + x] = 1.0;
                        }
                    }
                }
            }
        }
        Mask::new(height, width, data).expect("binary by construction")
    }

    pub fn centroid(&self) -> (f64, f64) {
        let pts: Vec<_> = self.strokes.iter().flat_map(|s| s.points.iter()).collect();
        let n = pts.len().max(1) as f64;
        (
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        )
    }

    /// Rotates by `angle` radians about `center`, then translates.
    pub fn transformed(&self, translation: (f64, f64), angle: f64, center: (f64, f64)) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            strokes: self
                .strokes
                .iter()
                .map(|st| Stroke {
                    width: st.width,
                    points: st
                        .points
                        .iter()
                        .map(|&(x, y)| {
                            let (dx, dy) = (x - center.0, y - center.1);
                            (
                                center.0 + c * dx - s * dy + translation.0,
                                center.1 + s * dx + c * dy + translation.1,
                            )
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn sample_range_f(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn random_walk(
    height: usize,
    width: usize,
    spec: &StrokeSpec,
    rng: &mut impl Rng,
) -> StrokeGeometry {
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let count = rng.random_range(spec.num_strokes.0..=spec.num_strokes.1);
    let strokes = (0..count)
        .map(|_| {
            let vertices =
                rng.random_range(spec.vertices_per_stroke.0..=spec.vertices_per_stroke.1);
            let brush = sample_range_f(rng, spec.brush_width);
            let mut p = (rng.random_range(0.0..=wmax), rng.random_range(0.0..=hmax));
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            let mut points = vec![p];
            for _ in 1..vertices {
                if spec.max_turn_angle > 0.0 {
                    heading += rng.random_range(-spec.max_turn_angle..=spec.max_turn_angle);
                }
                let len = sample_range_f(rng, spec.segment_length);
                p = (
                    (p.0 + len * heading.cos()).clamp(0.0, wmax),
                    (p.1 + len * heading.sin()).clamp(0.0, hmax),
                );
                points.push(p);
            }
            Stroke {
                points,
                width: brush,
            }
        })
        .collect();
    StrokeGeometry { strokes }
}

pub fn coverage_ok(mask: &Mask) -> bool {
    let c = mask.coverage();
    c >= COVERAGE_BOUNDS.0 && c <= COVERAGE_BOUNDS.1
}

/// Draws stroke masks until one satisfies [`COVERAGE_BOUNDS`].
pub fn generate_stroke_geometry(
    height: usize,
    width: usize,
    spec: &StrokeSpec,
    rng: &mut impl Rng,
) -> Result<(StrokeGeometry, Mask)> {
    spec.validate()?;
    if height < 32 || width < 32 {
        return Err(Error::Invalid(format!(
            "stroke masks need frames of at least 32x32, got {height}x{width}"
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let geometry = random_walk(height, width, spec, rng);
        let mask = geometry.rasterize(height, width);
        if coverage_ok(&mask) {
            return Ok((geometry, mask));
        }
    }
    Err(Error::Config(format!(
        "stroke spec could not reach coverage {:?} in {MAX_ATTEMPTS} attempts",
        COVERAGE_BOUNDS
    )))
}

pub fn generate_stroke_mask(
    height: usize,
    width: usize,
    spec: &StrokeSpec,
    rng: &mut impl Rng,
) -> Result<Mask> {
    generate_stroke_geometry(height, width, spec, rng).map(|(_, m)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_line_spec() -> StrokeSpec {
        StrokeSpec {
            num_strokes: (1, 1),
            vertices_per_stroke: (2, 2),
            brush_width: (9.0, 9.0),
            segment_length: (20.0, 30.0),
            max_turn_angle: 1.0,
            seed: 0,
        }
    }

    /// Stamps discs at fine steps along each segment.
    fn stamp_oracle(g: &StrokeGeometry, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for s in &g.strokes {
            let r = s.width / 2.0;
            for seg in s.points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let steps = (len / 1e-3).ceil() as usize + 1;
                for i in 0..=steps {
                    let t = i as f64 / steps as f64;
                    let (cx, cy) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                    let (x0, x1) = ((cx - r).ceil().max(0.0) as usize, (cx + r).floor());
                    let (y0, y1) = ((cy - r).ceil().max(0.0) as usize, (cy + r).floor());
                    for y in y0..=(y1 as usize).min(h - 1) {
                        for x in x0..=(x1 as usize).min(w - 1) {
                            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                                out[y * w + x] = true;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_thick_polyline_matches_disc_stamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (g, mask) = generate_stroke_geometry(64, 64, &single_line_spec(), &mut rng).unwrap();
        assert_eq!(g.strokes.len(), 1);
        assert_eq!(g.strokes[0].points.len(), 2);
        let oracle = stamp_oracle(&g, 64, 64);
        let oracle_count = oracle.iter().filter(|&&v| v).count();
        let mismatches = (0..64 * 64)
            .filter(|&i| oracle[i] != (mask.data()[i] == 1.0))
            .count();
        assert_eq!(mask.count(), oracle_count);
        assert_eq!(mismatches, 0);
        assert!(coverage_ok(&mask));
    }

    #[test]
    fn zero_brush_width_is_a_configuration_error() {
        let spec = StrokeSpec {
            brush_width: (0.0, 4.0),
            ..single_line_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            generate_stroke_mask(64, 64, &spec, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_masks() {
        let spec = StrokeSpec::for_resolution(64, 64);
        let a = generate_stroke_mask(64, 64, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_stroke_mask(64, 64, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_coverage_is_reported() {
        // A 1px dot can never reach half a percent of a 64x64 frame.
        let spec = StrokeSpec {
            num_strokes: (1, 1),
            vertices_per_stroke: (1, 1),
            brush_width: (1.0, 1.0),
            ..single_line_spec()
        };
        let err =
            generate_stroke_mask(64, 64, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn small_frames_are_rejected() {
        let spec = StrokeSpec::for_resolution(64, 64);
        assert!(generate_stroke_mask(16, 64, &spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn default_masks_respect_coverage_bounds() {
        let spec = StrokeSpec::for_resolution(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let m = generate_stroke_mask(64, 64, &spec, &mut rng).unwrap();
            assert!(coverage_ok(&m), "coverage {}", m.coverage());
        }
    }
}
