//! Frame metrics (PSNR, SSIM), mask metrics (IOU, BCE) and corpus reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::bce_mean_kernel;
use crate::error::{Error, Result};
use crate::image::{Frame, Mask, SoftMask};
use crate::inference::{
    read_result_record, result_path, COMPLETED_DIR, MASKS_DIR, SOFT_MASKS_DIR,
};
use crate::synth::{read_manifest, ManifestRecord};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims("psnr", a.dims(), b.dims())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(sum / a.data().len() as f64))
}

/// PSNR restricted to the pixels where `mask` is set. An empty mask has
/// nothing to compare and reports the cap.
pub fn psnr_masked(a: &Frame, b: &Frame, mask: &Mask) -> Result<f64> {
    same_dims("psnr_masked", a.dims(), b.dims())?;
    same_dims("psnr_masked", a.dims(), mask.dims())?;
    let plane = mask.data().len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..3 {
            let d = a.data()[c * plane + i] as f64 - b.data()[c * plane + i] as f64;
            sum += d * d;
        }
        count += 3;
    }
    Ok(if count == 0 {
        PSNR_CAP
    } else {
        psnr_from_mse(sum / count as f64)
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sums over every fully contained window.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`,
/// `C2 = 0.03²`, averaged over valid windows and then channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims("ssim", a.dims(), b.dims())?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks agree perfectly.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims("iou", pred.dims(), gt.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean binary cross-entropy; the same kernel as the training mask loss.
pub fn bce_mask(pred: &SoftMask, gt: &Mask) -> Result<f64> {
    same_dims("bce_mask", pred.dims(), gt.dims())?;
    Ok(bce_mean_kernel(pred.data(), gt.data()))
}

/// Metric means over a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub bce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    #[serde(flatten)]
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipEval>,
    /// Frame-count weighted means over all clips.
    pub corpus: MetricMeans,
    /// Reserved; perceptual and flow-based metrics are not computed.
    pub lpips: Option<f64>,
    pub e_warp: Option<f64>,
}

/// Per-frame values of one clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub iou: Vec<f64>,
    pub bce: Vec<f64>,
}

impl FrameScores {
    pub fn push(
        &mut self,
        completed: &Frame,
        gt: &Frame,
        mask: &Mask,
        soft: &SoftMask,
        gt_mask: &Mask,
    ) -> Result<()> {
        self.psnr.push(psnr(completed, gt)?);
        self.ssim.push(ssim(completed, gt)?);
        self.iou.push(iou(mask, gt_mask)?);
        self.bce.push(bce_mask(soft, gt_mask)?);
        Ok(())
    }

    pub fn means(&self) -> MetricMeans {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        MetricMeans {
            frames: self.psnr.len(),
            psnr: mean(&self.psnr),
            ssim: mean(&self.ssim),
            iou: mean(&self.iou),
            bce: mean(&self.bce),
        }
    }
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipEval>) -> Self {
        let frames: usize = clips.iter().map(|c| c.means.frames).sum();
        let weighted = |f: fn(&MetricMeans) -> f64| {
            clips
                .iter()
                .map(|c| f(&c.means) * c.means.frames as f64)
                .sum::<f64>()
                / frames.max(1) as f64
        };
        let corpus = MetricMeans {
            frames,
            psnr: weighted(|m| m.psnr),
            ssim: weighted(|m| m.ssim),
            iou: weighted(|m| m.iou),
            bce: weighted(|m| m.bce),
        };
        Self {
            clips,
            corpus,
            lpips: None,
            e_warp: None,
        }
    }

    /// One JSON record per clip followed by a `"clip_id": "*corpus*"` summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.clips {
            out.push_str(&serde_json::to_string(c).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "clip_id": "*corpus*",
            "frames": self.corpus.frames,
            "psnr": self.corpus.psnr,
            "ssim": self.corpus.ssim,
            "iou": self.corpus.iou,
            "bce": self.corpus.bce,
            "lpips": self.lpips,
            "e_warp": self.e_warp,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// Fixed-width table: frame metrics first, then mask metrics.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>9} {:>7} {:>7} {:>7}",
            "clip", "frames", "PSNR↑", "SSIM↑", "BCE↓", "IOU↑"
        );
        let row = |s: &mut String, name: &str, m: &MetricMeans| {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>9.3} {:>7.4} {:>7.4} {:>7.4}",
                name, m.frames, m.psnr, m.ssim, m.bce, m.iou
            );
        };
        for c in &self.clips {
            row(&mut s, &c.clip_id, &c.means);
        }
        row(&mut s, "mean", &self.corpus);
        s
    }
}

fn check_exists(path: &Path, missing: &mut Vec<String>) -> bool {
    if path.exists() {
        true
    } else {
        missing.push(path.display().to_string());
        false
    }
}

/// Compares `results_root/<clip_id>/` against each clip of the dataset at
/// `gt_root` (optionally only one split). Every missing file is listed in
/// the error before anything is scored.
pub fn evaluate_corpus(results_root: &Path, gt_root: &Path, split: Option<&str>) -> Result<EvalReport> {
    let records: Vec<ManifestRecord> = read_manifest(gt_root)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    let mut missing = Vec::new();
    for r in &records {
        let dir = results_root.join(&r.clip_id);
        for t in 0..r.num_frames {
            for kind in [COMPLETED_DIR, MASKS_DIR, SOFT_MASKS_DIR] {
                check_exists(&result_path(&dir, kind, t), &mut missing);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "results do not match the manifest; missing: {}",
            missing.join(", ")
        )));
    }
    let mut clips = Vec::with_capacity(records.len());
    for r in &records {
        let dir = results_root.join(&r.clip_id);
        if let Ok(rec) = read_result_record(&dir) {
            if rec.num_frames != r.num_frames {
                return Err(Error::Invalid(format!(
                    "{}: result has {} frames, ground truth {}",
                    r.clip_id, rec.num_frames, r.num_frames
                )));
            }
        }
        let mut scores = FrameScores::default();
        for t in 0..r.num_frames {
            scores.push(
                &Frame::load_png(result_path(&dir, COMPLETED_DIR, t))?,
                &Frame::load_png(r.path(gt_root, "gt", t))?,
                &Mask::load_png(result_path(&dir, MASKS_DIR, t))?,
                &SoftMask::load_png(result_path(&dir, SOFT_MASKS_DIR, t))?,
                &Mask::load_png(r.path(gt_root, "masks", t))?,
            )?;
        }
        clips.push(ClipEval {
            clip_id: r.clip_id.clone(),
            means: scores.means(),
        });
    }
    Ok(EvalReport::from_clips(clips))
}
