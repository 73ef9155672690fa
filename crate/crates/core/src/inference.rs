//! Whole-clip completion from sparse mask annotations.
//!
//! Every frame belongs to its nearest annotation (ties go to the earlier
//! one). Each annotation's segment is swept outward: forward for later
//! frames, backward for earlier ones. A step predicts the frame's mask from
//! the previously completed neighbour, then completes the frame with it.
//!
//! A reference uses the completed frame when it lies between the annotation
//! and the current frame, and the raw frame otherwise. Every output is then
//! a function of its annotation and the raw clip alone, independent of where
//! the segment ends, so [`refine`] can recompute one segment and leave the
//! rest untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::image::{Frame, Mask, SoftMask};
use crate::model::{binarize_mask, Completion, FrameCompleter, MaskPredictor, Model};
use crate::synth::{check_uniform_dims, frame_file_name};
use crate::tensor::Tensor;

/// Sparse human-provided masks for a clip of `len` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    len: usize,
    entries: BTreeMap<usize, Mask>,
}

impl AnnotationSet {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            entries: BTreeMap::new(),
        }
    }

    pub fn single(len: usize, index: usize, mask: Mask) -> Result<Self> {
        let mut a = Self::new(len);
        a.insert(index, mask)?;
        Ok(a)
    }

    /// Adds or replaces the annotation at `index`.
    pub fn insert(&mut self, index: usize, mask: Mask) -> Result<()> {
        if index >= self.len {
            return Err(Error::Invalid(format!(
                "annotation index {index} outside a clip of {} frames",
                self.len
            )));
        }
        if let Some((_, other)) = self.entries.iter().next() {
            if other.dims() != mask.dims() {
                return Err(Error::shape(
                    "annotation",
                    format!("mask {:?} vs {:?}", mask.dims(), other.dims()),
                ));
            }
        }
        self.entries.insert(index, mask);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&Mask> {
        self.entries.get(&index)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.entries.iter().map(|(&i, m)| (i, m))
    }

    pub fn clip_len(&self) -> usize {
        self.len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The annotation that owns `frame`.
    pub fn owner(&self, frame: usize) -> Option<usize> {
        self.entries
            .keys()
            .copied()
            .min_by_key(|&a| (a.abs_diff(frame), a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The annotated frame itself.
    Annotated,
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub frame: usize,
    pub direction: Direction,
    /// Index of the owning annotation.
    pub source: usize,
}

impl PlanStep {
    /// The completed neighbour this step's mask is predicted from.
    pub fn predecessor(&self) -> Option<usize> {
        match self.direction {
            Direction::Annotated => None,
            Direction::Forward => Some(self.frame - 1),
            Direction::Backward => Some(self.frame + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropagationPlan {
    pub len: usize,
    pub steps: Vec<PlanStep>,
}

impl PropagationPlan {
    /// Steps owned by annotation `source`, in execution order.
    pub fn segment(&self, source: usize) -> impl Iterator<Item = &PlanStep> {
        self.steps.iter().filter(move |s| s.source == source)
    }
}

/// Frames `[start, end]` owned by annotation `a`, given all annotation indices.
fn segment_bounds(indices: &[usize], len: usize, a: usize) -> (usize, usize) {
    let pos = indices.iter().position(|&i| i == a).expect("known annotation");
    // Frame f goes to the earlier annotation p when f - p <= a - f.
    let start = if pos == 0 {
        0
    } else {
        (indices[pos - 1] + a) / 2 + 1
    };
    let end = if pos + 1 == indices.len() {
        len - 1
    } else {
        (a + indices[pos + 1]) / 2
    };
    (start, end)
}

fn segment_steps(indices: &[usize], len: usize, a: usize) -> Vec<PlanStep> {
    let (start, end) = segment_bounds(indices, len, a);
    let step = |frame, direction| PlanStep {
        frame,
        direction,
        source: a,
    };
    std::iter::once(step(a, Direction::Annotated))
        .chain((a + 1..=end).map(|f| step(f, Direction::Forward)))
        .chain((start..a).rev().map(|f| step(f, Direction::Backward)))
        .collect()
}

pub fn build_plan(annotations: &AnnotationSet) -> Result<PropagationPlan> {
    if annotations.is_empty() {
        return Err(Error::Invalid("at least one annotation is required".into()));
    }
    let indices = annotations.indices();
    let len = annotations.clip_len();
    Ok(PropagationPlan {
        len,
        steps: indices
            .iter()
            .flat_map(|&a| segment_steps(&indices, len, a))
            .collect(),
    })
}

/// A completed frame with the feature Ψ compares against.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletedFrame {
    pub frame: Frame,
    pub feature: Option<Tensor<f32>>,
}

/// The two networks as plain functions on frames.
///
/// `t` is the index of the frame being completed or queried; real networks
/// ignore it, ground-truth oracles use it.
pub trait InpaintModel {
    fn complete(&self, t: usize, refs: &[&Frame], x: &Frame, mask: &Mask)
        -> Result<CompletedFrame>;

    fn predict_mask(&self, t: usize, query: &Frame, completed: &CompletedFrame)
        -> Result<SoftMask>;

    fn reference_indices(&self, t: usize, len: usize) -> Vec<usize>;

    fn threshold(&self) -> f64;
}

impl InpaintModel for Model<f32> {
    fn complete(
        &self,
        _t: usize,
        refs: &[&Frame],
        x: &Frame,
        mask: &Mask,
    ) -> Result<CompletedFrame> {
        let tape = Tape::inference();
        let refs: Vec<_> = refs.iter().map(|r| tape.constant(r.to_tensor())).collect();
        let prepared = self.prepare(&tape, &refs, tape.constant(x.to_tensor()))?;
        let out = self.finish(&tape, &prepared, tape.constant(mask.to_tensor()))?;
        Ok(CompletedFrame {
            frame: Frame::from_tensor(&out.frame.value(), 0)?,
            feature: out.feature.map(|f| (*f.value()).clone()),
        })
    }

    fn predict_mask(
        &self,
        _t: usize,
        query: &Frame,
        completed: &CompletedFrame,
    ) -> Result<SoftMask> {
        let tape = Tape::inference();
        let feature = completed
            .feature
            .clone()
            .ok_or_else(|| Error::Invalid("completed frame carries no feature".into()))?;
        let completion = Completion {
            frame: tape.constant(completed.frame.to_tensor()),
            feature: Some(tape.constant(feature)),
            decoded: None,
            weights: None,
        };
        let soft = self.predict(&tape, &completion, &[tape.constant(query.to_tensor())])?;
        SoftMask::from_tensor(&soft[0].value(), 0)
    }

    fn reference_indices(&self, t: usize, len: usize) -> Vec<usize> {
        self.config.reference_indices(t, len)
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }
}

/// Ground-truth test double: completes frame `t` as `gt_frames[t]` and
/// predicts `gt_masks[t]` for query `t`.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub gt_frames: Vec<Frame>,
    pub gt_masks: Vec<Mask>,
    pub ref_radius: usize,
}

impl InpaintModel for OracleModel {
    fn complete(&self, t: usize, _refs: &[&Frame], _x: &Frame, _m: &Mask) -> Result<CompletedFrame> {
        let frame = self
            .gt_frames
            .get(t)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("oracle has no frame {t}")))?;
        Ok(CompletedFrame {
            frame,
            feature: None,
        })
    }

    fn predict_mask(&self, t: usize, _q: &Frame, _c: &CompletedFrame) -> Result<SoftMask> {
        self.gt_masks
            .get(t)
            .map(SoftMask::from)
            .ok_or_else(|| Error::Invalid(format!("oracle has no mask {t}")))
    }

    fn reference_indices(&self, t: usize, len: usize) -> Vec<usize> {
        let n = self.ref_radius as isize;
        let last = len.saturating_sub(1) as isize;
        (-n..=n)
            .filter(|&d| d != 0)
            .map(|d| (t as isize + d).clamp(0, last) as usize)
            .collect()
    }

    fn threshold(&self) -> f64 {
        0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Annotated,
    Predicted,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Annotated => "annotated",
            Provenance::Predicted => "predicted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    pub completed: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub soft_masks: Vec<SoftMask>,
    pub provenance: Vec<Provenance>,
    pub annotations: AnnotationSet,
}

impl InpaintResult {
    pub fn len(&self) -> usize {
        self.completed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completed.is_empty()
    }
}

struct FrameOutput {
    completed: Frame,
    mask: Mask,
    soft: SoftMask,
    provenance: Provenance,
}

/// True when `r` lies between the annotation `source` and frame `t`, so its
/// completion does not depend on how far the segment extends.
fn on_path(r: usize, t: usize, source: usize) -> bool {
    (t.min(source)..=t.max(source)).contains(&r)
}

fn run_segment<M: InpaintModel + ?Sized>(
    model: &M,
    frames: &[Frame],
    annotations: &AnnotationSet,
    steps: &[PlanStep],
    progress: &mut dyn FnMut(usize),
) -> Result<Vec<(usize, FrameOutput)>> {
    let len = frames.len();
    let mut done: BTreeMap<usize, CompletedFrame> = BTreeMap::new();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        let t = step.frame;
        let (mask, soft, provenance) = match step.predecessor() {
            None => {
                let m = annotations
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("frame {t} is not annotated")))?;
                let soft = SoftMask::from(&m);
                (m, soft, Provenance::Annotated)
            }
            Some(c) => {
                let prev = done
                    .get(&c)
                    .ok_or_else(|| Error::Invalid(format!("frame {c} used before completion")))?;
                let soft = model.predict_mask(t, &frames[t], prev)?;
                (
                    binarize_mask(&soft, model.threshold()),
                    soft,
                    Provenance::Predicted,
                )
            }
        };
        let refs: Vec<&Frame> = model
            .reference_indices(t, len)
            .into_iter()
            .map(|r| match done.get(&r) {
                Some(c) if on_path(r, t, step.source) => &c.frame,
                _ => &frames[r],
            })
            .collect();
        let completed = model.complete(t, &refs, &frames[t], &mask)?;
        out.push((
            t,
            FrameOutput {
                completed: completed.frame.clone(),
                mask,
                soft,
                provenance,
            },
        ));
        done.insert(t, completed);
        progress(t);
    }
    Ok(out)
}

fn validate_inputs(frames: &[Frame], annotations: &AnnotationSet) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Invalid("clip has no frames".into()));
    }
    check_uniform_dims(frames)?;
    if annotations.clip_len() != frames.len() {
        return Err(Error::Invalid(format!(
            "annotations are for {} frames, clip has {}",
            annotations.clip_len(),
            frames.len()
        )));
    }
    if let Some((i, m)) = annotations.iter().find(|(_, m)| m.dims() != frames[0].dims()) {
        return Err(Error::shape(
            "propagate",
            format!("annotation {i} is {:?}, frames are {:?}", m.dims(), frames[0].dims()),
        ));
    }
    Ok(())
}

pub fn propagate<M: InpaintModel + ?Sized>(
    model: &M,
    frames: &[Frame],
    annotations: &AnnotationSet,
) -> Result<InpaintResult> {
    propagate_with_progress(model, frames, annotations, &mut |_| {})
}

/// [`propagate`], calling `progress(t)` after each frame is produced.
pub fn propagate_with_progress<M: InpaintModel + ?Sized>(
    model: &M,
    frames: &[Frame],
    annotations: &AnnotationSet,
    progress: &mut dyn FnMut(usize),
) -> Result<InpaintResult> {
    validate_inputs(frames, annotations)?;
    let plan = build_plan(annotations)?;
    let mut slots: Vec<Option<FrameOutput>> = (0..frames.len()).map(|_| None).collect();
    for a in annotations.indices() {
        let steps: Vec<PlanStep> = plan.segment(a).copied().collect();
        for (t, o) in run_segment(model, frames, annotations, &steps, progress)? {
            slots[t] = Some(o);
        }
    }
    let mut result = InpaintResult {
        completed: Vec::with_capacity(frames.len()),
        masks: Vec::with_capacity(frames.len()),
        soft_masks: Vec::with_capacity(frames.len()),
        provenance: Vec::with_capacity(frames.len()),
        annotations: annotations.clone(),
    };
    for (t, slot) in slots.into_iter().enumerate() {
        let o = slot.ok_or_else(|| Error::Invalid(format!("plan skipped frame {t}")))?;
        result.completed.push(o.completed);
        result.masks.push(o.mask);
        result.soft_masks.push(o.soft);
        result.provenance.push(o.provenance);
    }
    Ok(result)
}

/// Adds (or replaces) one annotation and recomputes only the segment it
/// now owns.
pub fn refine<M: InpaintModel + ?Sized>(
    model: &M,
    frames: &[Frame],
    result: &InpaintResult,
    index: usize,
    mask: Mask,
) -> Result<InpaintResult> {
    refine_with_progress(model, frames, result, index, mask, &mut |_| {})
}

pub fn refine_with_progress<M: InpaintModel + ?Sized>(
    model: &M,
    frames: &[Frame],
    result: &InpaintResult,
    index: usize,
    mask: Mask,
    progress: &mut dyn FnMut(usize),
) -> Result<InpaintResult> {
    if result.len() != frames.len() {
        return Err(Error::Invalid(format!(
            "result has {} frames, clip has {}",
            result.len(),
            frames.len()
        )));
    }
    if result.annotations.get(index) == Some(&mask) {
        return Ok(result.clone());
    }
    let mut annotations = result.annotations.clone();
    annotations.insert(index, mask)?;
    validate_inputs(frames, &annotations)?;
    let steps: Vec<PlanStep> = build_plan(&annotations)?.segment(index).copied().collect();
    let mut next = result.clone();
    next.annotations = annotations.clone();
    for (t, o) in run_segment(model, frames, &annotations, &steps, progress)? {
        next.completed[t] = o.completed;
        next.masks[t] = o.mask;
        next.soft_masks[t] = o.soft;
        next.provenance[t] = o.provenance;
    }
    Ok(next)
}

pub const COMPLETED_DIR: &str = "completed";
pub const MASKS_DIR: &str = "masks";
pub const SOFT_MASKS_DIR: &str = "soft_masks";
pub const RESULT_RECORD: &str = "result.json";

/// Per-clip record written next to the result images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub clip_id: String,
    pub num_frames: usize,
    pub annotated: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

pub fn result_path(dir: &Path, kind: &str, t: usize) -> PathBuf {
    dir.join(kind).join(frame_file_name(t))
}

/// Writes `completed/`, `masks/`, `soft_masks/` and `result.json` into `dir`.
pub fn write_result(dir: &Path, clip_id: &str, result: &InpaintResult) -> Result<ResultRecord> {
    for kind in [COMPLETED_DIR, MASKS_DIR, SOFT_MASKS_DIR] {
        let d = dir.join(kind);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for t in 0..result.len() {
        result.completed[t].save_png(result_path(dir, COMPLETED_DIR, t))?;
        result.masks[t].save_png(result_path(dir, MASKS_DIR, t))?;
        result.soft_masks[t].save_png(result_path(dir, SOFT_MASKS_DIR, t))?;
    }
    let record = ResultRecord {
        clip_id: clip_id.to_owned(),
        num_frames: result.len(),
        annotated: result.annotations.indices(),
        provenance: result.provenance.clone(),
    };
    let path = dir.join(RESULT_RECORD);
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

pub fn read_result_record(dir: &Path) -> Result<ResultRecord> {
    let path = dir.join(RESULT_RECORD);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path,
        line: 1,
        reason: e.to_string(),
    })
}

/// PNG files of `dir` whose stems are frame indices, sorted by index.
fn indexed_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index = stem.parse::<usize>().map_err(|_| {
            Error::Invalid(format!(
                "{} is not named by a frame index",
                path.display()
            ))
        })?;
        out.push((index, path));
    }
    out.sort();
    Ok(out)
}

/// Loads a clip stored as `00000.png, 00001.png, ...`.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    let files = indexed_pngs(dir)?;
    if let Some((pos, (i, _))) = files.iter().enumerate().find(|(p, (i, _))| p != i) {
        return Err(Error::Invalid(format!(
            "{}: frame {pos} missing (next file is index {i})",
            dir.display()
        )));
    }
    let frames = files
        .iter()
        .map(|(_, p)| Frame::load_png(p))
        .collect::<Result<Vec<_>>>()?;
    check_uniform_dims(&frames)?;
    Ok(frames)
}

/// Loads annotation masks named by the frame index they belong to.
pub fn load_annotations_dir(dir: &Path, len: usize) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::new(len);
    for (i, path) in indexed_pngs(dir)? {
        set.insert(i, Mask::load_png(&path)?)?;
    }
    Ok(set)
}
