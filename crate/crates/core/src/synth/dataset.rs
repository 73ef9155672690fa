//! Corpus layout on disk:
//! `<root>/<split>/<clip_id>/{frames,gt,masks,alphas}/NNNNN.png` plus one
//! JSON record per clip in `<root>/manifest.jsonl`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AlphaMask, Frame, Mask};

use super::{
    derive_seed, procedural_clip, synthesize_clip, ClipProvenance, CorruptedClip, MotionSpec,
    NoiseBank, SceneSpec, SmoothSpec, StrokeSpec,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const KINDS: [&str; 4] = ["frames", "gt", "masks", "alphas"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub split: String,
    /// Clip directory relative to the corpus root.
    pub dir: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_id: String,
    pub seed: u64,
    pub stroke_seed: u64,
    pub motion_seed: u64,
}

impl ManifestRecord {
    pub fn path(&self, root: &Path, kind: &str, index: usize) -> PathBuf {
        root.join(&self.dir).join(kind).join(frame_file_name(index))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes every per-frame image of a clip and returns its manifest record.
pub fn write_clip(root: &Path, split: &str, clip: &CorruptedClip) -> Result<ManifestRecord> {
    let Some(first) = clip.frames.first() else {
        return Err(Error::Invalid("cannot store an empty clip".into()));
    };
    let (height, width) = first.dims();
    let p = &clip.provenance;
    let record = ManifestRecord {
        clip_id: p.clip_id.clone(),
        split: split.to_owned(),
        dir: format!("{split}/{}", p.clip_id),
        num_frames: clip.len(),
        height,
        width,
        noise_id: p.noise_id.clone(),
        seed: p.seed,
        stroke_seed: p.stroke_seed,
        motion_seed: p.motion_seed,
    };
    for t in 0..clip.len() {
        clip.frames[t].save_png(record.path(root, "frames", t))?;
        clip.gt_frames[t].save_png(record.path(root, "gt", t))?;
        clip.masks[t].save_png(record.path(root, "masks", t))?;
        clip.alphas[t].save_png(record.path(root, "alphas", t))?;
    }
    Ok(record)
}

pub fn write_manifest(root: &Path, records: &[ManifestRecord]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

/// Parses the manifest and checks that every referenced image exists.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if record.num_frames == 0 {
            return Err(Error::Malformed {
                path: path.clone(),
                line: i + 1,
                reason: "num_frames must be positive".into(),
            });
        }
        for t in 0..record.num_frames {
            for kind in KINDS {
                let p = record.path(root, kind, t);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_clip(root: &Path, record: &ManifestRecord) -> Result<CorruptedClip> {
    let n = record.num_frames;
    let mut clip = CorruptedClip {
        frames: Vec::with_capacity(n),
        gt_frames: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        alphas: Vec::with_capacity(n),
        provenance: ClipProvenance {
            clip_id: record.clip_id.clone(),
            noise_id: record.noise_id.clone(),
            seed: record.seed,
            stroke_seed: record.stroke_seed,
            motion_seed: record.motion_seed,
        },
    };
    for t in 0..n {
        clip.frames
            .push(Frame::load_png(record.path(root, "frames", t))?);
        clip.gt_frames
            .push(Frame::load_png(record.path(root, "gt", t))?);
        clip.masks
            .push(Mask::load_png(record.path(root, "masks", t))?);
        clip.alphas
            .push(AlphaMask::load_png(record.path(root, "alphas", t))?);
    }
    let dims = (record.height, record.width);
    if let Some(bad) = clip.frames.iter().position(|f| f.dims() != dims) {
        return Err(Error::shape(
            "load_clip",
            format!("{} frame {bad} is not {dims:?}", record.clip_id),
        ));
    }
    Ok(clip)
}

/// Settings for a procedural corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub frames_per_clip: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub noise_patches: usize,
    pub seed: u64,
    /// Stroke parameters; scaled from the 256×256 defaults when absent.
    pub stroke: Option<StrokeSpec>,
    pub smooth: SmoothSpec,
    pub motion: MotionSpec,
    pub scene: SceneSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames_per_clip: 8,
            train_clips: 4,
            val_clips: 2,
            noise_patches: 16,
            seed: 0,
            stroke: None,
            smooth: SmoothSpec::default(),
            motion: MotionSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl CorpusConfig {
    pub fn stroke_spec(&self) -> StrokeSpec {
        self.stroke
            .clone()
            .unwrap_or_else(|| StrokeSpec::for_resolution(self.height, self.width))
    }

    /// Synthesizes clip `index` of `split` without touching the disk.
    pub fn synthesize(&self, bank: &NoiseBank, split: &str, index: usize) -> Result<CorruptedClip> {
        let split_tag = match split {
            "train" => 1u64,
            "val" => 2,
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        };
        let clip_seed = derive_seed(derive_seed(self.seed, split_tag), index as u64);
        let src = procedural_clip(
            format!("{split}-{index:04}"),
            self.frames_per_clip,
            self.height,
            self.width,
            &self.scene,
            derive_seed(clip_seed, 0x7363_656E_65),
        )?;
        synthesize_clip(
            &src,
            bank,
            &self.stroke_spec(),
            &self.smooth,
            &self.motion,
            clip_seed,
        )
    }

    pub fn noise_bank(&self) -> NoiseBank {
        NoiseBank::procedural(
            self.noise_patches,
            self.height,
            self.width,
            derive_seed(self.seed, 0x6E6F_6973_65),
        )
    }
}

/// Generates and stores a full corpus, returning the manifest records.
pub fn generate_corpus(
    root: &Path,
    config: &CorpusConfig,
    bank: Option<&NoiseBank>,
) -> Result<Vec<ManifestRecord>> {
    if config.frames_per_clip < 2 {
        return Err(Error::Config("frames_per_clip must be at least 2".into()));
    }
    if config.train_clips + config.val_clips == 0 {
        return Err(Error::Config("corpus needs at least one clip".into()));
    }
    let owned;
    let bank = match bank {
        Some(b) => b,
        None => {
            if config.noise_patches == 0 {
                return Err(Error::Config("noise_patches must be positive".into()));
            }
            owned = config.noise_bank();
            &owned
        }
    };
    let mut records = Vec::new();
    for (split, count) in [("train", config.train_clips), ("val", config.val_clips)] {
        for i in 0..count {
            let clip = config.synthesize(bank, split, i)?;
            records.push(write_clip(root, split, &clip)?);
        }
    }
    write_manifest(root, &records)?;
    Ok(records)
}
