//! Adam optimization of the joint objective, deterministic batching and the
//! resumable on-disk training loop.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::CheckpointBundle;
use crate::error::{Error, Result};
use crate::losses::{batch_losses, Binarization, BatchVars, LossReport, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::synth::{derive_seed, load_clip, read_manifest, CorruptedClip};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Side of the square training crop.
    pub crop_size: usize,
    /// Write a log record every this many steps.
    pub log_every: u64,
    /// Save a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            total_steps: 2000,
            seed: 0,
            crop_size: 64,
            log_every: 1,
            checkpoint_every: 500,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("optim.learning_rate = {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("optim.{name} = {b}"));
            }
        }
        if !(self.eps > 0.0) {
            bad.push(format!("optim.eps = {}", self.eps));
        }
        if self.batch_size == 0 {
            bad.push("optim.batch_size = 0".into());
        }
        if self.crop_size < 8 {
            bad.push(format!("optim.crop_size = {} (minimum 8)", self.crop_size));
        }
        if self.log_every == 0 {
            bad.push("optim.log_every = 0".into());
        }
        if self.checkpoint_every == 0 {
            bad.push("optim.checkpoint_every = 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid values: {}", bad.join(", "))))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub binarization: Binarization,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut s = ParamStore::default();
            for (name, t) in p.iter() {
                s.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One bias-corrected Adam update. `grads` must cover every parameter.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        cfg: &OptimConfig,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name).expect("moments mirror params");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = T::from_f64_lossy(b1 * mi.as_f64() + (1.0 - b1) * gi.as_f64());
            }
            let v = self.v.get_mut(name).expect("moments mirror params");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                let g = gi.as_f64();
                *vi = T::from_f64_lossy(b2 * vi.as_f64() + (1.0 - b2) * g * g);
            }
            let (m, v) = (&self.m.get(name).unwrap(), &self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mh = mi.as_f64() / c1;
                let vh = vi.as_f64() / c2;
                let delta = cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
                *pi = T::from_f64_lossy(pi.as_f64() - delta);
            }
        }
        Ok(())
    }
}

/// One training example, every tensor `[1,·,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub refs: Vec<Tensor<f32>>,
    pub x_t: Tensor<f32>,
    pub y_t: Tensor<f32>,
    pub m_t: Tensor<f32>,
    pub x_next: Tensor<f32>,
    pub y_next: Tensor<f32>,
    pub m_next: Tensor<f32>,
}

fn crop_tensor(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in 0..n * c {
        for y in y0..y0 + size {
            let row = (plane * h + y) * w;
            out.extend_from_slice(&src[row + x0..row + x0 + size]);
        }
    }
    Tensor::new([n, c, size, size], out).expect("crop in bounds")
}

impl TrainSample {
    /// Example for target frame `t`; requires a next frame `t+1`.
    pub fn from_clip(clip: &CorruptedClip, t: usize, model: &ModelConfig) -> Result<Self> {
        if t + 1 >= clip.len() {
            return Err(Error::Invalid(format!(
                "frame {t} of {} has no successor",
                clip.clip_id()
            )));
        }
        Ok(Self {
            refs: model
                .reference_indices(t, clip.len())
                .into_iter()
                .map(|r| clip.frames[r].to_tensor())
                .collect(),
            x_t: clip.frames[t].to_tensor(),
            y_t: clip.gt_frames[t].to_tensor(),
            m_t: clip.masks[t].to_tensor(),
            x_next: clip.frames[t + 1].to_tensor(),
            y_next: clip.gt_frames[t + 1].to_tensor(),
            m_next: clip.masks[t + 1].to_tensor(),
        })
    }

    /// Every example of a clip, in frame order.
    pub fn all_from_clip(clip: &CorruptedClip, model: &ModelConfig) -> Result<Vec<Self>> {
        (0..clip.len().saturating_sub(1))
            .map(|t| Self::from_clip(clip, t, model))
            .collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        let [_, _, h, w] = self.x_t.shape();
        (h, w)
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Self {
        let c = |t: &Tensor<f32>| crop_tensor(t, y0, x0, size);
        Self {
            refs: self.refs.iter().map(c).collect(),
            x_t: c(&self.x_t),
            y_t: c(&self.y_t),
            m_t: c(&self.m_t),
            x_next: c(&self.x_next),
            y_next: c(&self.y_next),
            m_next: c(&self.m_next),
        }
    }
}

/// A batch entry: sample index and crop origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub sample: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Batch composition of `step` (0-based) as a pure function of the seed.
///
/// Samples are drawn from a fresh permutation each epoch; crop origins come
/// from a per-step stream.
pub fn batch_for_step(
    seed: u64,
    step: u64,
    batch_size: usize,
    num_samples: usize,
    dims: (usize, usize),
    crop: usize,
) -> Vec<BatchEntry> {
    assert!(num_samples > 0, "batch over an empty sample set");
    let mut perm_cache: Option<(u64, Vec<usize>)> = None;
    let mut crop_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, 0xC809), step));
    (0..batch_size)
        .map(|i| {
            let pos = step * batch_size as u64 + i as u64;
            let epoch = pos / num_samples as u64;
            if perm_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..num_samples).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(seed, 0xE90C),
                    epoch,
                )));
                perm_cache = Some((epoch, perm));
            }
            let perm = &perm_cache.as_ref().unwrap().1;
            BatchEntry {
                sample: perm[(pos % num_samples as u64) as usize],
                y0: crop_rng.random_range(0..=dims.0 - crop),
                x0: crop_rng.random_range(0..=dims.1 - crop),
            }
        })
        .collect()
}

fn stack(parts: Vec<&Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&parts)
}

/// One Adam step on the joint objective. On a non-finite loss or gradient
/// the step is abandoned and neither params nor optimizer state change.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters before the step".into()));
    }
    let tape = Tape::new();
    let num_refs = batch[0].refs.len();
    if batch.iter().any(|s| s.refs.len() != num_refs) {
        return Err(Error::Invalid("samples disagree on reference count".into()));
    }
    let refs = (0..num_refs)
        .map(|r| Ok(tape.constant(stack(batch.iter().map(|s| &s.refs[r]).collect())?)))
        .collect::<Result<Vec<_>>>()?;
    let field = |f: fn(&TrainSample) -> &Tensor<f32>| -> Result<_> {
        Ok(tape.constant(stack(batch.iter().map(f).collect())?))
    };
    let vars = BatchVars {
        refs,
        x_t: field(|s| &s.x_t)?,
        y_t: field(|s| &s.y_t)?,
        m_t: field(|s| &s.m_t)?,
        x_next: field(|s| &s.x_next)?,
        m_next: field(|s| &s.m_next)?,
    };
    let terms = batch_losses(
        &tape,
        &*model,
        &*model,
        &vars,
        &cfg.loss,
        cfg.binarization,
        model.config.threshold,
    )?;
    let report = terms.report(&cfg.loss)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}: {report:?}",
            adam.step + 1
        )));
    }
    let grads = tape.backward(terms.total)?.param_map(&model.params);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of `{name}` at step {}",
            adam.step + 1
        )));
    }
    adam.update(&mut model.params, &grads, &cfg.optim)?;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of completed steps including this one.
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// In-memory trainer over a fixed sample set.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    samples: Vec<TrainSample>,
    dims: (usize, usize),
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<TrainSample>) -> Result<Self> {
        let model = Model::new(config.model.clone())?;
        Self::resume(config, samples, model, None)
    }

    pub fn resume(
        config: TrainConfig,
        samples: Vec<TrainSample>,
        model: Model<f32>,
        adam: Option<AdamState<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::Config(
                "model settings differ from the checkpoint".into(),
            ));
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("training set is empty".into()))?;
        let dims = first.dims();
        if let Some(bad) = samples.iter().position(|s| s.dims() != dims) {
            return Err(Error::Config(format!(
                "training sample {bad} is {:?}, expected {dims:?}",
                samples[bad].dims()
            )));
        }
        if config.optim.crop_size > dims.0.min(dims.1) {
            return Err(Error::Config(format!(
                "optim.crop_size {} exceeds the frame size {dims:?}",
                config.optim.crop_size
            )));
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(&model.params));
        Ok(Self {
            model,
            adam,
            config,
            samples,
            dims,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    /// Runs the next step and returns its log record.
    pub fn step(&mut self) -> Result<LogRecord> {
        let o = &self.config.optim;
        let batch: Vec<TrainSample> = batch_for_step(
            o.seed,
            self.adam.step,
            o.batch_size,
            self.samples.len(),
            self.dims,
            o.crop_size,
        )
        .into_iter()
        .map(|e| self.samples[e.sample].crop(e.y0, e.x0, o.crop_size))
        .collect();
        let report = train_step(&mut self.model, &mut self.adam, &batch, &self.config)?;
        Ok(LogRecord {
            step: self.adam.step,
            report,
        })
    }

    pub fn bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            step: self.adam.step,
            train: Some(self.config.clone()),
        }
    }
}

/// Loads every training-split clip of a dataset and expands it into samples.
pub fn load_training_samples(data_root: &Path, model: &ModelConfig) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for record in read_manifest(data_root)?.iter().filter(|r| r.split == "train") {
        let clip = load_clip(data_root, record)?;
        samples.extend(TrainSample::all_from_clip(&clip, model)?);
    }
    Ok(samples)
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Paths written by [`train_loop`].
pub fn output_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(CHECKPOINT_FILE), out_dir.join(LOG_FILE))
}

/// Trains on the `train` split of `data_root` until `total_steps`, writing
/// `checkpoint.safetensors` and `train_log.jsonl` into `out_dir`.
///
/// With `resume`, an existing checkpoint is continued; the log is cut back
/// to the checkpoint's step so that it matches an uninterrupted run.
pub fn train_loop(
    data_root: &Path,
    config: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<CheckpointBundle> {
    config.validate()?;
    let samples = load_training_samples(data_root, &config.model)?;
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no training clips under {}",
            data_root.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (ckpt_path, log_path) = output_paths(out_dir);
    let (mut trainer, mut log) = if resume && ckpt_path.exists() {
        let bundle = CheckpointBundle::load(&ckpt_path)?;
        if let Some(saved) = &bundle.train {
            let mut a = saved.clone();
            let mut b = config.clone();
            // Extending a run is allowed; everything else must match.
            a.optim.total_steps = 0;
            b.optim.total_steps = 0;
            if a != b {
                return Err(Error::Config(format!(
                    "configuration differs from the checkpoint in {}",
                    ckpt_path.display()
                )));
            }
        }
        let step = bundle.step;
        let mut log = read_log(&log_path)?;
        log.retain(|r| r.step <= step);
        let trainer = Trainer::resume(config.clone(), samples, bundle.model, bundle.adam)?;
        (trainer, log)
    } else {
        (Trainer::new(config.clone(), samples)?, Vec::new())
    };
    write_log(&log_path, &log)?;
    let mut log_file = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let o = config.optim.clone();
    while trainer.step_count() < o.total_steps {
        let record = trainer.step()?;
        if record.step % o.log_every == 0 {
            log_file
                .write_all(format!("{}\n", serde_json::to_string(&record).unwrap()).as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "step {} total {:.5} l_f {:.5} l_s {:.5} l_c {:.5}",
                record.step,
                record.report.total,
                record.report.l_f,
                record.report.l_s,
                record.report.l_c
            );
            log.push(record.clone());
        }
        if record.step % o.checkpoint_every == 0 {
            trainer.bundle().save(&ckpt_path)?;
        }
    }
    let bundle = trainer.bundle();
    bundle.save(&ckpt_path)?;
    Ok(bundle)
}
