//! Sessions, their on-disk form and the single propagation worker.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use vinpaint::image::{Frame, Mask, SoftMask};
use vinpaint::inference::{
    build_plan, propagate_with_progress, read_result_record, refine_with_progress, result_path,
    write_result, AnnotationSet, InpaintModel, InpaintResult, COMPLETED_DIR, MASKS_DIR,
    SOFT_MASKS_DIR,
};
use vinpaint::synth::frame_file_name;
use vinpaint::{Error, Result};

pub type SharedModel = Arc<dyn InpaintModel + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Running,
    Done,
    Error,
}

pub struct Session {
    pub id: String,
    pub dir: PathBuf,
    pub frames: Arc<Vec<Frame>>,
    pub annotations: AnnotationSet,
    pub result: Option<Arc<InpaintResult>>,
    pub status: Status,
    pub progress: usize,
    pub progress_total: usize,
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    num_frames: usize,
    status: Status,
    error: Option<String>,
}

const INPUT_DIR: &str = "input";
const ANNOTATION_DIR: &str = "annotations";
const RESULT_DIR: &str = "result";
const RECORD_FILE: &str = "session.json";

impl Session {
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn result_dir(&self) -> PathBuf {
        self.dir.join(RESULT_DIR)
    }

    pub fn create(dir: PathBuf, id: String, frames: Vec<Frame>) -> Result<Self> {
        for (t, f) in frames.iter().enumerate() {
            f.save_png(dir.join(INPUT_DIR).join(frame_file_name(t)))?;
        }
        std::fs::create_dir_all(dir.join(ANNOTATION_DIR))
            .map_err(|e| Error::io(dir.join(ANNOTATION_DIR), e))?;
        let len = frames.len();
        let session = Self {
            id,
            dir,
            frames: Arc::new(frames),
            annotations: AnnotationSet::new(len),
            result: None,
            status: Status::Idle,
            progress: 0,
            progress_total: 0,
            error: None,
        };
        session.persist()?;
        Ok(session)
    }

    pub fn persist(&self) -> Result<()> {
        let record = SessionRecord {
            id: self.id.clone(),
            num_frames: self.frames.len(),
            status: self.status,
            error: self.error.clone(),
        };
        let path = self.dir.join(RECORD_FILE);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&record).expect("serializable"))
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn put_annotation(&mut self, index: usize, mask: Mask) -> Result<()> {
        mask.save_png(self.dir.join(ANNOTATION_DIR).join(frame_file_name(index)))?;
        self.annotations.insert(index, mask)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: SessionRecord = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
        let frames = (0..record.num_frames)
            .map(|t| Frame::load_png(dir.join(INPUT_DIR).join(frame_file_name(t))))
            .collect::<Result<Vec<_>>>()?;
        let annotations = vinpaint::inference::load_annotations_dir(
            &dir.join(ANNOTATION_DIR),
            record.num_frames,
        )?;
        let result_dir = dir.join(RESULT_DIR);
        let result = if result_dir.join(vinpaint::inference::RESULT_RECORD).exists() {
            Some(Arc::new(load_result(&result_dir, record.num_frames)?))
        } else {
            None
        };
        Ok(Self {
            id: record.id,
            dir: dir.to_path_buf(),
            frames: Arc::new(frames),
            annotations,
            result,
            status: record.status,
            progress: 0,
            progress_total: 0,
            error: record.error,
        })
    }
}

fn load_result(dir: &Path, len: usize) -> Result<InpaintResult> {
    let record = read_result_record(dir)?;
    if record.num_frames != len {
        return Err(Error::Invalid(format!(
            "{}: stored result has {} frames, session has {len}",
            dir.display(),
            record.num_frames
        )));
    }
    let mut result = InpaintResult {
        completed: Vec::with_capacity(len),
        masks: Vec::with_capacity(len),
        soft_masks: Vec::with_capacity(len),
        provenance: record.provenance,
        annotations: AnnotationSet::new(len),
    };
    for t in 0..len {
        result
            .completed
            .push(Frame::load_png(result_path(dir, COMPLETED_DIR, t))?);
        result.masks.push(Mask::load_png(result_path(dir, MASKS_DIR, t))?);
        result
            .soft_masks
            .push(SoftMask::load_png(result_path(dir, SOFT_MASKS_DIR, t))?);
    }
    for &a in &record.annotated {
        let mask = result.masks.get(a).cloned().ok_or_else(|| {
            Error::Invalid(format!("{}: annotation {a} out of range", dir.display()))
        })?;
        result.annotations.insert(a, mask)?;
    }
    Ok(result)
}

pub type SessionRef = Arc<Mutex<Session>>;

/// Sessions, the model and the job queue.
pub struct Shared {
    pub work_dir: PathBuf,
    pub sessions: RwLock<HashMap<String, SessionRef>>,
    pub model: SharedModel,
    queue: Mutex<mpsc::Sender<String>>,
}

impl Shared {
    /// Loads persisted sessions under `work_dir/sessions`, starts the worker
    /// and re-queues jobs that a previous process left running.
    pub fn open(work_dir: &Path, model: SharedModel) -> Result<Arc<Self>> {
        let root = work_dir.join("sessions");
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut sessions = HashMap::new();
        let mut pending = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RECORD_FILE).exists())
            .collect();
        entries.sort();
        for dir in entries {
            match Session::load(&dir) {
                Ok(s) => {
                    if s.status == Status::Running {
                        pending.push(s.id.clone());
                    }
                    sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
                }
                Err(e) => log::warn!("skipping session {}: {e}", dir.display()),
            }
        }
        let (tx, rx) = mpsc::channel::<String>();
        let shared = Arc::new(Self {
            work_dir: work_dir.to_path_buf(),
            sessions: RwLock::new(sessions),
            model,
            queue: Mutex::new(tx),
        });
        let worker = Arc::downgrade(&shared);
        std::thread::Builder::new()
            .name("inpaint-worker".into())
            .spawn(move || {
                for id in rx {
                    let Some(shared) = worker.upgrade() else { break };
                    shared.run_job(&id);
                }
            })
            .map_err(|e| Error::io(work_dir, e))?;
        for id in pending {
            shared.enqueue(id);
        }
        Ok(shared)
    }

    pub fn session_root(&self) -> PathBuf {
        self.work_dir.join("sessions")
    }

    pub fn get(&self, id: &str) -> Option<SessionRef> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn insert(&self, session: Session) -> SessionRef {
        let id = session.id.clone();
        let r = Arc::new(Mutex::new(session));
        self.sessions.write().unwrap().insert(id, r.clone());
        r
    }

    pub fn enqueue(&self, id: String) {
        // The receiver lives as long as the worker thread, which lives as
        // long as this struct.
        let _ = self.queue.lock().unwrap().send(id);
    }

    fn run_job(&self, id: &str) {
        let Some(session) = self.get(id) else { return };
        let (frames, annotations, previous) = {
            let s = session.lock().unwrap();
            (s.frames.clone(), s.annotations.clone(), s.result.clone())
        };
        let outcome = self.compute(&session, &frames, &annotations, previous.as_deref());
        let mut s = session.lock().unwrap();
        match outcome.and_then(|r| write_result(&s.result_dir(), id, &r).map(|_| r)) {
            Ok(result) => {
                s.result = Some(Arc::new(result));
                s.status = Status::Done;
                s.error = None;
            }
            Err(e) => {
                log::error!("session {id}: {e}");
                s.status = Status::Error;
                s.error = Some(e.to_string());
            }
        }
        if let Err(e) = s.persist() {
            log::error!("session {id}: {e}");
        }
    }

    fn compute(
        &self,
        session: &SessionRef,
        frames: &[Frame],
        annotations: &AnnotationSet,
        previous: Option<&InpaintResult>,
    ) -> Result<InpaintResult> {
        let mut tick = |_t: usize| session.lock().unwrap().progress += 1;
        let Some(previous) = previous else {
            session.lock().unwrap().progress_total = frames.len();
            return propagate_with_progress(&*self.model, frames, annotations, &mut tick);
        };
        let changed: Vec<(usize, Mask)> = annotations
            .iter()
            .filter(|(i, m)| previous.annotations.get(*i) != Some(*m))
            .map(|(i, m)| (i, m.clone()))
            .collect();
        // Work estimate: each new annotation recomputes the segment it owns.
        let mut acc = previous.annotations.clone();
        let mut total = 0;
        for (i, m) in &changed {
            acc.insert(*i, m.clone())?;
            total += build_plan(&acc)?.segment(*i).count();
        }
        session.lock().unwrap().progress_total = total;
        let mut result = previous.clone();
        for (i, m) in changed {
            result = refine_with_progress(&*self.model, frames, &result, i, m, &mut tick)?;
        }
        Ok(result)
    }
}
