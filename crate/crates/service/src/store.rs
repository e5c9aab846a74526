//! Sessions and jobs persisted as a plain directory tree.
//!
//! ```text
//! root/index.json
//! root/sessions/<id>/session.json, image.png
//! root/jobs/<id>/job.json
//! root/jobs/<id>/work/            pipeline job directory
//! ```
//!
//! Every JSON file is replaced atomically (write to a temporary file, then
//! rename), so readers never see a partial record.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sgedit_core::metrics::MetricsReport;
use sgedit_core::pipeline::{PipelineConfig, Progress, StepKind};
use sgedit_core::scenegraph::{EditOp, GraphError, SceneGraph};
use sgedit_core::Image;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("session `{0}` has no pending ops")]
    NothingPending(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("image error: {0}")]
    Image(#[from] sgedit_core::image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub image_ref: String,
    pub original_graph: SceneGraph,
    pub graph: SceneGraph,
    pub history: Vec<EditOp>,
    /// Length of `history` covered by the last submitted job.
    pub submitted: usize,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl Session {
    pub fn pending_ops(&self) -> &[EditOp] {
        &self.history[self.submitted..]
    }

    /// History folded over the original graph.
    pub fn replay(&self) -> Result<SceneGraph, GraphError> {
        self.original_graph.apply_all(&self.history)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Failed,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub step_index: usize,
    pub step: StepKind,
    pub total_steps: usize,
    pub iteration: Option<usize>,
    pub loss: Option<f64>,
}

impl From<&Progress> for JobProgress {
    fn from(p: &Progress) -> Self {
        JobProgress {
            step_index: p.step_index,
            step: p.step,
            total_steps: p.total_steps,
            iteration: p.iteration,
            loss: p.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    /// The full session history at submission, replayed on the original image.
    pub ops: Vec<EditOp>,
    pub spec: PipelineConfig,
    pub status: JobStatus,
    pub progress: Option<JobProgress>,
    /// Paths relative to the job's work directory.
    pub artifacts: Vec<String>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub failed_step: Option<usize>,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub updated_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub next_session: u64,
    pub next_job: u64,
    pub sessions: Vec<String>,
    pub jobs: Vec<String>,
}

pub struct Store {
    root: PathBuf,
    /// Guards the index and serializes every session mutation.
    lock: Mutex<()>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        fs::create_dir_all(root.join("jobs"))?;
        let store = Store {
            root,
            lock: Mutex::new(()),
        };
        if !store.index_path().exists() {
            write_json(&store.index_path(), &Index::default())?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn index(&self) -> Result<Index, StoreError> {
        read_json(&self.index_path())
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }

    pub fn work_dir(&self, id: &str) -> PathBuf {
        self.job_dir(id).join("work")
    }

    fn guard(&self) -> std::sync::MutexGuard<'_, ()> {
        self.lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create_session(&self, image: &Image, graph: SceneGraph) -> Result<Session, StoreError> {
        let _g = self.guard();
        let mut index = self.index()?;
        index.next_session += 1;
        let id = format!("s{:04}", index.next_session);
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir)?;
        image.save_png(dir.join("image.png"))?;
        let now = now_ms();
        let session = Session {
            id: id.clone(),
            image_ref: graph.image_ref.clone(),
            original_graph: graph.clone(),
            graph,
            history: Vec::new(),
            submitted: 0,
            created_ms: now,
            updated_ms: now,
        };
        write_json(&dir.join("session.json"), &session)?;
        index.sessions.push(id);
        write_json(&self.index_path(), &index)?;
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Session, StoreError> {
        let path = self.session_dir(id).join("session.json");
        if !path.exists() {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        read_json(&path)
    }

    pub fn session_image(&self, id: &str) -> Result<Image, StoreError> {
        self.session(id)?;
        Ok(Image::load(self.session_dir(id).join("image.png"))?)
    }

    pub fn session_image_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join("image.png")
    }

    /// Applies one edit to the session's current graph and appends it to the history.
    pub fn apply_op(&self, id: &str, op: EditOp) -> Result<Session, StoreError> {
        let _g = self.guard();
        let mut s = self.session(id)?;
        s.graph = s.graph.apply_edit(&op)?;
        s.history.push(op);
        s.updated_ms = now_ms();
        write_json(&self.session_dir(id).join("session.json"), &s)?;
        Ok(s)
    }

    /// Queues a job for the session's pending ops.
    pub fn create_job(&self, session_id: &str, spec: PipelineConfig) -> Result<Job, StoreError> {
        let _g = self.guard();
        let mut s = self.session(session_id)?;
        if s.pending_ops().is_empty() {
            return Err(StoreError::NothingPending(session_id.to_string()));
        }
        let mut index = self.index()?;
        index.next_job += 1;
        let id = format!("j{:04}", index.next_job);
        fs::create_dir_all(self.job_dir(&id))?;
        let now = now_ms();
        let job = Job {
            id: id.clone(),
            session_id: session_id.to_string(),
            ops: s.history.clone(),
            spec,
            status: JobStatus::Queued,
            progress: None,
            artifacts: Vec::new(),
            metrics: None,
            error: None,
            failed_step: None,
            created_ms: now,
            started_ms: None,
            finished_ms: None,
            updated_ms: now,
        };
        write_json(&self.job_dir(&id).join("job.json"), &job)?;
        index.jobs.push(id);
        write_json(&self.index_path(), &index)?;
        s.submitted = s.history.len();
        s.updated_ms = now;
        write_json(&self.session_dir(session_id).join("session.json"), &s)?;
        Ok(job)
    }

    pub fn job(&self, id: &str) -> Result<Job, StoreError> {
        let path = self.job_dir(id).join("job.json");
        if !path.exists() {
            return Err(StoreError::UnknownJob(id.to_string()));
        }
        read_json(&path)
    }

    /// Rewrites a job record. Only the runner executing the job calls this.
    pub fn update_job(&self, job: &mut Job) -> Result<(), StoreError> {
        job.updated_ms = now_ms();
        write_json(&self.job_dir(&job.id).join("job.json"), job)
    }

    pub fn jobs(&self) -> Result<Vec<Job>, StoreError> {
        self.index()?.jobs.iter().map(|id| self.job(id)).collect()
    }
}
