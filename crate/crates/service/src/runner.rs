//! Background execution of queued jobs on a fixed number of worker threads.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use sgedit_core::pipeline::{execute, plan, PipelineConfig, QueryLibrary, Resources};
use sgedit_core::position::PositionModel;

use crate::store::{Job, JobProgress, JobStatus, Store, StoreError};

/// Progress is written to the job record at step starts and every this many iterations.
pub const PROGRESS_EVERY: usize = 25;

pub struct Runner {
    tx: Mutex<Option<Sender<String>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Runner {
    /// Starts `workers` threads and requeues every job left queued or running
    /// by a previous process, in submission order.
    pub fn start(store: Arc<Store>, workers: usize) -> Result<Runner, StoreError> {
        let (tx, rx) = channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        let handles = (0..workers.max(1))
            .map(|w| {
                let rx = Arc::clone(&rx);
                let store = Arc::clone(&store);
                std::thread::Builder::new()
                    .name(format!("job-worker-{w}"))
                    .spawn(move || worker(&store, &rx))
                    .expect("spawn worker")
            })
            .collect();
        for job in store.jobs()? {
            if matches!(job.status, JobStatus::Queued | JobStatus::Running) {
                log::info!("requeueing {} ({:?})", job.id, job.status);
                tx.send(job.id).expect("workers alive");
            }
        }
        Ok(Runner {
            tx: Mutex::new(Some(tx)),
            handles,
        })
    }

    pub fn submit(&self, job_id: &str) {
        if let Some(tx) = &*self.tx.lock().unwrap_or_else(|e| e.into_inner()) {
            let _ = tx.send(job_id.to_string());
        }
    }

    /// Stops accepting jobs and waits for the queue to drain.
    pub fn shutdown(mut self) {
        self.tx.lock().unwrap_or_else(|e| e.into_inner()).take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn worker(store: &Store, rx: &Mutex<Receiver<String>>) {
    loop {
        let next = rx.lock().unwrap_or_else(|e| e.into_inner()).recv();
        let Ok(id) = next else { return };
        if let Err(e) = run_job(store, &id) {
            log::error!("job {id}: {e}");
        }
    }
}

fn fail(store: &Store, job: &mut Job, message: String, step: Option<usize>) -> Result<(), StoreError> {
    log::warn!("job {} failed: {message}", job.id);
    job.status = JobStatus::Failed;
    job.error = Some(message);
    job.failed_step = step;
    job.finished_ms = Some(crate::store::now_ms());
    store.update_job(job)
}

fn list_artifacts(dir: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else if let Ok(rel) = p.strip_prefix(base) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Position model and query library a pipeline config asks for.
pub fn load_resources(
    config: &PipelineConfig,
    image_size: usize,
) -> Result<(Option<PositionModel>, QueryLibrary), String> {
    let model = match &config.position_model {
        Some(p) => Some(PositionModel::load(p).map_err(|e| format!("position model `{p}`: {e}"))?),
        None => None,
    };
    let library = match &config.query_library {
        Some(dir) => QueryLibrary::load(dir).map_err(|e| format!("query library `{dir}`: {e}"))?,
        None => QueryLibrary::synthetic(image_size, config.library_seed),
    };
    Ok((model, library))
}

pub fn run_job(store: &Store, id: &str) -> Result<(), StoreError> {
    let mut job = store.job(id)?;
    if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
        return Ok(());
    }
    job.status = JobStatus::Running;
    job.started_ms = Some(crate::store::now_ms());
    store.update_job(&mut job)?;
    let session = store.session(&job.session_id)?;
    let image = store.session_image(&job.session_id)?;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<_, (String, Option<usize>)> {
        let p = plan(&session.original_graph, &job.ops).map_err(|e| (e.to_string(), None))?;
        let (model, library) =
            load_resources(&job.spec, image.width.max(image.height)).map_err(|e| (e, None))?;
        let backend = job.spec.segmentation.backend();
        let res = Resources {
            config: &job.spec,
            backend: backend.as_ref(),
            position_model: model.as_ref(),
            library: &library,
        };
        let mut progress_job = job.clone();
        let mut on_progress = |p: &sgedit_core::pipeline::Progress| {
            let due = match p.iteration {
                None => true,
                Some(i) => i % PROGRESS_EVERY == 0,
            };
            if due {
                progress_job.progress = Some(JobProgress::from(p));
                if let Err(e) = store.update_job(&mut progress_job) {
                    log::warn!("job {}: progress not saved: {e}", progress_job.id);
                }
            }
        };
        let out = execute(&p, &image, &session.original_graph, &res, Some(&store.work_dir(id)), &mut on_progress)
            .map_err(|e| (e.to_string(), e.failed_step().map(|(i, _)| i)))?;
        Ok((out, progress_job.progress))
    }));
    match result {
        Ok(Ok((out, progress))) => {
            job.progress = progress;
            job.metrics = out.metrics;
            job.artifacts = list_artifacts(&store.work_dir(id));
            job.status = JobStatus::Done;
            job.finished_ms = Some(crate::store::now_ms());
            store.update_job(&mut job)
        }
        Ok(Err((message, step))) => {
            job.progress = store.job(id).ok().and_then(|j| j.progress);
            fail(store, &mut job, message, step)
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "worker panicked".into());
            fail(store, &mut job, format!("internal error: {message}"), None)
        }
    }
}
