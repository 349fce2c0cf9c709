//! Background job records and the in-process worker pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use vipera_core::model::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Generation,
    Extraction,
    Labeling,
    Suggestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: u32,
    pub total: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: SessionId,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    pub error_text: Option<String>,
}

/// All jobs of the process. Updates enforce the status order
/// queued → running → done|failed and never lower `completed`.
#[derive(Debug, Default)]
pub struct JobRegistry {
    jobs: Mutex<HashMap<String, Job>>,
    changed: Condvar,
    next: AtomicU64,
}

impl JobRegistry {
    pub fn create(&self, session_id: &SessionId, kind: JobKind, total: u32) -> String {
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("job-{n:06}");
        let job = Job {
            id: id.clone(),
            session_id: session_id.clone(),
            kind,
            status: JobStatus::Queued,
            progress: Progress { completed: 0, total },
            error_text: None,
        };
        self.jobs.lock().unwrap().insert(id.clone(), job);
        id
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(id) {
            if !job.status.is_finished() {
                f(job);
            }
        }
        self.changed.notify_all();
    }

    pub fn start(&self, id: &str) {
        self.update(id, |j| j.status = JobStatus::Running);
    }

    /// Raises `completed` to `value` (clamped to the total); lower values are ignored.
    pub fn advance_to(&self, id: &str, value: u32) {
        self.update(id, |j| j.progress.completed = j.progress.completed.max(value.min(j.progress.total)));
    }

    pub fn advance(&self, id: &str, by: u32) {
        self.update(id, |j| {
            j.progress.completed = j.progress.completed.saturating_add(by).min(j.progress.total);
        });
    }

    /// Grows the total. Unfinished jobs only; totals never shrink.
    pub fn grow_total(&self, id: &str, total: u32) {
        self.update(id, |j| j.progress.total = j.progress.total.max(total));
    }

    pub fn finish(&self, id: &str) {
        self.update(id, |j| {
            j.status = JobStatus::Done;
            j.progress.completed = j.progress.total;
        });
    }

    pub fn fail(&self, id: &str, error: impl Into<String>) {
        let error = error.into();
        self.update(id, |j| {
            j.status = JobStatus::Failed;
            j.error_text = Some(error);
        });
    }

    /// Jobs of one session, oldest first.
    pub fn list(&self, session_id: &SessionId) -> Vec<Job> {
        let mut out: Vec<Job> = self
            .jobs
            .lock()
            .unwrap()
            .values()
            .filter(|j| &j.session_id == session_id)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn unfinished(&self) -> usize {
        self.jobs.lock().unwrap().values().filter(|j| !j.status.is_finished()).count()
    }

    /// Blocks until no job is queued or running. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.jobs.lock().unwrap();
        loop {
            if jobs.values().all(|j| j.status.is_finished()) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            jobs = self.changed.wait_timeout(jobs, deadline - now).unwrap().0;
        }
    }

    pub fn wait_for(&self, id: &str, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.jobs.lock().unwrap();
        loop {
            let job = jobs.get(id)?;
            let now = Instant::now();
            if job.status.is_finished() || now >= deadline {
                return Some(job.clone());
            }
            jobs = self.changed.wait_timeout(jobs, deadline - now).unwrap().0;
        }
    }
}

type Task = Box<dyn FnOnce() + Send + 'static>;

/// Fixed set of threads running submitted tasks in FIFO order.
pub struct WorkerPool {
    sender: Mutex<Option<mpsc::Sender<Task>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl WorkerPool {
    pub fn new(size: usize) -> Self {
        let (sender, receiver) = mpsc::channel::<Task>();
        let receiver = Arc::new(Mutex::new(receiver));
        let workers = (0..size.max(1))
            .map(|i| {
                let receiver = receiver.clone();
                std::thread::Builder::new()
                    .name(format!("vipera-worker-{i}"))
                    .spawn(move || loop {
                        let task = receiver.lock().unwrap().recv();
                        match task {
                            Ok(task) => task(),
                            Err(_) => break,
                        }
                    })
                    .expect("spawn worker")
            })
            .collect();
        Self {
            sender: Mutex::new(Some(sender)),
            workers: Mutex::new(workers),
        }
    }

    pub fn submit(&self, task: impl FnOnce() + Send + 'static) {
        if let Some(sender) = self.sender.lock().unwrap().as_ref() {
            let _ = sender.send(Box::new(task));
        }
    }

    /// Stops accepting tasks and waits for queued ones to finish.
    pub fn shutdown(&self) {
        self.sender.lock().unwrap().take();
        for w in self.workers.lock().unwrap().drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.sender.lock().unwrap().take();
    }
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.released.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.released.notify_one();
    }
}
