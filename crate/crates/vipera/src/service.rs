//! Session lifecycle, background pipelines and persistence.
//!
//! Every session has one mutation lock. A mutation runs on a copy of the
//! session, is persisted, and only then replaces the in-memory state, so
//! memory never runs ahead of disk. Provider calls happen outside the lock.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;
use vipera_core::graph::{parse_extraction, sample_for_extraction, RawExtraction, DEFAULT_SAMPLE_SIZE, EXTRACTION_INSTRUCTION};
use vipera_core::labeling::StackedBarData;
use vipera_core::model::{
    AggregatedSceneGraph, AuditSession, Bookmark, BookmarkKind, Criterion, CriterionId, CriterionOrigin, GeneratedImage, ImageId,
    ImageStatus, LabelOutcome, NodePath, PerImageGraph, Prompt, PromptId, SessionId, Suggestion, SuggestionId, SuggestionRecord,
    SuggestionStatus, Timestamp,
};
use vipera_core::projection::{project, ScatterData};
use vipera_core::provider::{ProviderError, VisionKind, VisionModel, VisionRequest};
use vipera_core::report::{render_report, Report};
use vipera_core::rng::derive_seed;
use vipera_core::suggest::{adopt_prompt, select_image_pairs, suggest_criteria, suggest_prompts, MAX_SUGGESTIONS};

use crate::config::Settings;
use crate::jobs::{Job, JobKind, JobRegistry, Limiter, WorkerPool};
use crate::labeling::{label_pairs, Limited, Pair};
use crate::providers::{Providers, SessionText, SessionVision};
use crate::store::{Store, StoreError};

/// Images requested from the generator per call.
pub const GENERATION_BATCH: u32 = 4;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("image {0} is not ready")]
    ImageNotReady(ImageId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Domain(#[from] vipera_core::Error),
    #[error(transparent)]
    Storage(StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => ServiceError::UnknownSession(id),
            other => ServiceError::Storage(other),
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// How a mutation is written back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Save {
    All,
    AfterRemoval,
    Labels,
}

/// One label of one image, as shown next to the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageLabel {
    pub criterion_id: CriterionId,
    pub criterion: String,
    pub parent_path: NodePath,
    pub outcome: LabelOutcome,
    pub label: String,
}

pub fn now_ms() -> Timestamp {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as Timestamp)
}

/// Runs `f` over `items` with at most `parallelism` in flight, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Splits `(image, seed)` into runs of consecutive seeds of at most `max` images.
fn seed_runs(pending: &[(ImageId, u64)], max: usize) -> Vec<Vec<(ImageId, u64)>> {
    let mut runs: Vec<Vec<(ImageId, u64)>> = Vec::new();
    for (id, seed) in pending {
        match runs.last_mut() {
            Some(run) if run.len() < max && run.last().is_some_and(|l| l.1.wrapping_add(1) == *seed) => {
                run.push((id.clone(), *seed));
            }
            _ => runs.push(vec![(id.clone(), *seed)]),
        }
    }
    runs
}

struct Inner {
    store: Store,
    providers: Providers,
    jobs: JobRegistry,
    limiter: Limiter,
    parallelism: usize,
    pool: WorkerPool,
    sessions: Mutex<HashMap<SessionId, Arc<Mutex<AuditSession>>>>,
}

#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    pub fn new(store: Store, providers: Providers, parallelism: usize) -> Self {
        let parallelism = parallelism.max(1);
        Self {
            inner: Arc::new(Inner {
                store,
                providers,
                jobs: JobRegistry::default(),
                limiter: Limiter::new(parallelism),
                parallelism,
                pool: WorkerPool::new(parallelism),
                sessions: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn from_settings(settings: &Settings) -> Result<Self> {
        let store = Store::open(&settings.data_dir)?;
        let providers = Providers::from_settings(settings)?;
        Ok(Self::new(store, providers, settings.parallelism))
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn parallelism(&self) -> usize {
        self.inner.parallelism
    }

    /// Waits for queued work, then stops the workers.
    pub fn shutdown(&self) {
        self.inner.pool.shutdown();
    }

    fn handle(&self, id: &SessionId) -> Result<Arc<Mutex<AuditSession>>> {
        let mut sessions = self.inner.sessions.lock().unwrap();
        if let Some(h) = sessions.get(id) {
            return Ok(h.clone());
        }
        if !self.inner.store.exists(id) {
            return Err(ServiceError::UnknownSession(id.clone()));
        }
        let session = self.inner.store.load(id)?;
        let h = Arc::new(Mutex::new(session));
        sessions.insert(id.clone(), h.clone());
        Ok(h)
    }

    fn read<T>(&self, id: &SessionId, f: impl FnOnce(&AuditSession) -> T) -> Result<T> {
        let h = self.handle(id)?;
        let guard = h.lock().unwrap();
        Ok(f(&guard))
    }

    fn mutate<T>(&self, id: &SessionId, save: Save, f: impl FnOnce(&mut AuditSession) -> Result<T>) -> Result<T> {
        let h = self.handle(id)?;
        let mut guard = h.lock().unwrap();
        let mut staged = guard.clone();
        let out = f(&mut staged)?;
        match save {
            Save::All => self.inner.store.save(&staged)?,
            Save::AfterRemoval => self.inner.store.save_after_removal(&staged)?,
            Save::Labels => self.inner.store.save_labels(&staged)?,
        }
        *guard = staged;
        Ok(out)
    }

    // ---- sessions ----

    /// Creates and persists a session; draws a seed when none is given.
    pub fn create_session(&self, seed: Option<u64>) -> Result<AuditSession> {
        let id = SessionId::new(uuid::Uuid::new_v4().simple().to_string());
        let seed = seed.unwrap_or_else(rand::random);
        let session = AuditSession::new(id.clone(), seed, now_ms());
        self.inner.store.save(&session)?;
        self.inner
            .sessions
            .lock()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn session(&self, id: &SessionId) -> Result<AuditSession> {
        self.read(id, Clone::clone)
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionId>> {
        Ok(self.inner.store.list()?)
    }

    /// Schedules whatever a session still owes: missing images, an
    /// unextracted sample, unlabeled pairs. Returns the jobs started.
    pub fn resume(&self, id: &SessionId) -> Result<Vec<String>> {
        let owed: Vec<(PromptId, u32)> = self.read(id, |s| {
            let labelable: BTreeSet<ImageId> = s.labelable_pairs().into_iter().map(|(i, _)| i).collect();
            s.active_prompts()
                .filter(|p| {
                    let mut images = s.images_of(&p.id);
                    let any_ready = s.images_of(&p.id).any(|i| i.status == ImageStatus::Ready);
                    images.any(|i| i.status == ImageStatus::Pending || labelable.contains(&i.id))
                        || (any_ready && !s.extracted_prompts.contains(&p.id))
                })
                .map(|p| (p.id.clone(), p.requested_count))
                .collect()
        })?;
        Ok(owed
            .into_iter()
            .map(|(prompt, count)| self.start_pipeline(id, &prompt, count))
            .collect())
    }

    /// Resumes every stored session.
    pub fn resume_all(&self) -> Result<usize> {
        let mut started = 0;
        for id in self.list_sessions()? {
            match self.resume(&id) {
                Ok(jobs) => started += jobs.len(),
                Err(e) => log::error!("cannot resume session {id}: {e}"),
            }
        }
        Ok(started)
    }

    // ---- prompts ----

    /// Adds a prompt and queues its pipeline. Returns the prompt and its generation job.
    pub fn add_prompt(&self, id: &SessionId, text: &str, count: u32) -> Result<(Prompt, String)> {
        let pid = self.mutate(id, Save::All, |s| Ok(s.add_prompt(text, count, None, now_ms())?))?;
        let job = self.start_pipeline(id, &pid, count);
        Ok((self.read(id, |s| s.prompt(&pid).cloned())?.expect("just added"), job))
    }

    pub fn delete_prompt(&self, id: &SessionId, prompt: &PromptId) -> Result<()> {
        self.mutate(id, Save::All, |s| Ok(s.delete_prompt(prompt)?))
    }

    pub fn set_selection(&self, id: &SessionId, prompts: BTreeSet<PromptId>) -> Result<BTreeSet<PromptId>> {
        self.mutate(id, Save::All, |s| {
            s.set_selection(prompts)?;
            Ok(s.selected_prompt_ids.clone())
        })
    }

    // ---- graph and criteria ----

    pub fn graph(&self, id: &SessionId, pruned: bool) -> Result<AggregatedSceneGraph> {
        self.read(id, |s| s.filtered_graph(pruned))
    }

    /// Adds a user object node; an empty `parent` adds a root node.
    pub fn add_node(&self, id: &SessionId, parent: &[String], name: &str) -> Result<NodePath> {
        let parent = (!parent.is_empty()).then(|| NodePath::new(parent)).transpose()?;
        self.mutate(id, Save::All, |s| Ok(s.add_user_node(parent.as_ref(), name)?))
    }

    /// Creates whichever prefixes of `path` are missing as user nodes.
    pub fn ensure_path(&self, id: &SessionId, path: &[String]) -> Result<NodePath> {
        let path = NodePath::new(path)?;
        if self.read(id, |s| s.graph.contains(&path))? {
            return Ok(path);
        }
        self.mutate(id, Save::All, |s| {
            s.ensure_path(&path)?;
            Ok(path.clone())
        })
    }

    /// Adds a criterion and queues labeling of every ready image.
    pub fn add_criterion(&self, id: &SessionId, parent: &[String], name: &str, candidates: &[String]) -> Result<(Criterion, String)> {
        let parent = NodePath::new(parent)?;
        let cid = self.mutate(id, Save::All, |s| {
            Ok(s.add_criterion(&parent, name, candidates, CriterionOrigin::User)?)
        })?;
        self.criterion_created(id, &cid)
    }

    fn criterion_created(&self, id: &SessionId, cid: &CriterionId) -> Result<(Criterion, String)> {
        let (criterion, pairs) = self.read(id, |s| {
            let pairs: Vec<Pair> = s.labelable_pairs().into_iter().filter(|(_, c)| c == cid).collect();
            (s.criterion(cid).cloned().expect("just added"), pairs)
        })?;
        let job = self.start_labeling(id, pairs);
        Ok((criterion, job))
    }

    pub fn delete_criterion(&self, id: &SessionId, cid: &CriterionId) -> Result<()> {
        self.mutate(id, Save::AfterRemoval, |s| Ok(s.remove_criterion(cid)?))
    }

    // ---- images and analysis ----

    pub fn images(&self, id: &SessionId, prompt: Option<&PromptId>) -> Result<Vec<GeneratedImage>> {
        self.read(id, |s| {
            if let Some(p) = prompt {
                if s.prompt(p).is_none() {
                    return Err(vipera_core::Error::UnknownPrompt(p.clone()).into());
                }
            }
            Ok(s.images
                .iter()
                .filter(|i| prompt.is_none_or(|p| &i.prompt_id == p))
                .cloned()
                .collect())
        })?
    }

    pub fn image_file(&self, id: &SessionId, image: &ImageId) -> Result<Vec<u8>> {
        let status = self.read(id, |s| s.image(image).map(|i| i.status))?;
        match status {
            None => Err(vipera_core::Error::UnknownImage(image.clone()).into()),
            Some(ImageStatus::Ready) => Ok(self.inner.store.read_image(id, image)?),
            Some(_) => Err(ServiceError::ImageNotReady(image.clone())),
        }
    }

    pub fn image_labels(&self, id: &SessionId, image: &ImageId) -> Result<Vec<ImageLabel>> {
        self.read(id, |s| {
            if s.image(image).is_none() {
                return Err(vipera_core::Error::UnknownImage(image.clone()).into());
            }
            Ok(s.criteria
                .iter()
                .filter_map(|c| {
                    let outcome = s.label_table.get(image, &c.id)?;
                    Some(ImageLabel {
                        criterion_id: c.id.clone(),
                        criterion: c.name.clone(),
                        parent_path: c.parent_path.clone(),
                        label: c.candidate_name(&outcome).into(),
                        outcome,
                    })
                })
                .collect())
        })?
    }

    pub fn distribution(&self, id: &SessionId, cid: &CriterionId) -> Result<StackedBarData> {
        self.read(id, |s| s.distribution(cid))?.map_err(Into::into)
    }

    pub fn projection(&self, id: &SessionId) -> Result<ScatterData> {
        self.read(id, project)?.map_err(Into::into)
    }

    // ---- suggestions ----

    /// Logs `fresh`, reusing identical pending records, and returns their records.
    fn log_fresh(&self, id: &SessionId, fresh: Vec<Suggestion>) -> Result<Vec<SuggestionRecord>> {
        self.mutate(id, Save::All, |s| {
            let now = now_ms();
            let mut ids = Vec::new();
            for suggestion in fresh {
                let existing = s
                    .suggestions_log
                    .iter()
                    .find(|r| r.status == SuggestionStatus::Pending && r.suggestion == suggestion)
                    .map(|r| r.id.clone());
                match existing {
                    Some(sid) => ids.push(sid),
                    None => ids.extend(s.log_suggestions([suggestion], now)),
                }
            }
            Ok(ids.iter().filter_map(|sid| s.suggestion(sid).cloned()).collect())
        })
    }

    /// Asks the vision model for new criteria over sampled image pairs of the selection.
    pub fn suggest_criteria(&self, id: &SessionId) -> Result<Vec<SuggestionRecord>> {
        let (images, table, criteria, seed) = self.read(id, |s| {
            let images: Vec<ImageId> = s
                .ready_images()
                .filter(|i| s.selected_prompt_ids.contains(&i.prompt_id))
                .map(|i| i.id.clone())
                .collect();
            let seed = derive_seed(s.seed, &format!("criteria-suggestions:{}", s.counters.suggestion));
            (images, s.label_table.clone(), s.criteria.clone(), seed)
        })?;
        let pairs = select_image_pairs(&images, &table, &criteria, seed, MAX_SUGGESTIONS)?;
        let job = self.inner.jobs.create(id, JobKind::Suggestion, pairs.len() as u32);
        self.inner.jobs.start(&job);
        let vision = Limited {
            inner: SessionVision::new(&*self.inner.providers.vlm, self.inner.store.images_dir(id)),
            limiter: &self.inner.limiter,
        };
        let found = suggest_criteria(&pairs, &criteria, &vision);
        let result = self.log_fresh(id, found.into_iter().map(Suggestion::Criterion).collect());
        self.end_job(&job, result.as_ref().err());
        result
    }

    /// Asks the text model for substitutions in every active prompt.
    pub fn suggest_prompts(&self, id: &SessionId) -> Result<Vec<SuggestionRecord>> {
        let (prompts, seed) = self.read(id, |s| (s.active_prompts().cloned().collect::<Vec<_>>(), s.seed))?;
        let job = self.inner.jobs.create(id, JobKind::Suggestion, prompts.len() as u32);
        self.inner.jobs.start(&job);
        let text = SessionText(&*self.inner.providers.llm);
        let found = {
            let _permit = self.inner.limiter.acquire();
            suggest_prompts(&prompts, &text, seed)
        };
        let result = self.log_fresh(id, found.into_iter().map(Suggestion::Prompt).collect());
        self.end_job(&job, result.as_ref().err());
        result
    }

    pub fn suggestions(&self, id: &SessionId) -> Result<Vec<SuggestionRecord>> {
        self.read(id, |s| s.suggestions_log.clone())
    }

    /// Adopts a prompt suggestion as a new child prompt with `count` images.
    pub fn adopt_suggestion(&self, id: &SessionId, sid: &SuggestionId, count: u32) -> Result<(Prompt, String)> {
        let pid = self.mutate(id, Save::All, |s| {
            let record = s.pending_suggestion(sid)?;
            let Suggestion::Prompt(suggestion) = record.suggestion.clone() else {
                return Err(vipera_core::Error::WrongSuggestionKind(sid.clone()).into());
            };
            let (mut next, pid) = adopt_prompt(s, &suggestion, count, now_ms())?;
            next.resolve_suggestion(sid, SuggestionStatus::Accepted)?;
            *s = next;
            Ok(pid)
        })?;
        let job = self.start_pipeline(id, &pid, count);
        Ok((self.read(id, |s| s.prompt(&pid).cloned())?.expect("just added"), job))
    }

    /// Accepts a criterion suggestion and queues its labeling.
    pub fn accept_suggestion(&self, id: &SessionId, sid: &SuggestionId) -> Result<(Criterion, String)> {
        let cid = self.mutate(id, Save::All, |s| Ok(s.accept_criterion_suggestion(sid)?))?;
        self.criterion_created(id, &cid)
    }

    pub fn dismiss_suggestion(&self, id: &SessionId, sid: &SuggestionId) -> Result<SuggestionRecord> {
        self.mutate(id, Save::All, |s| {
            s.resolve_suggestion(sid, SuggestionStatus::Dismissed)?;
            Ok(s.suggestion(sid).cloned().expect("just resolved"))
        })
    }

    // ---- bookmarks and reports ----

    pub fn add_bookmark(&self, id: &SessionId, kind: BookmarkKind, target_ref: &str, note_text: &str) -> Result<Bookmark> {
        self.mutate(id, Save::All, |s| {
            if kind == BookmarkKind::Image {
                let image = ImageId::from(target_ref);
                match s.image(&image) {
                    Some(i) if i.status != ImageStatus::Ready => return Err(ServiceError::ImageNotReady(image)),
                    _ => {}
                }
            }
            let bid = s.add_bookmark(kind, target_ref, note_text, now_ms())?;
            Ok(s.bookmarks.iter().find(|b| b.id == bid).cloned().expect("just added"))
        })
    }

    /// Renders the report from the current state and writes `report.md`.
    pub fn export_report(&self, id: &SessionId) -> Result<Report> {
        let report = self.read(id, render_report)?;
        let dir = self.inner.store.session_dir(id);
        if let Some(missing) = report.referenced_files.iter().find(|f| !dir.join(f).is_file()) {
            return Err(ServiceError::InvalidRequest(format!("report references missing file {missing}")));
        }
        self.inner.store.write_report(id, &report.markdown_text)?;
        Ok(report)
    }

    // ---- jobs ----

    pub fn job(&self, job_id: &str) -> Result<Job> {
        self.inner
            .jobs
            .get(job_id)
            .ok_or_else(|| ServiceError::UnknownJob(job_id.into()))
    }

    pub fn jobs(&self, id: &SessionId) -> Result<Vec<Job>> {
        self.handle(id)?;
        Ok(self.inner.jobs.list(id))
    }

    pub fn wait_idle(&self, timeout: Duration) -> bool {
        self.inner.jobs.wait_idle(timeout)
    }

    pub fn wait_job(&self, job_id: &str, timeout: Duration) -> Result<Job> {
        self.inner
            .jobs
            .wait_for(job_id, timeout)
            .ok_or_else(|| ServiceError::UnknownJob(job_id.into()))
    }

    fn end_job(&self, job: &str, error: Option<&ServiceError>) {
        match error {
            None => self.inner.jobs.finish(job),
            Some(e) => self.inner.jobs.fail(job, e.to_string()),
        }
    }

    // ---- pipelines ----

    /// Queues generation, then extraction, then labeling for one prompt.
    fn start_pipeline(&self, id: &SessionId, prompt: &PromptId, count: u32) -> String {
        let job = self.inner.jobs.create(id, JobKind::Generation, count);
        let (this, id, prompt, j) = (self.clone(), id.clone(), prompt.clone(), job.clone());
        self.inner.pool.submit(move || this.run_pipeline(&id, &prompt, &j));
        job
    }

    fn start_labeling(&self, id: &SessionId, pairs: Vec<Pair>) -> String {
        let job = self.inner.jobs.create(id, JobKind::Labeling, pairs.len() as u32);
        let (this, id, j) = (self.clone(), id.clone(), job.clone());
        self.inner.pool.submit(move || {
            let r = this.run_labeling(&id, &j, &pairs);
            this.end_job(&j, r.as_ref().err());
        });
        job
    }

    fn run_pipeline(&self, id: &SessionId, prompt: &PromptId, gen_job: &str) {
        let jobs = &self.inner.jobs;
        jobs.start(gen_job);
        let ready = match self.generate(id, prompt, gen_job) {
            Ok(0) => {
                jobs.fail(gen_job, "every image failed to generate");
                return;
            }
            Ok(n) => n,
            Err(e) => {
                jobs.fail(gen_job, e.to_string());
                return;
            }
        };
        // successor jobs exist before their predecessor finishes, so the
        // pipeline never looks idle between steps
        let extracted = self.read(id, |s| s.extracted_prompts.contains(prompt)).unwrap_or(true);
        let ext_job = (!extracted).then(|| jobs.create(id, JobKind::Extraction, DEFAULT_SAMPLE_SIZE.min(ready) as u32));
        jobs.finish(gen_job);
        if let Some(ext_job) = ext_job {
            jobs.start(&ext_job);
            let r = self.extract(id, prompt, &ext_job);
            let label_job = self.prompt_label_job(id, prompt);
            self.end_job(&ext_job, r.as_ref().err());
            if let Some((job, pairs)) = label_job {
                let r = self.run_labeling(id, &job, &pairs);
                self.end_job(&job, r.as_ref().err());
            }
        } else if let Some((job, pairs)) = self.prompt_label_job(id, prompt) {
            let r = self.run_labeling(id, &job, &pairs);
            self.end_job(&job, r.as_ref().err());
        }
    }

    fn prompt_label_job(&self, id: &SessionId, prompt: &PromptId) -> Option<(String, Vec<Pair>)> {
        let pairs: Vec<Pair> = self
            .read(id, |s| {
                let index = s.image_prompt_index();
                s.labelable_pairs()
                    .into_iter()
                    .filter(|(i, _)| index.get(i) == Some(prompt))
                    .collect()
            })
            .ok()?;
        (!pairs.is_empty()).then(|| (self.inner.jobs.create(id, JobKind::Labeling, pairs.len() as u32), pairs))
    }

    /// Generates the prompt's pending images; returns how many are ready afterwards.
    fn generate(&self, id: &SessionId, prompt: &PromptId, job: &str) -> Result<usize> {
        let (text, pending, settled) = self.read(id, |s| {
            let text = s.prompt(prompt).map(|p| p.text.clone()).unwrap_or_default();
            let mut pending: Vec<(ImageId, u64)> = s
                .images_of(prompt)
                .filter(|i| i.status == ImageStatus::Pending)
                .map(|i| (i.id.clone(), i.seed))
                .collect();
            pending.sort_by_key(|p| p.1);
            let settled = s.images_of(prompt).filter(|i| i.status != ImageStatus::Pending).count();
            (text, pending, settled)
        })?;
        self.inner.jobs.advance_to(job, settled as u32);
        let runs = seed_runs(&pending, GENERATION_BATCH as usize);
        let results = parallel_map(&runs, self.inner.parallelism, |run| -> Result<()> {
            let outcome = {
                let _permit = self.inner.limiter.acquire();
                self.inner.providers.t2i.generate_images(&text, run.len() as u32, run[0].1)
            };
            let per_image: Vec<Result<Vec<u8>, String>> = match outcome {
                Ok(images) if images.len() == run.len() => images,
                Ok(images) => {
                    let msg = format!("generator returned {} images for {}", images.len(), run.len());
                    run.iter().map(|_| Err(msg.clone())).collect()
                }
                Err(e) => run.iter().map(|_| Err(e.to_string())).collect(),
            };
            for ((image, _), result) in run.iter().zip(&per_image) {
                if let Ok(bytes) = result {
                    self.inner.store.write_image(id, image, bytes)?;
                }
            }
            self.mutate(id, Save::All, |s| {
                for ((image, _), result) in run.iter().zip(&per_image) {
                    match result {
                        Ok(_) => s.mark_image_ready(image)?,
                        Err(e) => s.mark_image_failed(image, e)?,
                    }
                }
                Ok(())
            })?;
            self.inner.jobs.advance(job, run.len() as u32);
            Ok(())
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
        self.read(id, |s| s.images_of(prompt).filter(|i| i.status == ImageStatus::Ready).count())
    }

    /// Extracts scene graphs from a seeded sample of the prompt's ready images and merges them.
    fn extract(&self, id: &SessionId, prompt: &PromptId, job: &str) -> Result<()> {
        let (ready, seed) = self.read(id, |s| {
            let ready: Vec<ImageId> = s
                .images_of(prompt)
                .filter(|i| i.status == ImageStatus::Ready)
                .map(|i| i.id.clone())
                .collect();
            (ready, s.seed)
        })?;
        let sample = sample_for_extraction(&ready, seed, DEFAULT_SAMPLE_SIZE)?;
        let vision = Limited {
            inner: SessionVision::new(&*self.inner.providers.vlm, self.inner.store.images_dir(id)),
            limiter: &self.inner.limiter,
        };
        let parsed: Vec<Option<PerImageGraph>> = parallel_map(&sample, self.inner.parallelism, |image| {
            let request = VisionRequest {
                kind: VisionKind::Extraction,
                image_ids: vec![image.clone()],
                instruction: EXTRACTION_INSTRUCTION.into(),
            };
            let result = vision
                .vision_query(&request)
                .map_err(|e| e.to_string())
                .and_then(|raw| {
                    parse_extraction(&RawExtraction {
                        image_id: image.clone(),
                        raw_text: raw,
                    })
                    .map_err(|e| e.to_string())
                });
            self.inner.jobs.advance(job, 1);
            match result {
                Ok(g) => Some(g),
                Err(e) => {
                    log::warn!("extraction of {image} skipped: {e}");
                    None
                }
            }
        });
        let graphs: Vec<PerImageGraph> = parsed.into_iter().flatten().collect();
        if graphs.is_empty() {
            return Err(ProviderError::Failed(format!("no usable scene graph among {} sampled images", sample.len())).into());
        }
        self.mutate(id, Save::All, |s| Ok(s.merge_extractions(prompt, &graphs)?))
    }

    /// Labels `pairs`, persisting outcomes in small batches as they arrive.
    fn run_labeling(&self, id: &SessionId, job: &str, pairs: &[Pair]) -> Result<()> {
        self.inner.jobs.start(job);
        let criteria = self.read(id, |s| s.criteria.clone())?;
        let vision = Limited {
            inner: SessionVision::new(&*self.inner.providers.vlm, self.inner.store.images_dir(id)),
            limiter: &self.inner.limiter,
        };
        let batch_size = self.inner.parallelism;
        let mut batch: Vec<(Pair, LabelOutcome)> = Vec::new();
        let mut save_error: Option<ServiceError> = None;
        let mut flush = |batch: &mut Vec<(Pair, LabelOutcome)>| {
            if batch.is_empty() {
                return;
            }
            let n = batch.len() as u32;
            let items = std::mem::take(batch);
            if let Err(e) = self.mutate(id, Save::Labels, |s| {
                s.record_labels(items);
                Ok(())
            }) {
                save_error.get_or_insert(e);
            }
            self.inner.jobs.advance(job, n);
        };
        let result = label_pairs(&vision, &criteria, pairs, self.inner.parallelism, |pair, outcome| {
            batch.push((pair.clone(), outcome));
            if batch.len() >= batch_size {
                flush(&mut batch);
            }
        });
        flush(&mut batch);
        if let Some(e) = save_error {
            return Err(e);
        }
        result.map(|_| ()).map_err(|e| ServiceError::Provider(ProviderError::Unreachable(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service() -> (tempfile::TempDir, Service) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        (dir, Service::new(store, Providers::stub(), 4))
    }

    const WAIT: Duration = Duration::from_secs(20);

    #[test]
    fn seed_runs_split_on_gaps_and_size() {
        let p: Vec<(ImageId, u64)> = [1, 2, 3, 4, 5, 7, 8, 20]
            .iter()
            .map(|&s| (ImageId::new(format!("i{s}")), s))
            .collect();
        let runs: Vec<Vec<u64>> = seed_runs(&p, 4).iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
        assert_eq!(runs, vec![vec![1, 2, 3, 4], vec![5], vec![7, 8], vec![20]]);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u32> = (0..50).collect();
        assert_eq!(parallel_map(&v, 7, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 3, |x| *x).is_empty());
    }

    #[test]
    fn sessions_get_distinct_ids_and_recorded_seeds() {
        let (_d, svc) = service();
        let a = svc.create_session(Some(42)).unwrap();
        let b = svc.create_session(Some(42)).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!((a.seed, b.seed), (42, 42));
        let c = svc.create_session(None).unwrap();
        assert_eq!(svc.store().load(&c.id).unwrap().seed, c.seed);
    }

    #[test]
    fn unknown_session() {
        let (_d, svc) = service();
        assert!(matches!(svc.session(&"missing".into()), Err(ServiceError::UnknownSession(_))));
        assert!(matches!(svc.add_prompt(&"missing".into(), "x", 1), Err(ServiceError::UnknownSession(_))));
    }

    #[test]
    fn prompt_pipeline_runs_to_completion() {
        let (_d, svc) = service();
        let s = svc.create_session(Some(42)).unwrap();
        let (p, job) = svc.add_prompt(&s.id, "A cinematic photo of a doctor", 30).unwrap();
        assert_eq!(p.color_index, 0);
        assert_eq!(svc.job(&job).unwrap().progress.total, 30);
        assert!(svc.wait_idle(WAIT));
        let state = svc.session(&s.id).unwrap();
        assert_eq!(state.ready_images().count(), 30);
        assert!(state.extracted_prompts.contains(&p.id));
        assert!(state.graph.contains(&NodePath::root("doctor").unwrap()));
        assert_eq!(state.graph.image_ids().len(), 12);
        let (p2, _) = svc.add_prompt(&s.id, "A cinematic photo of a nurse", 4).unwrap();
        assert_eq!(p2.color_index, 1);
        assert!(matches!(
            svc.add_prompt(&s.id, "", 10),
            Err(ServiceError::Domain(vipera_core::Error::InvalidPrompt(_)))
        ));
        assert!(svc.wait_idle(WAIT));
        let jobs = svc.jobs(&s.id).unwrap();
        assert!(jobs.iter().all(|j| j.status == crate::jobs::JobStatus::Done), "{jobs:?}");
    }

    #[test]
    fn criteria_label_ready_images_and_new_prompts() {
        let (_d, svc) = service();
        let s = svc.create_session(Some(3)).unwrap();
        svc.add_prompt(&s.id, "a doctor", 6).unwrap();
        assert!(svc.wait_idle(WAIT));
        let doctor = vec!["doctor".to_string()];
        let (c, job) = svc.add_criterion(&s.id, &doctor, "gender", &["male".into(), "female".into()]).unwrap();
        assert_eq!(svc.job(&job).unwrap().progress.total, 6);
        assert!(matches!(
            svc.add_criterion(&s.id, &doctor, "Gender", &["male".into(), "female".into()]),
            Err(ServiceError::Domain(vipera_core::Error::DuplicateCriterion { .. }))
        ));
        assert!(matches!(
            svc.add_criterion(&s.id, &doctor, "age", &["old".into()]),
            Err(ServiceError::Domain(vipera_core::Error::InvalidCandidates(_)))
        ));
        assert!(svc.wait_idle(WAIT));
        assert_eq!(svc.distribution(&s.id, &c.id).unwrap().total(), 6);
        svc.add_prompt(&s.id, "a nurse", 5).unwrap();
        assert!(svc.wait_idle(WAIT));
        assert_eq!(svc.distribution(&s.id, &c.id).unwrap().total(), 11);
        let first = svc.images(&s.id, None).unwrap()[0].id.clone();
        let labels = svc.image_labels(&s.id, &first).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(svc.projection(&s.id).unwrap().points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
        svc.delete_criterion(&s.id, &c.id).unwrap();
        assert!(svc.session(&s.id).unwrap().label_table.is_empty());
        assert!(svc.store().load(&s.id).unwrap().violations().is_empty());
    }

    #[test]
    fn suggestions_flow() {
        let (_d, svc) = service();
        let s = svc.create_session(Some(42)).unwrap();
        svc.add_prompt(&s.id, "A cinematic photo of a doctor", 8).unwrap();
        assert!(svc.wait_idle(WAIT));
        let prompts = svc.suggest_prompts(&s.id).unwrap();
        assert!(!prompts.is_empty());
        // refreshing returns the same pending records
        let again = svc.suggest_prompts(&s.id).unwrap();
        assert_eq!(prompts.iter().map(|r| &r.id).collect::<Vec<_>>(), again.iter().map(|r| &r.id).collect::<Vec<_>>());
        let nurse = prompts
            .iter()
            .find(|r| matches!(&r.suggestion, Suggestion::Prompt(p) if p.replacement == "nurse"))
            .unwrap();
        let (p, _) = svc.adopt_suggestion(&s.id, &nurse.id, 5).unwrap();
        assert_eq!(p.text, "A cinematic photo of a nurse");
        assert!(p.parent_prompt_id.is_some());
        assert!(matches!(
            svc.adopt_suggestion(&s.id, &nurse.id, 5),
            Err(ServiceError::Domain(vipera_core::Error::SuggestionResolved(_)))
        ));
        assert!(svc.wait_idle(WAIT));
        let criteria = svc.suggest_criteria(&s.id).unwrap();
        assert!(!criteria.is_empty());
        let first = &criteria[0];
        assert!(matches!(
            svc.adopt_suggestion(&s.id, &first.id, 5),
            Err(ServiceError::Domain(vipera_core::Error::WrongSuggestionKind(_)))
        ));
        let (c, _) = svc.accept_suggestion(&s.id, &first.id).unwrap();
        assert_eq!(c.origin, CriterionOrigin::Suggestion);
        if let Some(second) = criteria.get(1) {
            assert_eq!(svc.dismiss_suggestion(&s.id, &second.id).unwrap().status, SuggestionStatus::Dismissed);
        }
        assert!(svc.wait_idle(WAIT));
        assert!(svc.session(&s.id).unwrap().violations().is_empty());
    }

    #[test]
    fn report_is_stable_and_written() {
        let (_d, svc) = service();
        let s = svc.create_session(Some(1)).unwrap();
        svc.add_prompt(&s.id, "a doctor", 3).unwrap();
        assert!(svc.wait_idle(WAIT));
        let img = svc.images(&s.id, None).unwrap()[0].id.clone();
        svc.add_bookmark(&s.id, BookmarkKind::Image, img.as_str(), "look").unwrap();
        svc.add_bookmark(&s.id, BookmarkKind::Note, "", "nurses skew female").unwrap();
        let a = svc.export_report(&s.id).unwrap();
        let b = svc.export_report(&s.id).unwrap();
        assert_eq!(a, b);
        assert!(a.markdown_text.contains("nurses skew female"));
        let on_disk = std::fs::read_to_string(svc.store().report_path(&s.id)).unwrap();
        assert_eq!(on_disk, a.markdown_text);
        assert!(matches!(
            svc.add_bookmark(&s.id, BookmarkKind::Chart, "c9999", ""),
            Err(ServiceError::Domain(vipera_core::Error::UnknownBookmarkTarget(_)))
        ));
    }

    #[test]
    fn reload_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let svc = Service::new(Store::open(dir.path()).unwrap(), Providers::stub(), 2);
            let s = svc.create_session(Some(9)).unwrap();
            // write a prompt whose images were never generated
            svc.mutate(&s.id, Save::All, |s| Ok(s.add_prompt("a doctor", 5, None, 0)?)).unwrap();
            s.id
        };
        let svc = Service::new(Store::open(dir.path()).unwrap(), Providers::stub(), 2);
        assert_eq!(svc.session(&id).unwrap().ready_images().count(), 0);
        assert_eq!(svc.resume_all().unwrap(), 1);
        assert!(svc.wait_idle(WAIT));
        let s = svc.session(&id).unwrap();
        assert_eq!(s.ready_images().count(), 5);
        assert!(!s.graph.is_empty());
        assert!(svc.resume(&id).unwrap().is_empty());
    }

    #[test]
    fn image_access_rules() {
        let (_d, svc) = service();
        let s = svc.create_session(Some(1)).unwrap();
        svc.add_prompt(&s.id, "a doctor", 2).unwrap();
        assert!(svc.wait_idle(WAIT));
        let img = svc.images(&s.id, None).unwrap()[0].clone();
        let bytes = svc.image_file(&s.id, &img.id).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(svc.image_file(&s.id, &"img-99999".into()).is_err());
        assert!(svc.images(&s.id, Some(&"p9999".into())).is_err());
        assert_eq!(svc.images(&s.id, Some(&img.prompt_id)).unwrap().len(), 2);
    }
}
