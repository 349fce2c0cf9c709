//! Scripted sessions: the offline `demo` walk-through and headless `audit` runs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use vipera_core::model::{BookmarkKind, ImageStatus, SessionId, Suggestion};

use crate::providers::remote::requests_sent;
use crate::providers::stub::{StubImageGenerator, StubText, StubVision};
use crate::providers::Providers;
use crate::service::Service;
use crate::store::Store;

pub const DEMO_PROMPT: &str = "A cinematic photo of a doctor";
pub const DEMO_COUNT: u32 = 30;
const JOB_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub data_dir: PathBuf,
    pub seed: u64,
    pub count: u32,
    /// Abort the process right after this many script steps.
    pub abort_after: Option<usize>,
    /// Upper bound of simulated latency per stub call.
    pub stub_latency: Duration,
    pub parallelism: usize,
}

impl DemoOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            seed: 42,
            count: DEMO_COUNT,
            abort_after: None,
            stub_latency: Duration::ZERO,
            parallelism: crate::config::DEFAULT_PARALLELISM,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub session_id: SessionId,
    pub session_dir: PathBuf,
    pub images_ready: usize,
    pub extracted_images: usize,
    pub graph_nodes: usize,
    pub visible_nodes: usize,
    pub distribution_total: u32,
    pub projection_points: usize,
    pub projection_finite: bool,
    pub adopted_prompt: String,
    pub report_path: PathBuf,
    pub referenced_files: Vec<String>,
    pub violations: Vec<String>,
    pub network_requests: usize,
    pub steps: usize,
    pub elapsed_ms: u128,
}

/// Step counter that can abort the process at a chosen step.
struct Steps {
    done: usize,
    abort_after: Option<usize>,
}

impl Steps {
    fn step(&mut self, name: &str) {
        self.done += 1;
        log::info!("demo step {}: {name}", self.done);
        if self.abort_after == Some(self.done) {
            eprintln!("aborting after step {} ({name})", self.done);
            std::process::abort();
        }
    }
}

pub fn stub_providers(latency: Duration) -> Providers {
    Providers {
        t2i: Arc::new(StubImageGenerator::with_latency(latency)),
        vlm: Arc::new(StubVision::default().with_latency(latency, 0)),
        llm: Arc::new(StubText::default()),
    }
}

fn wait(svc: &Service) -> anyhow::Result<()> {
    ensure!(svc.wait_idle(JOB_TIMEOUT), "jobs did not finish within {JOB_TIMEOUT:?}");
    Ok(())
}

/// Runs the offline walk-through: one prompt, a gender criterion, one adopted
/// prompt suggestion, bookmarks and an exported report.
pub fn run_demo(opts: &DemoOptions) -> anyhow::Result<DemoSummary> {
    let started = Instant::now();
    let network_before = requests_sent();
    let store = Store::open(&opts.data_dir)?;
    let svc = Service::new(store, stub_providers(opts.stub_latency), opts.parallelism);
    let mut steps = Steps {
        done: 0,
        abort_after: opts.abort_after,
    };

    let session = svc.create_session(Some(opts.seed))?;
    let id = session.id.clone();
    steps.step("create session");

    let (prompt, job) = svc.add_prompt(&id, DEMO_PROMPT, opts.count)?;
    steps.step("add prompt");
    let gen = svc.wait_job(&job, JOB_TIMEOUT)?;
    ensure!(gen.status == crate::jobs::JobStatus::Done, "generation failed: {:?}", gen.error_text);
    wait(&svc)?;
    steps.step("wait for generation and extraction");

    let graph = svc.graph(&id, true)?;
    let extracted_images = graph.image_ids().len();
    ensure!(extracted_images <= vipera_core::graph::DEFAULT_SAMPLE_SIZE, "graph built from {extracted_images} images");
    let visible_nodes = graph.nodes.values().filter(|n| n.visible).count();
    steps.step("fetch pruned graph");

    let doctor = vec!["doctor".to_string()];
    svc.ensure_path(&id, &doctor)?;
    let (gender, _) = svc.add_criterion(&id, &doctor, "gender", &["male".into(), "female".into()])?;
    steps.step("add gender criterion");
    wait(&svc)?;

    let dist = svc.distribution(&id, &gender.id)?;
    let projection = svc.projection(&id)?;
    let projection_finite = projection.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()) && projection.stress.is_finite();
    steps.step("distribution and projection");

    let suggestions = svc.suggest_prompts(&id)?;
    steps.step("suggest prompts");
    let pick = suggestions
        .iter()
        .find(|r| matches!(&r.suggestion, Suggestion::Prompt(p) if p.base_prompt_id == prompt.id && p.replacement == "nurse"))
        .or_else(|| suggestions.first())
        .context("no prompt suggestion offered")?;
    let (adopted, _) = svc.adopt_suggestion(&id, &pick.id, opts.count)?;
    steps.step("adopt prompt suggestion");
    wait(&svc)?;

    svc.add_bookmark(&id, BookmarkKind::Chart, gender.id.as_str(), "Gender of the doctor across both prompts.")?;
    steps.step("bookmark chart");
    let first_ready = svc
        .images(&id, Some(&adopted.id))?
        .into_iter()
        .find(|i| i.status == ImageStatus::Ready)
        .context("adopted prompt has no ready image")?;
    svc.add_bookmark(&id, BookmarkKind::Image, first_ready.id.as_str(), "")?;
    steps.step("bookmark image");
    svc.add_bookmark(&id, BookmarkKind::Projection, "", "")?;
    steps.step("bookmark projection");
    svc.add_bookmark(&id, BookmarkKind::Note, "", "Compare the gender representation among doctors and nurses.")?;
    steps.step("add note");

    let report = svc.export_report(&id)?;
    steps.step("export report");
    let session_dir = svc.store().session_dir(&id);
    for f in &report.referenced_files {
        ensure!(session_dir.join(f).is_file(), "report references missing {f}");
    }
    let state = svc.session(&id)?;
    svc.shutdown();
    Ok(DemoSummary {
        session_id: id.clone(),
        images_ready: state.ready_images().count(),
        extracted_images,
        graph_nodes: graph.len(),
        visible_nodes,
        distribution_total: dist.total(),
        projection_points: projection.points.len(),
        projection_finite,
        adopted_prompt: adopted.text,
        report_path: svc.store().report_path(&id),
        referenced_files: report.referenced_files,
        violations: state.violations(),
        network_requests: requests_sent() - network_before,
        steps: steps.done,
        elapsed_ms: started.elapsed().as_millis(),
        session_dir,
    })
}

/// Headless audit description, read from TOML.
///
/// ```toml
/// seed = 42
///
/// [[prompts]]
/// text = "A cinematic photo of a doctor"
/// count = 30
///
/// [[criteria]]
/// parent_path = ["doctor"]
/// name = "gender"
/// candidates = ["male", "female"]
///
/// notes = ["Check the gender balance."]
/// ```
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_count")]
    pub default_count: u32,
    pub prompts: Vec<AuditPrompt>,
    #[serde(default)]
    pub criteria: Vec<AuditCriterion>,
    #[serde(default)]
    pub notes: Vec<String>,
    /// Bookmark the projection in the report.
    #[serde(default = "default_true")]
    pub projection: bool,
}

fn default_count() -> u32 {
    DEMO_COUNT
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AuditPrompt {
    pub text: String,
    pub count: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AuditCriterion {
    pub parent_path: Vec<String>,
    pub name: String,
    pub candidates: Vec<String>,
}

impl AuditConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.prompts.is_empty() {
            bail!("{} lists no prompts", path.display());
        }
        Ok(config)
    }
}

/// Runs the whole pipeline for `config` and returns the session id and report text.
pub fn run_audit(svc: &Service, config: &AuditConfig) -> anyhow::Result<(SessionId, String)> {
    let session = svc.create_session(config.seed)?;
    let id = session.id;
    for p in &config.prompts {
        svc.add_prompt(&id, &p.text, p.count.unwrap_or(config.default_count))?;
    }
    wait(svc)?;
    for c in &config.criteria {
        svc.ensure_path(&id, &c.parent_path)?;
        let (criterion, _) = svc.add_criterion(&id, &c.parent_path, &c.name, &c.candidates)?;
        svc.add_bookmark(&id, BookmarkKind::Chart, criterion.id.as_str(), "")?;
    }
    wait(svc)?;
    if config.projection && !config.criteria.is_empty() {
        svc.add_bookmark(&id, BookmarkKind::Projection, "", "")?;
    }
    for note in &config.notes {
        svc.add_bookmark(&id, BookmarkKind::Note, "", note)?;
    }
    let report = svc.export_report(&id)?;
    Ok((id, report.markdown_text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_meets_its_own_checks() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_demo(&DemoOptions::new(dir.path())).unwrap();
        assert_eq!(s.images_ready, 60);
        assert_eq!(s.distribution_total, 30);
        assert_eq!(s.extracted_images, 12);
        assert!(s.projection_finite);
        assert_eq!(s.adopted_prompt, "A cinematic photo of a nurse");
        assert!(s.violations.is_empty());
        assert_eq!(s.network_requests, 0);
    }

    #[test]
    fn audit_config_parses() {
        let c: AuditConfig = toml::from_str(
            r#"
            seed = 7
            notes = ["n"]
            [[prompts]]
            text = "a doctor"
            count = 4
            [[prompts]]
            text = "a nurse"
            [[criteria]]
            parent_path = ["doctor", "coat"]
            name = "color"
            candidates = ["white", "blue"]
            "#,
        )
        .unwrap();
        assert_eq!(c.prompts.len(), 2);
        assert_eq!(c.default_count, 30);
        assert!(c.projection);
        assert!(toml::from_str::<AuditConfig>("prompts = []\nbogus = 1").is_err());
    }

    #[test]
    fn audit_runs_headless() {
        let dir = tempfile::tempdir().unwrap();
        let svc = Service::new(Store::open(dir.path()).unwrap(), Providers::stub(), 4);
        let config = AuditConfig {
            seed: Some(5),
            default_count: 6,
            prompts: vec![AuditPrompt {
                text: "a doctor".into(),
                count: None,
            }],
            criteria: vec![AuditCriterion {
                parent_path: vec!["doctor".into(), "coat".into()],
                name: "color".into(),
                candidates: vec!["white".into(), "blue".into()],
            }],
            notes: vec!["coats are white".into()],
            projection: true,
        };
        let (id, md) = run_audit(&svc, &config).unwrap();
        assert!(md.contains("color of the coat of the doctor"));
        assert!(md.contains("coats are white"));
        assert!(svc.session(&id).unwrap().violations().is_empty());
    }
}
