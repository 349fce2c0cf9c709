//! Markdown audit report.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::labeling::StackedBarData;
use crate::model::{AuditSession, Bookmark, BookmarkKind, CriterionId, ImageId, PromptId};
use crate::projection::project;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub markdown_text: String,
    /// Image files the report links to, relative to the session directory.
    pub referenced_files: Vec<String>,
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

fn prompt_label(session: &AuditSession, id: &PromptId) -> String {
    session
        .prompt(id)
        .map_or_else(|| String::from(id.as_str()), |p| format!("{} ({})", p.text, p.id))
}

fn render_chart(out: &mut String, session: &AuditSession, data: &StackedBarData) {
    let prompts: Vec<&PromptId> = data
        .rows
        .first()
        .map(|r| r.segments.iter().map(|s| &s.prompt_id).collect())
        .unwrap_or_default();
    out.push_str("| Label |");
    for p in &prompts {
        let _ = write!(out, " {} |", cell(&prompt_label(session, p)));
    }
    out.push_str(" Total |\n|---|");
    for _ in &prompts {
        out.push_str("---:|");
    }
    out.push_str("---:|\n");
    for row in &data.rows {
        let _ = write!(out, "| {} |", cell(&row.label));
        for s in &row.segments {
            let _ = write!(out, " {} |", s.count);
        }
        let _ = writeln!(out, " {} |", row.total());
    }
}

fn render_image(out: &mut String, session: &AuditSession, image_id: &ImageId, files: &mut BTreeSet<String>) {
    let Some(image) = session.image(image_id) else {
        return;
    };
    let _ = writeln!(out, "![{}]({})\n", image.id, image.file_ref);
    files.insert(image.file_ref.clone());
    let _ = writeln!(out, "Prompt: {}\n", prompt_label(session, &image.prompt_id));
    if session.criteria.is_empty() {
        return;
    }
    out.push_str("| Criterion | Label |\n|---|---|\n");
    for c in &session.criteria {
        let label = session
            .label_table
            .get(&image.id, &c.id)
            .map_or("pending", |o| c.candidate_name(&o));
        let _ = writeln!(out, "| {} of the {} | {} |", cell(&c.name), cell(&c.parent_path.phrase()), cell(label));
    }
}

fn render_projection(out: &mut String, session: &AuditSession) {
    match project(session) {
        Ok(scatter) => {
            let _ = writeln!(out, "Stress: {:.6}\n", scatter.stress);
            out.push_str("| Image | Prompt | x | y |\n|---|---|---:|---:|\n");
            for p in &scatter.points {
                let _ = writeln!(out, "| {} | {} | {:.6} | {:.6} |", p.image_id, p.prompt_id, p.x, p.y);
            }
        }
        Err(e) => {
            let _ = writeln!(out, "_Projection unavailable: {e}._");
        }
    }
}

fn render_bookmark(out: &mut String, session: &AuditSession, index: usize, b: &Bookmark, files: &mut BTreeSet<String>) {
    match b.kind {
        BookmarkKind::Image => {
            let _ = writeln!(out, "### {index}. Image {}\n", b.target_ref);
            render_image(out, session, &ImageId::from(b.target_ref.as_str()), files);
        }
        BookmarkKind::Chart => {
            let id = CriterionId::from(b.target_ref.as_str());
            let title = session
                .criterion(&id)
                .map_or_else(|| String::from(b.target_ref.as_str()), |c| format!("{} of the {}", c.name, c.parent_path.phrase()));
            let _ = writeln!(out, "### {index}. Chart: {title}\n");
            if let Ok(data) = session.distribution(&id) {
                render_chart(out, session, &data);
            }
        }
        BookmarkKind::Projection => {
            let _ = writeln!(out, "### {index}. Projection\n");
            render_projection(out, session);
        }
        BookmarkKind::Note => {
            let _ = writeln!(out, "### {index}. Note\n");
        }
    }
    if !b.note_text.is_empty() {
        if b.kind != BookmarkKind::Note {
            out.push('\n');
        }
        out.push_str(&b.note_text);
        out.push('\n');
    }
    out.push('\n');
}

/// Renders the session header and its bookmarks in chronological order.
pub fn render_report(session: &AuditSession) -> Report {
    let mut out = String::new();
    let mut files = BTreeSet::new();
    let _ = writeln!(out, "# Audit report\n");
    let _ = writeln!(out, "- Session: `{}`", session.id);
    let _ = writeln!(out, "- Seed: {}", session.seed);
    let _ = writeln!(out, "- Images: {}", session.images.len());
    let _ = writeln!(out, "- Criteria: {}\n", session.criteria.len());

    out.push_str("## Prompts\n\n| Id | Color | Prompt | Images | Derived from |\n|---|---:|---|---:|---|\n");
    for p in session.active_prompts() {
        let ready = session.images_of(&p.id).filter(|i| i.status == crate::model::ImageStatus::Ready).count();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {}/{} | {} |",
            p.id,
            p.color_index,
            cell(&p.text),
            ready,
            p.requested_count,
            p.parent_prompt_id.as_ref().map_or("", |id| id.as_str())
        );
    }
    out.push('\n');

    let mut bookmarks: Vec<&Bookmark> = session.bookmarks.iter().collect();
    bookmarks.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
    if !bookmarks.is_empty() {
        out.push_str("## Bookmarks\n\n");
        for (i, b) in bookmarks.iter().enumerate() {
            render_bookmark(&mut out, session, i + 1, b, &mut files);
        }
    }
    Report {
        markdown_text: out,
        referenced_files: files.into_iter().collect(),
    }
}
