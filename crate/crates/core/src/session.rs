//! Pure state transitions on an [`AuditSession`].
//!
//! The service layer wraps these with locking, persistence and job scheduling;
//! nothing here performs IO.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{self, DEFAULT_MAX_CHILDREN};
use crate::labeling::{self, StackedBarData};
use crate::model::*;
use crate::name::{assign_color_index, normalize_name};
use crate::rng::{derive_seed, TAG_GENERATION};

/// Relative location of an image's bytes inside the session directory.
pub fn image_file_ref(id: &ImageId) -> String {
    format!("images/{id}.png")
}

impl AuditSession {
    pub fn new(id: SessionId, seed: u64, created_at: Timestamp) -> Self {
        Self {
            id,
            seed,
            created_at,
            prompts: Vec::new(),
            images: Vec::new(),
            graph: AggregatedSceneGraph::default(),
            criteria: Vec::new(),
            label_table: LabelTable::default(),
            bookmarks: Vec::new(),
            suggestions_log: Vec::new(),
            selected_prompt_ids: BTreeSet::new(),
            extracted_prompts: BTreeSet::new(),
            counters: IdCounters::default(),
        }
    }

    pub fn prompt(&self, id: &PromptId) -> Option<&Prompt> {
        self.prompts.iter().find(|p| &p.id == id)
    }

    /// Prompts that have not been deleted, in creation order.
    pub fn active_prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter().filter(|p| !p.deleted)
    }

    pub fn image(&self, id: &ImageId) -> Option<&GeneratedImage> {
        self.images.iter().find(|i| &i.id == id)
    }

    fn image_mut(&mut self, id: &ImageId) -> Result<&mut GeneratedImage> {
        self.images
            .iter_mut()
            .find(|i| &i.id == id)
            .ok_or_else(|| Error::UnknownImage(id.clone()))
    }

    pub fn criterion(&self, id: &CriterionId) -> Option<&Criterion> {
        self.criteria.iter().find(|c| &c.id == id)
    }

    pub fn images_of<'a>(&'a self, prompt: &'a PromptId) -> impl Iterator<Item = &'a GeneratedImage> + 'a {
        self.images.iter().filter(move |i| &i.prompt_id == prompt)
    }

    pub fn ready_images(&self) -> impl Iterator<Item = &GeneratedImage> {
        self.images.iter().filter(|i| i.status == ImageStatus::Ready)
    }

    pub fn image_prompt_index(&self) -> BTreeMap<ImageId, PromptId> {
        self.images
            .iter()
            .map(|i| (i.id.clone(), i.prompt_id.clone()))
            .collect()
    }

    /// All prompt ids in creation order.
    pub fn prompt_order(&self) -> Vec<PromptId> {
        self.prompts.iter().map(|p| p.id.clone()).collect()
    }

    /// Base generation seed of a prompt; image `i` uses `base + i`.
    pub fn generation_seed(&self, prompt: &PromptId) -> u64 {
        derive_seed(self.seed, &format!("{TAG_GENERATION}:{prompt}"))
    }

    /// Creates a prompt with `count` pending images and selects it.
    pub fn add_prompt(
        &mut self,
        text: &str,
        count: u32,
        parent: Option<PromptId>,
        now: Timestamp,
    ) -> Result<PromptId> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::InvalidPrompt("prompt text is empty"));
        }
        if count == 0 {
            return Err(Error::InvalidPrompt("image count must be positive"));
        }
        if let Some(parent) = &parent {
            if self.prompt(parent).is_none() {
                return Err(Error::UnknownPrompt(parent.clone()));
            }
        }
        let taken: BTreeSet<u32> = self.active_prompts().map(|p| p.color_index).collect();
        self.counters.prompt += 1;
        let id = PromptId::new(format!("p{:04}", self.counters.prompt));
        self.prompts.push(Prompt {
            id: id.clone(),
            text: text.into(),
            color_index: assign_color_index(&taken),
            created_at: now,
            parent_prompt_id: parent,
            requested_count: count,
            deleted: false,
        });
        let base = self.generation_seed(&id);
        for i in 0..count {
            self.counters.image += 1;
            let image_id = ImageId::new(format!("img-{:05}", self.counters.image));
            self.images.push(GeneratedImage {
                file_ref: image_file_ref(&image_id),
                id: image_id,
                prompt_id: id.clone(),
                seed: base.wrapping_add(u64::from(i)),
                status: ImageStatus::Pending,
                error_text: None,
            });
        }
        self.selected_prompt_ids.insert(id.clone());
        Ok(id)
    }

    /// Soft-deletes a prompt: it leaves the selection and frees its color slot.
    pub fn delete_prompt(&mut self, id: &PromptId) -> Result<()> {
        let prompt = self
            .prompts
            .iter_mut()
            .find(|p| &p.id == id && !p.deleted)
            .ok_or_else(|| Error::UnknownPrompt(id.clone()))?;
        prompt.deleted = true;
        self.selected_prompt_ids.remove(id);
        Ok(())
    }

    pub fn mark_image_ready(&mut self, id: &ImageId) -> Result<()> {
        let image = self.image_mut(id)?;
        image.status = ImageStatus::Ready;
        image.error_text = None;
        Ok(())
    }

    pub fn mark_image_failed(&mut self, id: &ImageId, error: &str) -> Result<()> {
        let image = self.image_mut(id)?;
        image.status = ImageStatus::Failed;
        image.error_text = Some(error.into());
        Ok(())
    }

    /// Merges a prompt's extracted sample into the graph and re-prunes.
    pub fn merge_extractions(&mut self, prompt: &PromptId, graphs: &[PerImageGraph]) -> Result<()> {
        let index = self.image_prompt_index();
        let mut merged = self.graph.clone();
        graph::merge_into(&mut merged, graphs, &index)?;
        self.graph = graph::prune_graph(&merged, DEFAULT_MAX_CHILDREN);
        self.extracted_prompts.insert(prompt.clone());
        Ok(())
    }

    /// Adds a user object node, at the root level when `parent` is `None`.
    pub fn add_user_node(&mut self, parent: Option<&NodePath>, name: &str) -> Result<NodePath> {
        let updated = match parent {
            Some(parent) => graph::add_user_node(&self.graph, parent, name)?,
            None => graph::add_user_root(&self.graph, name)?,
        };
        let path = match parent {
            Some(parent) => parent.child(name)?,
            None => NodePath::root(name)?,
        };
        self.graph = graph::prune_graph(&updated, DEFAULT_MAX_CHILDREN);
        Ok(path)
    }

    /// Makes sure every prefix of `path` exists, adding user nodes as needed.
    pub fn ensure_path(&mut self, path: &NodePath) -> Result<()> {
        let mut parent: Option<NodePath> = None;
        for segment in path.segments() {
            let next = match &parent {
                Some(p) => p.child(segment)?,
                None => NodePath::root(segment)?,
            };
            match self.graph.get(&next) {
                Some(node) if node.kind == NodeKind::Object => {}
                Some(_) => return Err(Error::UnknownParent(next)),
                None => {
                    self.add_user_node(parent.as_ref(), segment)?;
                }
            }
            parent = Some(next);
        }
        Ok(())
    }

    pub fn add_criterion<I, S>(
        &mut self,
        parent_path: &NodePath,
        name: &str,
        candidates: I,
        origin: CriterionOrigin,
    ) -> Result<CriterionId>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        match self.graph.get(parent_path) {
            Some(node) if node.kind == NodeKind::Object => {}
            _ => return Err(Error::UnknownParent(parent_path.clone())),
        }
        let name = normalize_name(name)?;
        if self
            .criteria
            .iter()
            .any(|c| &c.parent_path == parent_path && c.name == name)
        {
            return Err(Error::DuplicateCriterion {
                parent: parent_path.clone(),
                name,
            });
        }
        let candidates = Criterion::normalize_candidates(candidates)?;
        self.counters.criterion += 1;
        let id = CriterionId::new(format!("c{:04}", self.counters.criterion));
        self.criteria.push(Criterion {
            id: id.clone(),
            parent_path: parent_path.clone(),
            name,
            candidates,
            origin,
        });
        Ok(id)
    }

    /// Drops a criterion, its labels and chart bookmarks pointing at it.
    pub fn remove_criterion(&mut self, id: &CriterionId) -> Result<()> {
        let before = self.criteria.len();
        self.criteria.retain(|c| &c.id != id);
        if self.criteria.len() == before {
            return Err(Error::UnknownCriterion(id.clone()));
        }
        self.label_table.remove_criterion(id);
        self.bookmarks
            .retain(|b| !(b.kind == BookmarkKind::Chart && b.target_ref == id.as_str()));
        Ok(())
    }

    /// Pairs still owed a label: every non-failed image × every criterion.
    pub fn pending_label_pairs(&self) -> Vec<(ImageId, CriterionId)> {
        let images: Vec<ImageId> = self
            .images
            .iter()
            .filter(|i| i.status != ImageStatus::Failed)
            .map(|i| i.id.clone())
            .collect();
        labeling::pending_pairs(&self.label_table, &images, &self.criteria)
    }

    /// Pending pairs whose image is ready for labeling now.
    pub fn labelable_pairs(&self) -> Vec<(ImageId, CriterionId)> {
        let images: Vec<ImageId> = self.ready_images().map(|i| i.id.clone()).collect();
        labeling::pending_pairs(&self.label_table, &images, &self.criteria)
    }

    /// Stores outcomes whose image and criterion still exist; returns how many were stored.
    pub fn record_labels<I>(&mut self, outcomes: I) -> usize
    where
        I: IntoIterator<Item = ((ImageId, CriterionId), LabelOutcome)>,
    {
        let mut stored = 0;
        for ((image, criterion), outcome) in outcomes {
            let Some(c) = self.criterion(&criterion) else {
                continue;
            };
            let outcome = match outcome {
                LabelOutcome::Label(i) if i >= c.candidates.len() => LabelOutcome::Unknown,
                o => o,
            };
            if self.image(&image).is_none() {
                continue;
            }
            self.label_table.insert(image, criterion, outcome);
            stored += 1;
        }
        stored
    }

    pub fn set_selection(&mut self, ids: BTreeSet<PromptId>) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySelection);
        }
        for id in &ids {
            match self.prompt(id) {
                Some(p) if !p.deleted => {}
                _ => return Err(Error::UnknownPrompt(id.clone())),
            }
        }
        self.selected_prompt_ids = ids;
        Ok(())
    }

    /// The stored graph restricted to the current selection. With `pruned == false`
    /// every node is reported visible.
    pub fn filtered_graph(&self, pruned: bool) -> AggregatedSceneGraph {
        let index = self.image_prompt_index();
        let mut g = if self.selected_prompt_ids.is_empty() {
            // nothing selected yet: nothing to count
            let mut g = self.graph.clone();
            for node in g.nodes.values_mut() {
                node.stats = NodeStats::default();
                node.values.clear();
            }
            g
        } else {
            graph::filter_by_prompts(&self.graph, &self.selected_prompt_ids, &index)
                .unwrap_or_else(|_| self.graph.clone())
        };
        if !pruned {
            g.nodes.values_mut().for_each(|n| n.visible = true);
        }
        g
    }

    pub fn distribution(&self, criterion: &CriterionId) -> Result<StackedBarData> {
        let c = self
            .criterion(criterion)
            .ok_or_else(|| Error::UnknownCriterion(criterion.clone()))?;
        Ok(labeling::distribution(
            &self.label_table,
            c,
            &self.selected_prompt_ids,
            &self.image_prompt_index(),
            &self.prompt_order(),
        ))
    }

    /// Number of table entries for `criterion` on images of selected prompts.
    pub fn labeled_count(&self, criterion: &CriterionId) -> usize {
        let index = self.image_prompt_index();
        self.label_table
            .for_criterion(criterion)
            .filter(|(i, _)| index.get(*i).is_some_and(|p| self.selected_prompt_ids.contains(p)))
            .count()
    }

    pub fn add_bookmark(
        &mut self,
        kind: BookmarkKind,
        target_ref: &str,
        note_text: &str,
        now: Timestamp,
    ) -> Result<BookmarkId> {
        let resolves = match kind {
            BookmarkKind::Image => self.image(&ImageId::from(target_ref)).is_some(),
            BookmarkKind::Chart => self.criterion(&CriterionId::from(target_ref)).is_some(),
            BookmarkKind::Projection | BookmarkKind::Note => true,
        };
        if !resolves {
            return Err(Error::UnknownBookmarkTarget(target_ref.into()));
        }
        self.counters.bookmark += 1;
        let id = BookmarkId::new(format!("b{:04}", self.counters.bookmark));
        let target_ref = match kind {
            BookmarkKind::Image | BookmarkKind::Chart => target_ref.into(),
            BookmarkKind::Projection | BookmarkKind::Note => String::new(),
        };
        self.bookmarks.push(Bookmark {
            id: id.clone(),
            kind,
            target_ref,
            note_text: note_text.into(),
            created_at: now,
        });
        Ok(id)
    }

    /// Appends suggestions to the log as pending and returns their ids.
    pub fn log_suggestions<I>(&mut self, suggestions: I, now: Timestamp) -> Vec<SuggestionId>
    where
        I: IntoIterator<Item = Suggestion>,
    {
        let mut ids = Vec::new();
        for suggestion in suggestions {
            self.counters.suggestion += 1;
            let id = SuggestionId::new(format!("s{:04}", self.counters.suggestion));
            self.suggestions_log.push(SuggestionRecord {
                id: id.clone(),
                created_at: now,
                status: SuggestionStatus::Pending,
                suggestion,
            });
            ids.push(id);
        }
        ids
    }

    pub fn suggestion(&self, id: &SuggestionId) -> Option<&SuggestionRecord> {
        self.suggestions_log.iter().find(|s| &s.id == id)
    }

    /// Pending suggestion by id, or the reason it cannot be acted on.
    pub fn pending_suggestion(&self, id: &SuggestionId) -> Result<&SuggestionRecord> {
        let record = self
            .suggestion(id)
            .ok_or_else(|| Error::UnknownSuggestion(id.clone()))?;
        if record.status != SuggestionStatus::Pending {
            return Err(Error::SuggestionResolved(id.clone()));
        }
        Ok(record)
    }

    pub fn resolve_suggestion(&mut self, id: &SuggestionId, status: SuggestionStatus) -> Result<()> {
        self.pending_suggestion(id)?;
        if let Some(record) = self.suggestions_log.iter_mut().find(|s| &s.id == id) {
            record.status = status;
        }
        Ok(())
    }

    /// Accepts a criterion suggestion, creating any missing parent nodes.
    pub fn accept_criterion_suggestion(&mut self, id: &SuggestionId) -> Result<CriterionId> {
        let record = self.pending_suggestion(id)?;
        let Suggestion::Criterion(s) = record.suggestion.clone() else {
            return Err(Error::WrongSuggestionKind(id.clone()));
        };
        let mut staged = self.clone();
        staged.ensure_path(&s.parent_path)?;
        let criterion = staged.add_criterion(&s.parent_path, &s.name, &s.candidates, CriterionOrigin::Suggestion)?;
        staged.resolve_suggestion(id, SuggestionStatus::Accepted)?;
        *self = staged;
        Ok(criterion)
    }

    /// Cross-reference and structural invariant violations; empty when consistent.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let prompt_ids: BTreeSet<&PromptId> = self.prompts.iter().map(|p| &p.id).collect();
        let image_ids: BTreeSet<&ImageId> = self.images.iter().map(|i| &i.id).collect();
        let criterion_ids: BTreeSet<&CriterionId> = self.criteria.iter().map(|c| &c.id).collect();
        if prompt_ids.len() != self.prompts.len() {
            out.push("duplicate prompt ids".into());
        }
        if image_ids.len() != self.images.len() {
            out.push("duplicate image ids".into());
        }
        if criterion_ids.len() != self.criteria.len() {
            out.push("duplicate criterion ids".into());
        }
        let mut colors = BTreeSet::new();
        for p in &self.prompts {
            if p.text.trim().is_empty() {
                out.push(format!("prompt {}: empty text", p.id));
            }
            if !p.deleted && !colors.insert(p.color_index) {
                out.push(format!("prompt {}: color slot {} reused", p.id, p.color_index));
            }
            if let Some(parent) = &p.parent_prompt_id {
                if !prompt_ids.contains(parent) {
                    out.push(format!("prompt {}: unknown parent {parent}", p.id));
                }
            }
        }
        for id in &self.selected_prompt_ids {
            if !prompt_ids.contains(id) {
                out.push(format!("selection: unknown prompt {id}"));
            }
        }
        for id in &self.extracted_prompts {
            if !prompt_ids.contains(id) {
                out.push(format!("extracted: unknown prompt {id}"));
            }
        }
        for i in &self.images {
            if !prompt_ids.contains(&i.prompt_id) {
                out.push(format!("image {}: unknown prompt {}", i.id, i.prompt_id));
            }
        }
        for c in &self.criteria {
            if Criterion::normalize_candidates(&c.candidates).as_ref() != Ok(&c.candidates) {
                out.push(format!("criterion {}: invalid candidates", c.id));
            }
            if !self.graph.contains(&c.parent_path) {
                out.push(format!("criterion {}: parent {} not in graph", c.id, c.parent_path));
            }
        }
        for ((image, criterion), outcome) in &self.label_table.entries {
            if !image_ids.contains(image) {
                out.push(format!("label: unknown image {image}"));
            }
            match self.criterion(criterion) {
                None => out.push(format!("label: unknown criterion {criterion}")),
                Some(c) => {
                    if let LabelOutcome::Label(i) = outcome {
                        if *i >= c.candidates.len() {
                            out.push(format!("label ({image}, {criterion}): candidate {i} out of range"));
                        }
                    }
                }
            }
        }
        out.extend(graph::graph_violations(&self.graph));
        for (path, node) in &self.graph.nodes {
            if let Some(missing) = node.stats.image_ids.iter().find(|i| !image_ids.contains(i)) {
                out.push(format!("graph {path}: unknown image {missing}"));
            }
            if let Some(missing) = node.stats.per_prompt_counts.keys().find(|p| !prompt_ids.contains(p)) {
                out.push(format!("graph {path}: unknown prompt {missing}"));
            }
        }
        for b in &self.bookmarks {
            let ok = match b.kind {
                BookmarkKind::Image => image_ids.contains(&ImageId::from(b.target_ref.as_str())),
                BookmarkKind::Chart => criterion_ids.contains(&CriterionId::from(b.target_ref.as_str())),
                BookmarkKind::Projection | BookmarkKind::Note => true,
            };
            if !ok {
                out.push(format!("bookmark {}: unresolved target {:?}", b.id, b.target_ref));
            }
        }
        for s in &self.suggestions_log {
            match &s.suggestion {
                Suggestion::Criterion(c) => {
                    for e in [&c.evidence.0, &c.evidence.1] {
                        if !image_ids.contains(e) {
                            out.push(format!("suggestion {}: unknown evidence image {e}", s.id));
                        }
                    }
                }
                Suggestion::Prompt(p) => {
                    if !prompt_ids.contains(&p.base_prompt_id) {
                        out.push(format!("suggestion {}: unknown base prompt {}", s.id, p.base_prompt_id));
                    }
                }
            }
        }
        out
    }
}
