//! Label queries, response parsing and label distributions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Criterion, CriterionId, ImageId, LabelOutcome, LabelTable, PromptId, ABSENT, UNKNOWN};
use crate::name::normalize_name;
use crate::provider::{VisionKind, VisionRequest};

/// Instruction asking the vision model to pick one candidate label.
pub fn build_label_query(criterion: &Criterion) -> String {
    let object = criterion.parent_path.phrase();
    let name = &criterion.name;
    let candidates = criterion.candidates.join(", ");
    format!(
        "Look at the {object} in this image and determine its {name}.\n\
         Answer with exactly one of the following labels: {candidates}.\n\
         If there is no {object} in the image, answer \"{ABSENT}\".\n\
         If the {name} cannot be determined, answer \"{UNKNOWN}\".\n\
         Reply with the label only."
    )
}

pub fn label_request(criterion: &Criterion, image: &ImageId) -> VisionRequest {
    VisionRequest {
        kind: VisionKind::Label {
            criterion: criterion.name.clone(),
            candidates: criterion.candidates.clone(),
        },
        image_ids: alloc::vec![image.clone()],
        instruction: build_label_query(criterion),
    }
}

/// `needle` occurs in `haystack` bounded by non-alphanumeric characters.
pub(crate) fn whole_word_positions(haystack: &[char], needle: &[char]) -> Vec<usize> {
    let mut out = Vec::new();
    if needle.is_empty() || needle.len() > haystack.len() {
        return out;
    }
    for start in 0..=haystack.len() - needle.len() {
        let end = start + needle.len();
        let matches = haystack[start..end]
            .iter()
            .zip(needle)
            .all(|(a, b)| a.to_lowercase().eq(b.to_lowercase()));
        if !matches {
            continue;
        }
        let left_ok = start == 0 || !haystack[start - 1].is_alphanumeric();
        let right_ok = end == haystack.len() || !haystack[end].is_alphanumeric();
        if left_ok && right_ok {
            out.push(start);
        }
    }
    out
}

/// Maps a free-text answer onto the criterion's closed label set.
pub fn parse_label_response(raw: &str, criterion: &Criterion) -> LabelOutcome {
    let stripped = raw.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`');
    let Ok(answer) = normalize_name(stripped) else {
        return LabelOutcome::Unknown;
    };
    let answer = answer.trim_matches(|c| c == '"' || c == '\'' || c == '`');
    if let Some(i) = criterion.candidates.iter().position(|c| c == answer) {
        return LabelOutcome::Label(i);
    }
    match answer {
        ABSENT => return LabelOutcome::Absent,
        UNKNOWN => return LabelOutcome::Unknown,
        _ => {}
    }
    let chars: Vec<char> = answer.chars().collect();
    let mut hits = criterion.candidates.iter().enumerate().filter(|(_, c)| {
        let needle: Vec<char> = c.chars().collect();
        !whole_word_positions(&chars, &needle).is_empty()
    });
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => LabelOutcome::Label(i),
        _ => LabelOutcome::Unknown,
    }
}

/// (image, criterion) pairs of `images` × `criteria` missing from `table`.
pub fn pending_pairs(table: &LabelTable, images: &[ImageId], criteria: &[Criterion]) -> Vec<(ImageId, CriterionId)> {
    let mut out = Vec::new();
    for image in images {
        for criterion in criteria {
            if !table.contains(image, &criterion.id) {
                out.push((image.clone(), criterion.id.clone()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarSegment {
    pub prompt_id: PromptId,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarRow {
    pub label: String,
    pub segments: Vec<BarSegment>,
}

impl BarRow {
    pub fn total(&self) -> u32 {
        self.segments.iter().map(|s| s.count).sum()
    }
}

/// Label counts for one criterion, split by prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedBarData {
    pub criterion_id: CriterionId,
    /// Candidates in order, then "absent", then "unknown".
    pub rows: Vec<BarRow>,
}

impl StackedBarData {
    pub fn total(&self) -> u32 {
        self.rows.iter().map(BarRow::total).sum()
    }

    pub fn count(&self, label: &str, prompt: &PromptId) -> u32 {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.segments.iter().find(|s| &s.prompt_id == prompt))
            .map_or(0, |s| s.count)
    }
}

/// Counts `criterion`'s entries by (label, prompt) over the selected prompts.
///
/// `prompt_order` lists prompts by creation time and fixes segment order.
pub fn distribution(
    table: &LabelTable,
    criterion: &Criterion,
    selected: &BTreeSet<PromptId>,
    image_index: &BTreeMap<ImageId, PromptId>,
    prompt_order: &[PromptId],
) -> StackedBarData {
    let prompts: Vec<&PromptId> = prompt_order.iter().filter(|p| selected.contains(*p)).collect();
    let slots = criterion.candidates.len() + 2;
    let mut counts: Vec<BTreeMap<&PromptId, u32>> = (0..slots).map(|_| BTreeMap::new()).collect();
    for (image, outcome) in table.for_criterion(&criterion.id) {
        let Some(prompt) = image_index.get(image).filter(|p| selected.contains(*p)) else {
            continue;
        };
        let slot = match outcome {
            LabelOutcome::Label(i) if i < criterion.candidates.len() => i,
            LabelOutcome::Label(_) | LabelOutcome::Unknown => slots - 1,
            LabelOutcome::Absent => slots - 2,
        };
        *counts[slot].entry(prompt).or_insert(0) += 1;
    }
    let labels = criterion
        .candidates
        .iter()
        .map(String::as_str)
        .chain([ABSENT, UNKNOWN]);
    let rows = labels
        .zip(&counts)
        .map(|(label, by_prompt)| BarRow {
            label: label.into(),
            segments: prompts
                .iter()
                .map(|p| BarSegment {
                    prompt_id: (*p).clone(),
                    count: by_prompt.get(*p).copied().unwrap_or(0),
                })
                .collect(),
        })
        .collect();
    StackedBarData {
        criterion_id: criterion.id.clone(),
        rows,
    }
}
