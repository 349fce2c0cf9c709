//! Shared domain types.
//!
//! All types are plain values. Maps keyed by [`NodePath`] or by id pairs are
//! serialized as entry lists so the JSON form stays valid (JSON object keys
//! must be strings).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::name::normalize_name;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(String::from(s))
            }
        }
    };
}

id_type!(SessionId);
id_type!(PromptId);
id_type!(ImageId);
id_type!(CriterionId);
id_type!(BookmarkId);
id_type!(SuggestionId);

/// Milliseconds since the Unix epoch. Supplied by the caller; the core has no clock.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: PromptId,
    pub text: String,
    pub color_index: u32,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_prompt_id: Option<PromptId>,
    pub requested_count: u32,
    /// Deleted prompts keep their images and history but free their palette slot.
    #[serde(default)]
    pub deleted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub id: ImageId,
    pub prompt_id: PromptId,
    pub seed: u64,
    /// Path of the image bytes relative to the session directory.
    pub file_ref: String,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
}

/// Root-first list of normalized names identifying a scene-graph node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct NodePath(Vec<String>);

impl NodePath {
    /// Builds a path, normalizing every segment.
    pub fn new<I, S>(segments: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let segments = segments
            .into_iter()
            .map(|s| normalize_name(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        if segments.is_empty() {
            return Err(Error::EmptyPath);
        }
        Ok(Self(segments))
    }

    pub fn root(name: &str) -> Result<Self> {
        Self::new([name])
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.len() == 1
    }

    /// Last segment.
    pub fn name(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or("")
    }

    pub fn parent(&self) -> Option<NodePath> {
        (self.0.len() > 1).then(|| NodePath(self.0[..self.0.len() - 1].to_vec()))
    }

    /// Appends an already-normalized segment.
    pub fn child(&self, segment: &str) -> Result<NodePath> {
        let mut segments = self.0.clone();
        segments.push(normalize_name(segment)?);
        Ok(NodePath(segments))
    }

    /// All proper prefixes, shortest first.
    pub fn ancestors(&self) -> impl Iterator<Item = NodePath> + '_ {
        (1..self.0.len()).map(|len| NodePath(self.0[..len].to_vec()))
    }

    pub fn is_parent_of(&self, other: &NodePath) -> bool {
        other.0.len() == self.0.len() + 1 && other.0.starts_with(&self.0)
    }

    /// "coat of the doctor" style rendering, innermost object first.
    pub fn phrase(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.0.iter().rev().enumerate() {
            if i > 0 {
                out.push_str(" of the ");
            }
            out.push_str(seg);
        }
        out
    }
}

impl TryFrom<Vec<String>> for NodePath {
    type Error = Error;

    fn try_from(segments: Vec<String>) -> Result<Self> {
        NodePath::new(segments)
    }
}

impl From<NodePath> for Vec<String> {
    fn from(path: NodePath) -> Self {
        path.0
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" / ")?;
            }
            f.write_str(seg)?;
        }
        Ok(())
    }
}

/// A node of a single image's scene graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneNode {
    Object,
    Attribute { value: String },
}

impl SceneNode {
    pub fn kind(&self) -> NodeKind {
        match self {
            SceneNode::Object => NodeKind::Object,
            SceneNode::Attribute { .. } => NodeKind::Attribute,
        }
    }
}

/// Scene graph of one image. Prefix-closed; attribute nodes are leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerImageGraph {
    pub image_id: ImageId,
    pub nodes: BTreeMap<NodePath, SceneNode>,
}

impl PerImageGraph {
    pub fn new(image_id: ImageId) -> Self {
        Self {
            image_id,
            nodes: BTreeMap::new(),
        }
    }

    pub fn contains(&self, path: &NodePath) -> bool {
        self.nodes.contains_key(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Attribute,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub image_ids: BTreeSet<ImageId>,
    pub per_prompt_counts: BTreeMap<PromptId, u32>,
}

impl NodeStats {
    pub fn total(&self) -> usize {
        self.image_ids.len()
    }

    pub(crate) fn insert(&mut self, image: &ImageId, prompt: &PromptId) {
        if self.image_ids.insert(image.clone()) {
            *self.per_prompt_counts.entry(prompt.clone()).or_insert(0) += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub stats: NodeStats,
    /// Extracted attribute values and the images reporting them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, BTreeSet<ImageId>>,
    /// Image count over the whole collection, fixed at merge time. Pruning ranks
    /// by this so prompt filtering never changes which nodes are shown.
    #[serde(default)]
    pub collection_count: u32,
    /// Survives pruning.
    pub visible: bool,
    /// Added by the auditor rather than extracted.
    #[serde(default)]
    pub user_added: bool,
}

impl GraphNode {
    pub fn new(kind: NodeKind) -> Self {
        Self {
            kind,
            stats: NodeStats::default(),
            values: BTreeMap::new(),
            collection_count: 0,
            visible: true,
            user_added: false,
        }
    }
}

/// The merged scene graph of an image collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedSceneGraph {
    #[serde(with = "path_map")]
    pub nodes: BTreeMap<NodePath, GraphNode>,
}

impl AggregatedSceneGraph {
    pub fn get(&self, path: &NodePath) -> Option<&GraphNode> {
        self.nodes.get(path)
    }

    pub fn contains(&self, path: &NodePath) -> bool {
        self.nodes.contains_key(path)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn count(&self, path: &NodePath) -> usize {
        self.nodes.get(path).map_or(0, |n| n.stats.total())
    }

    /// Direct children of `path` in key order.
    pub fn children<'a>(&'a self, path: &'a NodePath) -> impl Iterator<Item = (&'a NodePath, &'a GraphNode)> + 'a {
        self.nodes
            .range(path.clone()..)
            .skip(1)
            .take_while(move |(p, _)| p.segments().starts_with(path.segments()))
            .filter(move |(p, _)| path.is_parent_of(p))
    }

    pub fn roots(&self) -> impl Iterator<Item = (&NodePath, &GraphNode)> {
        self.nodes.iter().filter(|(p, _)| p.is_root())
    }

    /// Every image id appearing anywhere in the graph.
    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.nodes
            .values()
            .flat_map(|n| n.stats.image_ids.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionOrigin {
    User,
    Suggestion,
}

/// An attribute evaluated on every image, with a closed set of answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: CriterionId,
    pub parent_path: NodePath,
    pub name: String,
    pub candidates: Vec<String>,
    pub origin: CriterionOrigin,
}

impl Criterion {
    /// Normalizes and validates a candidate list: at least two, pairwise distinct.
    pub fn normalize_candidates<I, S>(raw: I) -> Result<Vec<String>>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for c in raw {
            let c = normalize_name(c.as_ref()).map_err(|_| Error::InvalidCandidates("empty candidate"))?;
            if out.contains(&c) {
                return Err(Error::InvalidCandidates("duplicate candidate"));
            }
            out.push(c);
        }
        if out.len() < 2 {
            return Err(Error::InvalidCandidates("at least two candidates are required"));
        }
        for reserved in [ABSENT, UNKNOWN] {
            if out.iter().any(|c| c == reserved) {
                return Err(Error::InvalidCandidates("candidate collides with a reserved answer"));
            }
        }
        Ok(out)
    }

    pub fn candidate_name(&self, outcome: &LabelOutcome) -> &str {
        match outcome {
            LabelOutcome::Label(i) => self.candidates.get(*i).map(String::as_str).unwrap_or(UNKNOWN),
            LabelOutcome::Absent => ABSENT,
            LabelOutcome::Unknown => UNKNOWN,
        }
    }
}

/// Reserved answer: the criterion's parent object is not in the image.
pub const ABSENT: &str = "absent";
/// Reserved answer: the model could not decide.
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOutcome {
    Label(usize),
    Absent,
    Unknown,
}

/// (image, criterion) → outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    #[serde(with = "label_entries")]
    pub entries: BTreeMap<(ImageId, CriterionId), LabelOutcome>,
}

impl LabelTable {
    pub fn get(&self, image: &ImageId, criterion: &CriterionId) -> Option<LabelOutcome> {
        self.entries.get(&(image.clone(), criterion.clone())).copied()
    }

    pub fn insert(&mut self, image: ImageId, criterion: CriterionId, outcome: LabelOutcome) {
        self.entries.insert((image, criterion), outcome);
    }

    pub fn contains(&self, image: &ImageId, criterion: &CriterionId) -> bool {
        self.entries.contains_key(&(image.clone(), criterion.clone()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_criterion(&mut self, criterion: &CriterionId) {
        self.entries.retain(|(_, c), _| c != criterion);
    }

    pub fn for_criterion<'a>(
        &'a self,
        criterion: &'a CriterionId,
    ) -> impl Iterator<Item = (&'a ImageId, LabelOutcome)> + 'a {
        self.entries
            .iter()
            .filter(move |((_, c), _)| c == criterion)
            .map(|((i, _), o)| (i, *o))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BookmarkKind {
    Image,
    Chart,
    Projection,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bookmark {
    pub id: BookmarkId,
    pub kind: BookmarkKind,
    /// Image id for image bookmarks, criterion id for charts, empty otherwise.
    #[serde(default)]
    pub target_ref: String,
    #[serde(default)]
    pub note_text: String,
    pub created_at: Timestamp,
}

/// A proposed criterion, with the image pair that motivated it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionSuggestion {
    pub parent_path: NodePath,
    pub name: String,
    pub candidates: Vec<String>,
    pub evidence: (ImageId, ImageId),
    pub rationale_text: String,
}

/// A prompt variant produced by replacing one phrase of an existing prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSuggestion {
    pub base_prompt_id: PromptId,
    pub suggested_text: String,
    /// Character offsets `[start, end)` into the base prompt text.
    pub replaced_span: (usize, usize),
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Suggestion {
    Criterion(CriterionSuggestion),
    Prompt(PromptSuggestion),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuggestionStatus {
    Pending,
    Accepted,
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionRecord {
    pub id: SuggestionId,
    pub created_at: Timestamp,
    pub status: SuggestionStatus,
    pub suggestion: Suggestion,
}

/// Per-kind id counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounters {
    pub prompt: u64,
    pub image: u64,
    pub criterion: u64,
    pub bookmark: u64,
    pub suggestion: u64,
}

/// The unit of persistence: everything an audit knows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSession {
    pub id: SessionId,
    pub seed: u64,
    pub created_at: Timestamp,
    pub prompts: Vec<Prompt>,
    pub images: Vec<GeneratedImage>,
    pub graph: AggregatedSceneGraph,
    pub criteria: Vec<Criterion>,
    pub label_table: LabelTable,
    pub bookmarks: Vec<Bookmark>,
    pub suggestions_log: Vec<SuggestionRecord>,
    pub selected_prompt_ids: BTreeSet<PromptId>,
    /// Prompts whose sample has already been extracted and merged.
    #[serde(default)]
    pub extracted_prompts: BTreeSet<PromptId>,
    #[serde(default)]
    pub counters: IdCounters,
}

mod path_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize)]
    struct EntryRef<'a, T> {
        path: &'a NodePath,
        #[serde(flatten)]
        node: &'a T,
    }

    #[derive(Deserialize)]
    struct Entry<T> {
        path: NodePath,
        #[serde(flatten)]
        node: T,
    }

    pub fn serialize<S: Serializer, T: Serialize>(map: &BTreeMap<NodePath, T>, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(path, node)| EntryRef { path, node }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(
        d: D,
    ) -> core::result::Result<BTreeMap<NodePath, T>, D::Error> {
        let entries: Vec<Entry<T>> = Vec::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.path, e.node)).collect())
    }
}

mod label_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize)]
    struct EntryRef<'a> {
        image_id: &'a ImageId,
        criterion_id: &'a CriterionId,
        outcome: &'a LabelOutcome,
    }

    #[derive(Deserialize)]
    struct Entry {
        image_id: ImageId,
        criterion_id: CriterionId,
        outcome: LabelOutcome,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(ImageId, CriterionId), LabelOutcome>,
        s: S,
    ) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|((image_id, criterion_id), outcome)| EntryRef {
            image_id,
            criterion_id,
            outcome,
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> core::result::Result<BTreeMap<(ImageId, CriterionId), LabelOutcome>, D::Error> {
        let entries: Vec<Entry> = Vec::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.image_id, e.criterion_id), e.outcome))
            .collect())
    }
}
