//! Scene-graph extraction parsing, aggregation and pruning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AggregatedSceneGraph, GraphNode, ImageId, NodeKind, NodePath, PerImageGraph, PromptId, SceneNode};
use crate::name::normalize_name;
use crate::rng::{rng_for, uniform_below, TAG_EXTRACTION_SAMPLE};

/// Deepest node kept from an extraction, counting the root object as depth 1.
pub const MAX_DEPTH: usize = 4;
/// Default number of visible children per node.
pub const DEFAULT_MAX_CHILDREN: usize = 5;
/// Default number of images sent for extraction per prompt.
pub const DEFAULT_SAMPLE_SIZE: usize = 12;

/// Instruction sent to the vision model with each sampled image.
pub const EXTRACTION_INSTRUCTION: &str = "Describe the contents of this image as a scene graph. \
Respond with a single JSON object and nothing else, using exactly this shape: \
{\"objects\": [{\"name\": str, \"attributes\": [{\"name\": str, \"value\": str}], \"children\": [<same shape>]}]}. \
Use singular, lowercase nouns for object names. Nest parts and worn or held items as children of the \
object they belong to. Use at most 4 levels of nesting.";

/// Text returned by the vision model for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExtraction {
    pub image_id: ImageId,
    pub raw_text: String,
}

/// Seeded sample of `min(k, n)` distinct ids.
pub fn sample_for_extraction(image_ids: &[ImageId], session_seed: u64, k: usize) -> Result<Vec<ImageId>> {
    if image_ids.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let mut pool = image_ids.to_vec();
    let take = k.min(pool.len());
    let mut rng = rng_for(session_seed, TAG_EXTRACTION_SAMPLE);
    // partial Fisher-Yates
    for i in 0..take {
        let j = i + uniform_below(&mut rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(take);
    Ok(pool)
}

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    objects: Vec<ObjectSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectSpec {
    name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    attributes: Vec<AttributeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<ObjectSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttributeSpec {
    name: String,
    value: Value,
}

/// Strips a surrounding Markdown code fence, if any.
pub(crate) fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // drop the info string ("json") up to the first newline
    let body = rest.find('\n').map_or("", |nl| &rest[nl + 1..]);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// First balanced `{...}` in `text`, honoring JSON string escapes.
pub(crate) fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a model payload into `T`, with one repair pass on failure.
pub(crate) fn parse_with_repair<T: serde::de::DeserializeOwned>(raw: &str) -> Result<T> {
    if let Ok(v) = serde_json::from_str(raw.trim()) {
        return Ok(v);
    }
    let unfenced = strip_code_fences(raw);
    first_balanced_object(unfenced)
        .and_then(|candidate| serde_json::from_str(candidate).ok())
        .ok_or_else(|| Error::ParseFailure(raw.to_string()))
}

fn scalar_to_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn insert_object(nodes: &mut BTreeMap<NodePath, SceneNode>, path: NodePath) {
    // objects take precedence over attributes at the same path
    nodes.insert(path, SceneNode::Object);
}

fn walk(nodes: &mut BTreeMap<NodePath, SceneNode>, parent: Option<&NodePath>, spec: &ObjectSpec) {
    let path = match parent {
        Some(p) => p.child(&spec.name),
        None => NodePath::root(&spec.name),
    };
    let Ok(path) = path else {
        return;
    };
    if path.depth() > MAX_DEPTH {
        return;
    }
    insert_object(nodes, path.clone());
    if path.depth() < MAX_DEPTH {
        for attr in &spec.attributes {
            let (Ok(attr_path), Some(value)) = (path.child(&attr.name), scalar_to_string(&attr.value)) else {
                continue;
            };
            let Ok(value) = normalize_name(&value) else {
                continue;
            };
            // first occurrence wins; never shadow an object
            nodes.entry(attr_path).or_insert(SceneNode::Attribute { value });
        }
    }
    for child in &spec.children {
        walk(nodes, Some(&path), child);
    }
}

/// Parses one vision-model response into a prefix-closed per-image graph.
pub fn parse_extraction(raw: &RawExtraction) -> Result<PerImageGraph> {
    let payload: Payload = parse_with_repair(&raw.raw_text)?;
    let mut graph = PerImageGraph::new(raw.image_id.clone());
    for object in &payload.objects {
        walk(&mut graph.nodes, None, object);
    }
    Ok(graph)
}

fn build_spec(graph: &PerImageGraph, path: &NodePath) -> ObjectSpec {
    let mut spec = ObjectSpec {
        name: path.name().to_string(),
        attributes: Vec::new(),
        children: Vec::new(),
    };
    let depth = path.depth();
    for (child, node) in graph
        .nodes
        .range(path.clone()..)
        .skip(1)
        .take_while(|(p, _)| p.segments().starts_with(path.segments()))
        .filter(|(p, _)| p.depth() == depth + 1)
    {
        match node {
            SceneNode::Object => spec.children.push(build_spec(graph, child)),
            SceneNode::Attribute { value } => spec.attributes.push(AttributeSpec {
                name: child.name().to_string(),
                value: Value::String(value.clone()),
            }),
        }
    }
    spec
}

/// Renders a per-image graph in the extraction payload schema.
pub fn serialize_extraction(graph: &PerImageGraph) -> String {
    let objects = graph
        .nodes
        .iter()
        .filter(|(p, n)| p.is_root() && matches!(n, SceneNode::Object))
        .map(|(p, _)| build_spec(graph, p))
        .collect();
    serde_json::to_string(&Payload { objects }).unwrap_or_default()
}

/// Folds per-image graphs into `into`.
///
/// Existing nodes (including user-added ones) are kept. Fails without
/// modifying `into` if an image is already present or has no prompt mapping.
pub fn merge_into(
    into: &mut AggregatedSceneGraph,
    graphs: &[PerImageGraph],
    image_prompts: &BTreeMap<ImageId, PromptId>,
) -> Result<()> {
    let mut seen: BTreeSet<&ImageId> = BTreeSet::new();
    let existing = into.image_ids();
    for g in graphs {
        if !seen.insert(&g.image_id) || existing.contains(&g.image_id) {
            return Err(Error::DuplicateImage(g.image_id.clone()));
        }
        if !image_prompts.contains_key(&g.image_id) {
            return Err(Error::UnknownImage(g.image_id.clone()));
        }
    }
    for g in graphs {
        let prompt = &image_prompts[&g.image_id];
        for (path, scene) in &g.nodes {
            let node = into
                .nodes
                .entry(path.clone())
                .or_insert_with(|| GraphNode::new(scene.kind()));
            match scene {
                SceneNode::Object => node.kind = NodeKind::Object,
                SceneNode::Attribute { value } => {
                    node.values
                        .entry(value.clone())
                        .or_default()
                        .insert(g.image_id.clone());
                }
            }
            node.stats.insert(&g.image_id, prompt);
            node.collection_count = node.stats.total() as u32;
        }
    }
    Ok(())
}

/// Merges per-image graphs into a fresh aggregated graph. Every node starts visible.
pub fn merge_graphs(
    graphs: &[PerImageGraph],
    image_prompts: &BTreeMap<ImageId, PromptId>,
) -> Result<AggregatedSceneGraph> {
    let mut out = AggregatedSceneGraph::default();
    merge_into(&mut out, graphs, image_prompts)?;
    Ok(out)
}

/// Children of each node (roots grouped under `None`).
fn child_lists(g: &AggregatedSceneGraph) -> BTreeMap<Option<NodePath>, Vec<NodePath>> {
    let mut out: BTreeMap<Option<NodePath>, Vec<NodePath>> = BTreeMap::new();
    for path in g.nodes.keys() {
        out.entry(path.parent()).or_default().push(path.clone());
    }
    out
}

/// Paths that must stay visible: user-added nodes and their ancestors.
fn pinned(g: &AggregatedSceneGraph) -> BTreeSet<NodePath> {
    let mut out = BTreeSet::new();
    for (path, node) in &g.nodes {
        if node.user_added {
            out.extend(path.ancestors());
            out.insert(path.clone());
        }
    }
    out
}

/// Marks at most `max_children` children of every node (and of the root level)
/// visible, by descending collection count then ascending name.
///
/// Pinned nodes take their slots first and are never hidden. Counts are left
/// untouched; hidden nodes stay in the graph.
pub fn prune_graph(g: &AggregatedSceneGraph, max_children: usize) -> AggregatedSceneGraph {
    let max_children = max_children.max(1);
    let pinned = pinned(g);
    let mut shown: BTreeSet<NodePath> = BTreeSet::new();
    for (_, mut kids) in child_lists(g) {
        kids.sort_by(|a, b| {
            let (na, nb) = (&g.nodes[a], &g.nodes[b]);
            pinned
                .contains(b)
                .cmp(&pinned.contains(a))
                .then(nb.collection_count.cmp(&na.collection_count))
                .then_with(|| a.name().cmp(b.name()))
        });
        let pinned_count = kids.iter().filter(|k| pinned.contains(*k)).count();
        shown.extend(kids.into_iter().take(max_children.max(pinned_count)));
    }
    let mut out = g.clone();
    // parents sort before children, so one ordered pass propagates visibility
    let keys: Vec<NodePath> = out.nodes.keys().cloned().collect();
    for path in keys {
        let parent_visible = path
            .parent()
            .is_none_or(|p| out.nodes.get(&p).is_none_or(|n| n.visible));
        let visible = parent_visible && shown.contains(&path);
        if let Some(node) = out.nodes.get_mut(&path) {
            node.visible = visible;
        }
    }
    out
}

/// Restricts counts and image sets to the selected prompts. Node set,
/// visibility and collection counts are unchanged.
pub fn filter_by_prompts(
    g: &AggregatedSceneGraph,
    selected: &BTreeSet<PromptId>,
    image_prompts: &BTreeMap<ImageId, PromptId>,
) -> Result<AggregatedSceneGraph> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let keep = |image: &ImageId| image_prompts.get(image).is_some_and(|p| selected.contains(p));
    let mut out = g.clone();
    for node in out.nodes.values_mut() {
        node.stats.image_ids.retain(|i| keep(i));
        node.stats.per_prompt_counts.retain(|p, _| selected.contains(p));
        for images in node.values.values_mut() {
            images.retain(|i| keep(i));
        }
    }
    Ok(out)
}

/// Adds an empty object node under `parent`. The node stays visible through pruning.
pub fn add_user_node(g: &AggregatedSceneGraph, parent: &NodePath, name: &str) -> Result<AggregatedSceneGraph> {
    match g.get(parent) {
        Some(node) if node.kind == NodeKind::Object => {}
        _ => return Err(Error::UnknownParent(parent.clone())),
    }
    let path = parent.child(name)?;
    insert_user_node(g, path)
}

/// Adds an empty root object node.
pub fn add_user_root(g: &AggregatedSceneGraph, name: &str) -> Result<AggregatedSceneGraph> {
    insert_user_node(g, NodePath::root(name)?)
}

fn insert_user_node(g: &AggregatedSceneGraph, path: NodePath) -> Result<AggregatedSceneGraph> {
    if g.contains(&path) {
        return Err(Error::DuplicateChild(path));
    }
    let mut out = g.clone();
    let mut node = GraphNode::new(NodeKind::Object);
    node.user_added = true;
    for ancestor in path.ancestors() {
        if let Some(a) = out.nodes.get_mut(&ancestor) {
            a.visible = true;
        }
    }
    out.nodes.insert(path, node);
    Ok(out)
}

/// Structural invariant violations, empty when the graph is well-formed.
pub fn graph_violations(g: &AggregatedSceneGraph) -> Vec<String> {
    let mut out = Vec::new();
    for (path, node) in &g.nodes {
        let sum: u32 = node.stats.per_prompt_counts.values().sum();
        if sum as usize != node.stats.total() {
            out.push(alloc::format!("{path}: per-prompt counts sum to {sum}, image set has {}", node.stats.total()));
        }
        if let Some(parent) = path.parent() {
            match g.nodes.get(&parent) {
                None => out.push(alloc::format!("{path}: missing parent")),
                Some(p) => {
                    if p.kind != NodeKind::Object {
                        out.push(alloc::format!("{path}: parent is an attribute"));
                    }
                    if !node.stats.image_ids.is_subset(&p.stats.image_ids) {
                        out.push(alloc::format!("{path}: image set not contained in parent's"));
                    }
                }
            }
        }
    }
    out
}
