use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vipera_core::graph::{filter_by_prompts, graph_violations, merge_graphs, parse_extraction, prune_graph, serialize_extraction, RawExtraction};
use vipera_core::labeling::{distribution, parse_label_response};
use vipera_core::projection::{encode_label_vectors, pairwise_distances, classical_mds};
use vipera_core::suggest::{adopt_prompt, is_consistent, locate_substitution, select_image_pairs};
use vipera_core::*;

const NAMES: [&str; 6] = ["doctor", "nurse", "coat", "stethoscope", "office", "chair"];

fn per_image_graph(id: usize, raw_paths: Vec<Vec<usize>>, attrs: Vec<(Vec<usize>, usize)>) -> PerImageGraph {
    let mut g = PerImageGraph::new(ImageId::new(format!("i{id:03}")));
    for segs in raw_paths {
        let path = NodePath::new(segs.iter().map(|&s| NAMES[s])).unwrap();
        for a in path.ancestors() {
            g.nodes.insert(a, SceneNode::Object);
        }
        g.nodes.insert(path, SceneNode::Object);
    }
    for (segs, v) in attrs {
        let parent = NodePath::new(segs.iter().map(|&s| NAMES[s])).unwrap();
        let attr = parent.child("color").unwrap();
        if g.nodes.contains_key(&parent) && !g.nodes.contains_key(&attr) {
            g.nodes.insert(attr, SceneNode::Attribute { value: ["white", "blue"][v].into() });
        }
    }
    g
}

fn graphs_strategy(max: usize) -> impl Strategy<Value = Vec<PerImageGraph>> {
    let one = (
        prop::collection::vec(prop::collection::vec(0usize..6, 1..4), 0..6),
        prop::collection::vec((prop::collection::vec(0usize..6, 1..3), 0usize..2), 0..3),
    );
    prop::collection::vec(one, 0..max).prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (paths, attrs))| per_image_graph(i, paths, attrs))
            .collect()
    })
}

fn prompt_index(graphs: &[PerImageGraph], prompts: usize) -> BTreeMap<ImageId, PromptId> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id.clone(), PromptId::new(format!("p{}", i % prompts))))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_order_independent(graphs in graphs_strategy(20), seed in any::<u64>()) {
        let index = prompt_index(&graphs, 3);
        let mut shuffled = graphs.clone();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(merge_graphs(&graphs, &index).unwrap(), merge_graphs(&shuffled, &index).unwrap());
    }

    #[test]
    fn merged_graphs_are_well_formed(graphs in graphs_strategy(20)) {
        let index = prompt_index(&graphs, 2);
        let merged = merge_graphs(&graphs, &index).unwrap();
        prop_assert!(graph_violations(&merged).is_empty());
        for (path, node) in &merged.nodes {
            let expected: BTreeSet<ImageId> = graphs.iter().filter(|g| g.contains(path)).map(|g| g.image_id.clone()).collect();
            prop_assert_eq!(&node.stats.image_ids, &expected);
        }
    }

    #[test]
    fn prune_bounds_and_preserves_counts(graphs in graphs_strategy(20), max in 1usize..6) {
        let merged = merge_graphs(&graphs, &prompt_index(&graphs, 2)).unwrap();
        let pruned = prune_graph(&merged, max);
        let mut visible_kids: BTreeMap<Option<NodePath>, usize> = BTreeMap::new();
        for (path, node) in &pruned.nodes {
            prop_assert_eq!(&node.stats, &merged.nodes[path].stats);
            if node.visible {
                *visible_kids.entry(path.parent()).or_default() += 1;
                if let Some(parent) = path.parent() {
                    prop_assert!(pruned.nodes[&parent].visible);
                }
            }
        }
        prop_assert!(visible_kids.values().all(|&n| n <= max));
    }

    #[test]
    fn filter_is_idempotent_and_commutes_with_prune(graphs in graphs_strategy(20)) {
        let index = prompt_index(&graphs, 3);
        let merged = merge_graphs(&graphs, &index).unwrap();
        let selected: BTreeSet<PromptId> = ["p0".into(), "p2".into()].into_iter().collect();
        let once = filter_by_prompts(&merged, &selected, &index).unwrap();
        prop_assert_eq!(&filter_by_prompts(&once, &selected, &index).unwrap(), &once);
        let a = prune_graph(&once, 2);
        let b = filter_by_prompts(&prune_graph(&merged, 2), &selected, &index).unwrap();
        prop_assert_eq!(a, b);
        // topology is never reshaped by filtering
        prop_assert_eq!(once.nodes.keys().collect::<Vec<_>>(), merged.nodes.keys().collect::<Vec<_>>());
    }

    #[test]
    fn extraction_round_trips(graphs in graphs_strategy(4)) {
        for g in graphs {
            let raw = RawExtraction { image_id: g.image_id.clone(), raw_text: serialize_extraction(&g) };
            prop_assert_eq!(parse_extraction(&raw).unwrap(), g);
        }
    }

    #[test]
    fn label_parse_stays_in_range(raw in ".{0,40}") {
        let c = Criterion {
            id: "c".into(),
            parent_path: NodePath::root("doctor").unwrap(),
            name: "gender".into(),
            candidates: vec!["male".into(), "female".into(), "non binary".into()],
            origin: CriterionOrigin::User,
        };
        if let LabelOutcome::Label(i) = parse_label_response(&raw, &c) {
            prop_assert!(i < c.candidates.len());
        }
    }

    #[test]
    fn distribution_conserves_entries(labels in prop::collection::vec((0usize..4, prop::option::of(0usize..4)), 0..120)) {
        // (prompt, outcome) per image; outcome 0..2 labels, 2 absent, 3 unknown, None = unlabeled
        let c = Criterion {
            id: "c".into(),
            parent_path: NodePath::root("doctor").unwrap(),
            name: "gender".into(),
            candidates: vec!["male".into(), "female".into()],
            origin: CriterionOrigin::User,
        };
        let order: Vec<PromptId> = (0..4).map(|p| PromptId::new(format!("p{p}"))).collect();
        let mut table = LabelTable::default();
        let mut index = BTreeMap::new();
        for (i, (p, o)) in labels.iter().enumerate() {
            let id = ImageId::new(format!("i{i}"));
            index.insert(id.clone(), order[*p].clone());
            if let Some(o) = o {
                let outcome = match o { 0 | 1 => LabelOutcome::Label(*o), 2 => LabelOutcome::Absent, _ => LabelOutcome::Unknown };
                table.insert(id, c.id.clone(), outcome);
            }
        }
        let selected: BTreeSet<PromptId> = [order[1].clone(), order[3].clone()].into_iter().collect();
        let d = distribution(&table, &c, &selected, &index, &order);
        let expected = labels.iter().filter(|(p, o)| o.is_some() && (*p == 1 || *p == 3)).count();
        prop_assert_eq!(d.total() as usize, expected);
    }

    #[test]
    fn encoding_follows_image_order(perm_seed in any::<u64>(), n in 2usize..12) {
        let c = Criterion {
            id: "c".into(),
            parent_path: NodePath::root("doctor").unwrap(),
            name: "gender".into(),
            candidates: vec!["male".into(), "female".into()],
            origin: CriterionOrigin::User,
        };
        let images: Vec<ImageId> = (0..n).map(|i| ImageId::new(format!("i{i}"))).collect();
        let mut table = LabelTable::default();
        for (i, id) in images.iter().enumerate() {
            if i % 4 != 3 {
                table.insert(id.clone(), c.id.clone(), LabelOutcome::Label(i % 2));
            }
        }
        let mut permuted = images.clone();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            permuted.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = encode_label_vectors(&table, std::slice::from_ref(&c), &images);
        let b = encode_label_vectors(&table, &[c], &permuted);
        for (r, id) in permuted.iter().enumerate() {
            let orig = images.iter().position(|x| x == id).unwrap();
            prop_assert_eq!(b.row(r), a.row(orig));
        }
        let e = classical_mds(&pairwise_distances(&a), 1).unwrap();
        prop_assert!(e.stress.is_finite());
        prop_assert!(e.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
    }

    #[test]
    fn image_pairs_are_distinct(n in 2usize..20, k in 1usize..8, seed in any::<u64>()) {
        let images: Vec<ImageId> = (0..n).map(|i| ImageId::new(format!("i{i}"))).collect();
        let pairs = select_image_pairs(&images, &LabelTable::default(), &[], seed, k).unwrap();
        prop_assert_eq!(pairs.len(), k.min(n * (n - 1) / 2));
        let unordered: BTreeSet<(ImageId, ImageId)> = pairs
            .iter()
            .map(|(a, b)| if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) })
            .collect();
        prop_assert_eq!(unordered.len(), pairs.len());
        prop_assert!(pairs.iter().all(|(a, b)| a != b));
    }

    #[test]
    fn substitutions_are_self_consistent(word in 0usize..6, replacement in "[a-z]{1,8}") {
        let base = Prompt {
            id: "p0001".into(),
            text: "A cinematic photo of a doctor in an office".into(),
            color_index: 0,
            created_at: 0,
            parent_prompt_id: None,
            requested_count: 1,
            deleted: false,
        };
        let target = ["cinematic", "photo", "doctor", "office", "of", "in"][word];
        if let Some(s) = locate_substitution(&base, target, &replacement) {
            prop_assert!(is_consistent(&s, &base.text));
        }
    }

    #[test]
    fn adoption_preserves_criteria(counts in prop::collection::vec(1u32..6, 1..4), n_criteria in 0usize..4, new_count in 1u32..8, labeled in any::<bool>()) {
        let mut session = AuditSession::new("s".into(), 3, 0);
        let mut first = None;
        for (i, count) in counts.iter().enumerate() {
            let id = session.add_prompt(&format!("A cinematic photo of a doctor number {i}"), *count, None, 0).unwrap();
            first.get_or_insert(id);
        }
        let all: Vec<ImageId> = session.images.iter().map(|i| i.id.clone()).collect();
        for id in &all {
            session.mark_image_ready(id).unwrap();
        }
        session.ensure_path(&NodePath::root("doctor").unwrap()).unwrap();
        for c in 0..n_criteria {
            session.add_criterion(&NodePath::root("doctor").unwrap(), &format!("attr{c}"), ["a", "b"], CriterionOrigin::User).unwrap();
        }
        if labeled {
            let pairs = session.pending_label_pairs();
            session.record_labels(pairs.into_iter().map(|p| (p, LabelOutcome::Absent)));
        }
        let before_pending: BTreeSet<_> = session.pending_label_pairs().into_iter().collect();
        let base = session.prompt(first.as_ref().unwrap()).unwrap().clone();
        let suggestion = locate_substitution(&base, "doctor", "nurse").unwrap();
        let (next, new_prompt) = adopt_prompt(&session, &suggestion, new_count, 1).unwrap();

        let ids = |s: &AuditSession| s.criteria.to_vec();
        prop_assert_eq!(ids(&next), ids(&session));
        let new_images: BTreeSet<ImageId> = next.images_of(&new_prompt).map(|i| i.id.clone()).collect();
        prop_assert_eq!(new_images.len(), new_count as usize);
        let after: BTreeSet<_> = next.pending_label_pairs().into_iter().collect();
        let added: BTreeSet<_> = after.difference(&before_pending).cloned().collect();
        let expected: BTreeSet<_> = new_images
            .iter()
            .flat_map(|i| next.criteria.iter().map(move |c| (i.clone(), c.id.clone())))
            .collect();
        prop_assert_eq!(added, expected);
        prop_assert!(next.violations().is_empty());
    }
}
