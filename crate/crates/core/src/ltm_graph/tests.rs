use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::chunk_store::{Modality, NewChunk, NoReferences};
use crate::clock::ManualClock;
use crate::extractor::{ExtractorBackend, ResultBuilder, RuleExtractor};

const DAY_MS: i64 = 86_400_000;

fn store() -> ChunkStore {
    ChunkStore::in_memory(Arc::new(ManualClock::new(Timestamp(0))))
}

fn put(store: &ChunkStore, text: &str) -> ChunkId {
    let turn = store.total_count() as u64;
    store.put_chunk(NewChunk::text(text, "s", turn)).unwrap()
}

fn all_kinds() -> BTreeSet<MemoryKind> {
    MemoryKind::all()
}

fn extract_text(store: &ChunkStore, ids: &[ChunkId]) -> ExtractionResult {
    let chunks: Vec<_> = ids.iter().map(|i| store.get_chunk(i).unwrap()).collect();
    RuleExtractor::default().extract(&chunks).unwrap()
}

#[test]
fn empty_merge_is_a_no_op() {
    let s = store();
    let mut g = LtmGraph::default();
    let d = g
        .merge_extraction(&ExtractionResult::default(), &s, Timestamp(0))
        .unwrap();
    assert_eq!(d, GraphDelta::default());
    assert_eq!(g, LtmGraph::default());
}

#[test]
fn merging_twice_is_idempotent_on_sets() {
    let s = store();
    let c = put(&s, "Alice adopted Milo. Milo chased Rex.");
    let r = extract_text(&s, &[c]);
    let mut g = LtmGraph::default();
    let first = g.merge_extraction(&r, &s, Timestamp(0)).unwrap();
    assert_eq!((first.entities_added, first.relations_added), (3, 2));
    let before = g.clone();
    let second = g.merge_extraction(&r, &s, Timestamp(0)).unwrap();
    assert_eq!(second, GraphDelta::default());
    assert_eq!(g, before);
}

#[test]
fn provenance_unions_across_merges() {
    let s = store();
    let c0 = put(&s, "Alice adopted Milo");
    let c1 = put(&s, "Alice met Bob");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, std::slice::from_ref(&c0)), &s, Timestamp(0))
        .unwrap();
    let d = g
        .merge_extraction(&extract_text(&s, std::slice::from_ref(&c1)), &s, Timestamp(0))
        .unwrap();
    assert_eq!(d.entities_updated, 1); // Alice
    assert_eq!(d.entities_added, 1); // Bob
    let alice = g.entity_by_name("alice").unwrap();
    let union: BTreeSet<ChunkId> = [c0].into_iter().chain([c1]).collect();
    assert_eq!(alice.provenance, union);
    assert_eq!(alice.salience, 2.0);
}

#[test]
fn dangling_chunk_rejects_the_whole_merge() {
    let s = store();
    let c0 = put(&s, "Alice adopted Milo");
    let c1 = put(&s, "Bob met Carol");
    let r = extract_text(&s, &[c0, c1.clone()]);
    s.tombstone(&c1, &NoReferences).unwrap();
    let mut g = LtmGraph::default();
    let err = g.merge_extraction(&r, &s, Timestamp(0)).unwrap_err();
    assert!(matches!(err, GraphError::DanglingChunk(ref c) if *c == c1));
    assert!(g.is_empty());
}

#[test]
fn activation_orders_chunks_and_unions_media() {
    let s = store();
    let _c0 = put(&s, "unrelated");
    let c1 = put(&s, "Alice adopted Milo");
    let _c2 = put(&s, "unrelated again");
    let c3 = s
        .put_chunk(
            NewChunk::text("Alice adopted Milo", "s", 99)
                .with_media(vec![MediaRef::new("file:///milo.jpg", Modality::Image)]),
        )
        .unwrap();
    let mut g = LtmGraph::default();
    // merge the later chunk first so insertion order differs from sequence order
    g.merge_extraction(&extract_text(&s, std::slice::from_ref(&c3)), &s, Timestamp(0))
        .unwrap();
    g.merge_extraction(&extract_text(&s, std::slice::from_ref(&c1)), &s, Timestamp(0))
        .unwrap();

    let alice = g.entity_by_name("Alice").unwrap().id;
    let act = g.activate(ElementId::Entity(alice), &s, Timestamp(500)).unwrap();
    let seqs: Vec<u64> = act.chunks.iter().map(|c| c.id.sequence).collect();
    assert_eq!(seqs, vec![c1.sequence, c3.sequence]);
    assert!(act.repair.is_empty());
    let e = g.entity(alice).unwrap();
    assert_eq!(e.salience, 3.0);
    assert_eq!(e.last_activated, Timestamp(500));

    let rel = g.relations().next().unwrap().id;
    let act = g.activate(ElementId::Relation(rel), &s, Timestamp(600)).unwrap();
    assert_eq!(act.media.len(), 1);
    assert_eq!(act.seed, ElementId::Relation(rel));
}

#[test]
fn activation_reports_dangling_chunks() {
    let s = store();
    let c0 = put(&s, "Alice adopted Milo");
    let c1 = put(&s, "Alice met Bob");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c0.clone(), c1]), &s, Timestamp(0))
        .unwrap();
    s.tombstone(&c0, &g).unwrap();
    let alice = g.entity_by_name("alice").unwrap().id;
    let act = g.resolve(ElementId::Entity(alice), &s).unwrap();
    assert_eq!(act.chunks.len(), 1);
    assert_eq!(act.repair, vec![c0]);
}

#[test]
fn removed_entity_cannot_be_activated() {
    let s = store();
    let c = put(&s, "Alice adopted Milo");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(0)).unwrap();
    let milo = g.entity_by_name("milo").unwrap().id;
    g.remove_entity(milo).unwrap();
    assert!(matches!(
        g.activate(ElementId::Entity(milo), &s, Timestamp(0)),
        Err(GraphError::NotFound(_))
    ));
    assert_eq!(g.relation_count(), 0);
}

fn chain_graph() -> (ChunkStore, LtmGraph) {
    let s = store();
    let c = put(&s, "Ann knows Ben. Ben knows Cal.");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(0)).unwrap();
    (s, g)
}

/// Independent BFS over an undirected adjacency list built from the edge table.
fn bfs_oracle(g: &LtmGraph, seed: EntityId, hops: u32) -> (BTreeSet<EntityId>, BTreeSet<RelationId>) {
    let mut adj: BTreeMap<EntityId, Vec<(EntityId, RelationId)>> = BTreeMap::new();
    for r in g.relations() {
        adj.entry(r.src).or_default().push((r.dst, r.id));
        adj.entry(r.dst).or_default().push((r.src, r.id));
    }
    let mut seen = BTreeMap::from([(seed, 0u32)]);
    let mut edges = BTreeSet::new();
    let mut q = VecDeque::from([seed]);
    while let Some(n) = q.pop_front() {
        let d = seen[&n];
        if d == hops {
            continue;
        }
        for &(m, rid) in adj.get(&n).into_iter().flatten() {
            edges.insert(rid);
            if let std::collections::btree_map::Entry::Vacant(v) = seen.entry(m) {
                v.insert(d + 1);
                q.push_back(m);
            }
        }
    }
    (seen.into_keys().collect(), edges)
}

#[test]
fn neighbors_respects_hop_limit() {
    let (_s, g) = chain_graph();
    let a = g.entity_by_name("ann").unwrap().id;
    let b = g.entity_by_name("ben").unwrap().id;
    let c = g.entity_by_name("cal").unwrap().id;

    let one = g.neighbors(a, 1, &all_kinds()).unwrap();
    assert_eq!(one.entities, vec![(a, 0), (b, 1)]);
    assert_eq!(one.relations.len(), 1);
    let ab = g.relation(one.relations[0]).unwrap();
    assert_eq!((ab.src, ab.dst), (a, b));

    let two = g.neighbors(a, 2, &all_kinds()).unwrap();
    let (oracle_nodes, oracle_edges) = bfs_oracle(&g, a, 2);
    assert_eq!(two.entities.iter().map(|e| e.0).collect::<BTreeSet<_>>(), oracle_nodes);
    assert_eq!(two.relations.iter().copied().collect::<BTreeSet<_>>(), oracle_edges);
    assert_eq!(two.entities, vec![(a, 0), (b, 1), (c, 2)]);
}

#[test]
fn neighbors_of_isolated_entity_and_errors() {
    let s = store();
    let c = put(&s, "Zed");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(0)).unwrap();
    let z = g.entity_by_name("zed").unwrap().id;
    let sub = g.neighbors(z, 2, &all_kinds()).unwrap();
    assert_eq!(sub.entities, vec![(z, 0)]);
    assert!(sub.relations.is_empty());
    assert!(matches!(
        g.neighbors(z, 0, &all_kinds()),
        Err(GraphError::InvalidHopLimit)
    ));
    assert!(matches!(
        g.neighbors(EntityId(99), 1, &all_kinds()),
        Err(GraphError::NotFound(_))
    ));
}

#[test]
fn neighbors_filters_edges_by_kind() {
    let (_s, g) = chain_graph();
    let a = g.entity_by_name("ann").unwrap().id;
    let core_only: BTreeSet<_> = [MemoryKind::Core].into_iter().collect();
    let sub = g.neighbors(a, 2, &core_only).unwrap();
    assert_eq!(sub.entities, vec![(a, 0)]);
}

fn graph_with(entities: &[(&str, MemoryKind, f64, i64)]) -> (ChunkStore, LtmGraph) {
    let s = store();
    let mut g = LtmGraph::default();
    for (name, kind, salience, activated_day) in entities {
        let c = put(&s, name);
        let mut b = ResultBuilder::default();
        b.entity(name, "unknown", *kind, &c);
        g.merge_extraction(&b.finish(String::new()), &s, Timestamp(0)).unwrap();
        let id = g.entity_by_name(name).unwrap().id;
        let e = g.entities.get_mut(&id).unwrap();
        e.salience = *salience;
        e.last_activated = Timestamp(activated_day * DAY_MS);
    }
    (s, g)
}

#[test]
fn prune_under_budget_changes_nothing() {
    let (_s, mut g) = graph_with(&[("Ann", MemoryKind::Episodic, 1.0, 0)]);
    let before = g.clone();
    let report = g.prune(&PruneBudget::default(), Timestamp(0)).unwrap();
    assert!(report.is_empty());
    assert_eq!(g, before);
}

#[test]
fn prune_drops_lowest_retention_first() {
    let items = [
        ("Ann", MemoryKind::Episodic, 5.0, 0),
        ("Ben", MemoryKind::Episodic, 6.0, -40),
        ("Cal", MemoryKind::Episodic, 2.0, 0),
    ];
    let (_s, mut g) = graph_with(&items);
    let now = Timestamp(0);
    let lambda = g.config().decay_lambda_per_day;
    // sort-and-cut oracle
    let mut scored: Vec<(f64, &str)> = items
        .iter()
        .map(|(n, _, sal, day)| (sal * (-lambda * (-*day as f64)).exp(), *n))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let victim = scored[0].1;
    assert_eq!(victim, "Ben"); // 6 * e^(-40/30) ~ 1.58 < 2

    let policy = PruneBudget {
        max_entities: 2,
        ..Default::default()
    };
    let report = g.prune(&policy, now).unwrap();
    assert_eq!(report.removed_entities.len(), 1);
    assert!(g.entity_by_name(victim).is_none());
    assert_eq!(g.entity_count(), 2);
}

#[test]
fn prune_never_touches_protected_kinds() {
    let (_s, mut g) = graph_with(&[("Ann", MemoryKind::Core, 0.1, 0), ("Ben", MemoryKind::Core, 0.1, 0)]);
    let policy = PruneBudget {
        max_entities: 1,
        ..Default::default()
    };
    let err = g.prune(&policy, Timestamp(0)).unwrap_err();
    assert!(matches!(
        err,
        GraphError::BudgetInfeasible {
            what: "entities",
            protected: 2,
            budget: 1
        }
    ));
    assert_eq!(g.entity_count(), 2);

    let (_s, mut g) = graph_with(&[("Ann", MemoryKind::Core, 0.1, 0), ("Ben", MemoryKind::Episodic, 9.0, 0)]);
    g.prune(&policy, Timestamp(0)).unwrap();
    assert!(g.entity_by_name("ann").is_some());
    assert!(g.entity_by_name("ben").is_none());
}

#[test]
fn prune_min_salience_and_invalid_budget() {
    let (_s, mut g) = graph_with(&[
        ("Ann", MemoryKind::Episodic, 0.5, 0),
        ("Ben", MemoryKind::Episodic, 3.0, 0),
    ]);
    assert!(matches!(
        g.prune(
            &PruneBudget {
                max_entities: 0,
                ..Default::default()
            },
            Timestamp(0)
        ),
        Err(GraphError::InvalidBudget(_))
    ));
    let policy = PruneBudget {
        min_salience: 1.0,
        ..Default::default()
    };
    let r = g.prune(&policy, Timestamp(0)).unwrap();
    assert_eq!(r.removed_entities.len(), 1);
    assert!(g.entity_by_name("ben").is_some());
}

#[test]
fn prune_keeps_endpoints_of_protected_relations() {
    let s = store();
    let c = s
        .put_chunk(NewChunk::text("Ann loves Ben", "s", 0).with_kind(Some(MemoryKind::Core)))
        .unwrap();
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(0)).unwrap();
    // strip the entity kinds down to episodic so only the relation is protected
    for e in g.entities.values_mut() {
        e.kinds = [MemoryKind::Episodic].into_iter().collect();
    }
    let err = g
        .prune(
            &PruneBudget {
                max_entities: 1,
                ..Default::default()
            },
            Timestamp(0),
        )
        .unwrap_err();
    assert!(matches!(err, GraphError::BudgetInfeasible { .. }));
}

#[test]
fn prune_cascades_relations_of_removed_entities() {
    let (s, mut g) = chain_graph();
    let _ = s;
    let ann = g.entity_by_name("ann").unwrap().id;
    g.entities.get_mut(&ann).unwrap().salience = 0.0;
    let r = g
        .prune(
            &PruneBudget {
                max_entities: 2,
                ..Default::default()
            },
            Timestamp(0),
        )
        .unwrap();
    assert_eq!(r.removed_entities, vec![ann]);
    assert_eq!(r.removed_relations.len(), 1);
    for rel in g.relations() {
        assert!(g.entity(rel.src).is_some() && g.entity(rel.dst).is_some());
    }
}

#[test]
fn retention_decays_exponentially() {
    let s = retention_score(2.0, Timestamp(0), Timestamp(30 * DAY_MS), 1.0 / 30.0);
    assert!((s - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
    assert_eq!(retention_score(2.0, Timestamp(10), Timestamp(0), 1.0), 2.0);
}

fn scan_stats(g: &LtmGraph) -> (usize, usize, usize) {
    let mut refs = 0;
    let mut ents = 0;
    let mut rels = 0;
    for e in g.entities() {
        ents += 1;
        refs += e.provenance.len();
    }
    for r in g.relations() {
        rels += 1;
        refs += r.provenance.len();
    }
    (ents, rels, refs)
}

#[test]
fn stats_match_full_scan() {
    let g = LtmGraph::default();
    let st = g.stats();
    assert_eq!(
        (
            st.entity_count,
            st.relation_count,
            st.chunk_ref_count,
            st.total_bytes_estimate
        ),
        (0, 0, 0, 0)
    );
    assert!(st.per_kind.values().all(|k| *k == KindStats::default()));

    let s = store();
    let c = put(&s, "Alice adopted Milo");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(0)).unwrap();
    let st = g.stats();
    assert_eq!((st.entity_count, st.relation_count), (2, 1));
    assert_eq!((st.entity_count, st.relation_count, st.chunk_ref_count), scan_stats(&g));
    assert_eq!(st.per_kind[&MemoryKind::Episodic].entity_count, 2);
    assert_eq!(st.per_kind[&MemoryKind::Core].entity_count, 0);
}

#[test]
fn repair_removes_elements_that_lose_all_support() {
    let s = store();
    let c0 = put(&s, "Alice adopted Milo");
    let c1 = put(&s, "Alice met Bob");
    let mut g = LtmGraph::default();
    g.merge_extraction(&extract_text(&s, &[c0.clone(), c1.clone()]), &s, Timestamp(0))
        .unwrap();
    // Alice, Milo, adopted
    assert_eq!(g.reference_count(&c0), 3);
    let dangling = s.tombstone(&c0, &g).unwrap();
    assert_eq!(dangling, 3);
    let rep = g.repair_chunk(&c0);
    assert_eq!(rep.provenance_dropped, 3);
    assert_eq!(rep.removed_entities.len(), 1); // Milo
    assert_eq!(rep.removed_relations.len(), 1);
    assert!(g.entity_by_name("milo").is_none());
    assert_eq!(g.entity_by_name("alice").unwrap().provenance.len(), 1);
    assert_eq!(g.reference_count(&c0), 0);
}

#[test]
fn episodic_view_is_time_ordered() {
    let s = store();
    let c0 = put(&s, "Zed arrived");
    let c1 = put(&s, "Amy arrived");
    let mut g = LtmGraph::default();
    // merge newer first so ids run against time
    g.merge_extraction(&extract_text(&s, &[c1]), &s, Timestamp(0)).unwrap();
    g.merge_extraction(&extract_text(&s, &[c0]), &s, Timestamp(0)).unwrap();
    let names: Vec<_> = g
        .view(MemoryKind::Episodic)
        .into_iter()
        .map(|id| g.entity(id).unwrap().display_name.clone())
        .collect();
    assert_eq!(names, vec!["Zed", "Amy"]);
}

#[test]
fn empty_snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.snapshot");
    let g = LtmGraph::default();
    g.snapshot(&p).unwrap();
    assert_eq!(LtmGraph::restore(&p, GraphConfig::default()).unwrap(), g);
}

#[test]
fn corrupt_snapshots_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.snapshot");
    let (_s, g) = chain_graph();
    g.snapshot(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        LtmGraph::restore(&p, GraphConfig::default()),
        Err(GraphError::Io(_))
    ));

    let other = String::from_utf8(bytes.clone())
        .unwrap()
        .replace(GRAPH_FORMAT, "memverse-graph/7");
    std::fs::write(&p, other).unwrap();
    assert!(matches!(
        LtmGraph::restore(&p, GraphConfig::default()),
        Err(GraphError::FormatVersionMismatch(_))
    ));

    // relation pointing at a missing entity
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    v["entities"].as_array_mut().unwrap().remove(0);
    std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    assert!(matches!(
        LtmGraph::restore(&p, GraphConfig::default()),
        Err(GraphError::Io(_))
    ));

    assert!(matches!(
        LtmGraph::restore(&dir.path().join("missing"), GraphConfig::default()),
        Err(GraphError::Io(_))
    ));
}

/// Structural deep-equality oracle independent of `PartialEq` on the graph.
fn deep_equal(a: &LtmGraph, b: &LtmGraph) -> bool {
    let ents = |g: &LtmGraph| {
        g.entities()
            .map(|e| {
                (
                    e.id,
                    e.canonical_name.clone(),
                    e.display_name.clone(),
                    e.etype.clone(),
                    e.kinds.clone(),
                    e.provenance.clone(),
                    e.salience.to_bits(),
                    e.last_activated,
                    e.created_at,
                )
            })
            .collect::<Vec<_>>()
    };
    let rels = |g: &LtmGraph| {
        g.relations()
            .map(|r| {
                (
                    r.id,
                    r.src,
                    r.dst,
                    r.label.clone(),
                    r.kinds.clone(),
                    r.provenance.clone(),
                    r.salience.to_bits(),
                    r.last_activated,
                )
            })
            .collect::<Vec<_>>()
    };
    ents(a) == ents(b) && rels(a) == rels(b)
}

fn random_graph(words: &[(u8, u8, u8)], salience_bumps: &[u8]) -> (ChunkStore, LtmGraph) {
    let s = store();
    let mut g = LtmGraph::default();
    for (i, (a, b, k)) in words.iter().enumerate() {
        let kind = MemoryKind::ALL[*k as usize % 3];
        let c = s
            .put_chunk(NewChunk::text(format!("N{a} rel{b} N{b}"), "s", i as u64).with_kind(Some(kind)))
            .unwrap();
        g.merge_extraction(&extract_text(&s, &[c]), &s, Timestamp(i as i64 * 1000))
            .unwrap();
    }
    let ids: Vec<EntityId> = g.entities().map(|e| e.id).collect();
    for (i, b) in salience_bumps.iter().enumerate() {
        if let Some(id) = ids.get(*b as usize % ids.len().max(1)) {
            g.activate(ElementId::Entity(*id), &s, Timestamp(10_000 + i as i64))
                .unwrap();
        }
    }
    (s, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn snapshot_round_trip_is_structurally_equal(
        words in prop::collection::vec((0u8..60, 0u8..60, 0u8..3), 40..60),
        bumps in prop::collection::vec(0u8..255, 0..20),
    ) {
        let (_s, g) = random_graph(&words, &bumps);
        prop_assert!(g.entity_count() + g.relation_count() >= 40);
        let bytes = g.snapshot_bytes();
        let back = LtmGraph::from_snapshot_bytes(&bytes, GraphConfig::default()).unwrap();
        prop_assert!(deep_equal(&g, &back));
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.snapshot_bytes(), bytes);
        // indexes rebuilt: name lookup and reference counts agree
        for e in g.entities() {
            prop_assert_eq!(back.entity_by_name(&e.canonical_name).map(|x| x.id), Some(e.id));
        }
    }

    #[test]
    fn merges_keep_provenance_closed(
        words in prop::collection::vec((0u8..20, 0u8..20, 0u8..3), 1..30),
        deletes in prop::collection::vec(0usize..30, 0..10),
    ) {
        let (s, mut g) = random_graph(&words, &[]);
        for d in deletes {
            if let Some(id) = s.id_for(d as u64) {
                if s.is_live(&id) {
                    s.tombstone(&id, &g).unwrap();
                    g.repair_chunk(&id);
                }
            }
        }
        for e in g.entities() {
            prop_assert!(!e.provenance.is_empty());
            prop_assert!(e.provenance.iter().all(|c| s.is_live(c)));
        }
        for r in g.relations() {
            prop_assert!(!r.provenance.is_empty());
            prop_assert!(r.provenance.iter().all(|c| s.is_live(c)));
            prop_assert!(g.entity(r.src).is_some() && g.entity(r.dst).is_some());
        }
    }
}
