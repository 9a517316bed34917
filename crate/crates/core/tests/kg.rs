mod common;

use std::collections::BTreeSet;

use common::{describe_links, BruteGraph};
use kgstory::kg::{KnowledgeGraph, RelationTuple, Source};
use kgstory::synth::{random_tuples, synthetic_tuple_tsv};
use kgstory::terms::{Term, TermSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noun(s: &str) -> Term {
    Term::noun(s).unwrap()
}

fn graph_of(tuples: &[RelationTuple]) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new();
    for t in tuples {
        kg.insert(t).unwrap();
    }
    kg
}

#[test]
fn queries_match_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..20 {
        let n = rng.gen_range(0..=300);
        let terms = rng.gen_range(2..=25);
        let tuples = random_tuples(&mut rng, n, terms, 4);
        let kg = graph_of(&tuples);
        let brute = BruteGraph::new(&tuples);
        kg.check_indexes().unwrap();
        let unique: BTreeSet<_> = tuples.iter().cloned().collect();
        assert_eq!(kg.tuple_count(), unique.len(), "trial {trial}");
        for _ in 0..40 {
            let h = noun(&format!("t{}", rng.gen_range(0..terms)));
            let t = noun(&format!("t{}", rng.gen_range(0..terms)));
            let one = kg.one_hop(&h, &t);
            assert_eq!(one.len(), brute.one_hop(&h, &t).len());
            assert_eq!(one.into_iter().collect::<BTreeSet<_>>(), brute.one_hop(&h, &t));
            let two = kg.two_hop(&h, &t);
            let expected = brute.two_hop(&h, &t);
            assert_eq!(two.len(), expected.len());
            assert_eq!(two.into_iter().collect::<BTreeSet<_>>(), expected);
        }
    }
}

#[test]
fn cross_image_links_match_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let tuples = random_tuples(&mut rng, 100, 12, 3);
        let kg = graph_of(&tuples);
        let brute = BruteGraph::new(&tuples);
        let pick = |rng: &mut ChaCha8Rng| {
            let mut ids: Vec<usize> = (0..12).collect();
            ids.shuffle(rng);
            ids[..5].iter().map(|i| noun(&format!("t{i}"))).collect::<Vec<_>>()
        };
        let gap = rng.gen_range(0..4);
        let left = TermSet::new(gap, pick(&mut rng)).unwrap();
        let right = TermSet::new(gap + 1, pick(&mut rng)).unwrap();
        for two in [false, true] {
            let got = kg.cross_image_links(&left, &right, two).unwrap();
            assert!(got.iter().all(|l| l.gap == gap));
            assert_eq!(describe_links(&got), brute.links(&left, &right, two));
        }
    }
}

#[test]
fn worked_links_are_recovered() {
    let mut kg = KnowledgeGraph::new();
    let text = "friends_NOUN\tposture\tman_NOUN\nman_NOUN\tposture\tgirls_NOUN\ntime_NOUN\tcause to experience\teveryone_NOUN\n";
    assert_eq!(kg.ingest(text.as_bytes(), Source::VisualGenome, "fixture").unwrap(), 3);

    let paths = kg.two_hop(&noun("friends"), &noun("girls"));
    assert_eq!(paths.len(), 1);
    assert_eq!(paths[0].middle(), &noun("man"));
    assert!(kg.two_hop(&noun("friends"), &noun("friends")).is_empty());

    let one = kg.one_hop(&noun("time"), &noun("everyone"));
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].rela, "cause to experience");
    assert!(kg.one_hop(&noun("everyone"), &noun("time")).is_empty());

    let left = TermSet::new(1, [noun("friends")]).unwrap();
    let right = TermSet::new(2, [noun("girls")]).unwrap();
    assert_eq!(kg.cross_image_links(&left, &right, true).unwrap().len(), 1);
    assert!(kg.cross_image_links(&left, &right, false).unwrap().is_empty());
}

#[test]
fn ingest_is_idempotent_and_deterministic() {
    let body = synthetic_tuple_tsv(2000, 60, 4);
    let mut a = KnowledgeGraph::new();
    let first = a.ingest(body.as_bytes(), Source::Openie, "a").unwrap();
    assert_eq!(a.ingest(body.as_bytes(), Source::Openie, "a").unwrap(), 0);
    assert_eq!(a.tuple_count(), first);
    let mut b = KnowledgeGraph::new();
    b.ingest(body.as_bytes(), Source::Openie, "b").unwrap();
    let q = |kg: &KnowledgeGraph| {
        let h = noun("e1");
        let t = noun("e2");
        serde_json::to_string(&(kg.one_hop(&h, &t), kg.two_hop(&h, &t))).unwrap()
    };
    assert_eq!(q(&a), q(&b));
    assert!(!q(&a).is_empty());
}

#[test]
fn same_tuple_from_two_sources_is_kept_twice() {
    let mut kg = KnowledgeGraph::new();
    let line = "dog_NOUN\tchase\tcat_NOUN\n";
    kg.ingest(line.as_bytes(), Source::VisualGenome, "vg").unwrap();
    kg.ingest(line.as_bytes(), Source::Openie, "oie").unwrap();
    let found = kg.one_hop(&noun("dog"), &noun("cat"));
    assert_eq!(
        found.iter().map(|t| t.source).collect::<Vec<_>>(),
        vec![Source::VisualGenome, Source::Openie]
    );
}

#[test]
fn malformed_lines_report_their_number() {
    let mut kg = KnowledgeGraph::new();
    let err = kg
        .ingest("# header\nfriends_NOUN\tposture\n".as_bytes(), Source::Other, "bad.tsv")
        .unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let err = kg
        .ingest("friends_NOUN\t\tman_NOUN\n".as_bytes(), Source::Other, "bad.tsv")
        .unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}
