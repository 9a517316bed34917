mod common;

use common::{synthetic_paths, toks, RefLm};
use kgstory::lm::{NGramModel, SequenceScorer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn normalised_on_every_trained_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus = synthetic_paths(&mut rng, 1000);
    let m = NGramModel::train(&corpus, 3, 0.75).unwrap();
    let vocab: Vec<&str> = m.predictable_tokens().collect();
    let contexts = m.seen_contexts();
    assert!(contexts.len() > 1000);
    for ctx in &contexts {
        let total: f64 = vocab.iter().map(|w| m.prob(ctx, w)).sum();
        assert!((total - 1.0).abs() < 1e-9, "{ctx:?}: {total}");
    }
}

#[test]
fn agrees_with_reference_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let corpus = synthetic_paths(&mut rng, 200);
    for order in [2, 3, 4] {
        let m = NGramModel::train(&corpus, order, 0.6).unwrap();
        let r = RefLm::train(&corpus, order, 0.6);
        let mut probes = synthetic_paths(&mut rng, 30);
        probes.push(toks("never_NOUN seen_NOUN"));
        for p in &probes {
            assert!((m.log_prob(p) - r.log_prob(p)).abs() < 1e-9);
            let ppl = m.perplexity(p);
            assert!((ppl - r.perplexity(p)).abs() < 1e-9 * ppl);
            assert_eq!(ppl, (-m.log_prob(p) / (p.len() as f64 + 1.0)).exp());
            assert!(ppl >= 1.0);
        }
    }
}

#[test]
fn uniform_model_perplexity() {
    let words = ["a", "b", "c", "d", "e"];
    let m = NGramModel::uniform(3, &words).unwrap();
    // Five words plus the end marker, separator and unknown token.
    let size = m.predictable_size() as f64;
    assert_eq!(size, 8.0);
    for probe in ["a", "a b c", "e e e e e e", "zzz a"] {
        assert!((m.perplexity(&toks(probe)) - size).abs() < 1e-9);
    }
}

#[test]
fn training_sequence_beats_its_shuffles() {
    let seq = toks("dog_NOUN Motion_FRAME park_NOUN <sep> ball_NOUN Competition_FRAME");
    let m = NGramModel::train(std::slice::from_ref(&seq), 3, 0.75).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut shuffled = seq.clone();
        shuffled.shuffle(&mut rng);
        assert!(m.perplexity(&seq) <= m.perplexity(&shuffled));
    }
}

#[test]
fn snapshot_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus = synthetic_paths(&mut rng, 50);
    let m = NGramModel::train(&corpus, 3, 0.75).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.json");
    m.save(&path).unwrap();
    let back = NGramModel::load(&path).unwrap();
    for p in synthetic_paths(&mut rng, 10) {
        assert_eq!(m.log_prob(&p), back.log_prob(&p));
    }
}
