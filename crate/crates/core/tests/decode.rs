mod common;

use common::exhaustive_decode;
use kgstory::decode::{beam_search_story, beam_search_terms, replay_score, DecodeConfig, Regime, StepScorer};
use kgstory::synth::RandomScorer;
use kgstory::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut impl Rng, trial: u64) -> (RandomScorer, DecodeConfig, usize) {
    let vocab = rng.gen_range(1..=5);
    let steps = rng.gen_range(1..=4);
    let mut scorer = RandomScorer::new(vocab, trial);
    if vocab >= 2 && rng.gen_bool(0.5) {
        scorer.end = Some(rng.gen_range(0..vocab));
    }
    if vocab >= 3 && rng.gen_bool(0.5) {
        let s = rng.gen_range(0..vocab);
        if Some(s) != scorer.end {
            scorer.sentence_end = Some(s);
        }
    }
    let config = DecodeConfig {
        beam_width: vocab.pow(steps as u32),
        alpha: if rng.gen_bool(0.5) {
            20.0
        } else {
            rng.gen_range(0.0..3.0)
        },
        gamma: rng.gen_range(0.0..6.0),
        max_len: steps,
        ..DecodeConfig::default()
    };
    (scorer, config, steps)
}

#[test]
fn term_search_equals_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let (scorer, config, steps) = random_case(&mut rng, trial);
        let out = beam_search_terms(&scorer, &config, steps).unwrap();
        let (tokens, score) = exhaustive_decode(&scorer, &config, Regime::Terms, steps, steps);
        assert_eq!(out.tokens, tokens, "trial {trial}");
        assert_eq!(out.score, score, "trial {trial}");
    }
}

#[test]
fn story_search_equals_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..100 {
        let (scorer, config, steps) = random_case(&mut rng, 1000 + trial);
        let out = beam_search_story(&scorer, &config, 9).unwrap();
        let (tokens, score) = exhaustive_decode(&scorer, &config, Regime::Story, steps, 9);
        assert_eq!(out.tokens, tokens, "trial {trial}");
        assert_eq!(out.score, score, "trial {trial}");
    }
}

#[test]
fn term_output_has_no_repeats_when_avoidable() {
    for seed in 0..40 {
        let vocab = 2 + (seed as usize % 4);
        let scorer = RandomScorer::new(vocab, seed);
        let steps = 1 + (seed as usize % vocab);
        let out = beam_search_terms(&scorer, &DecodeConfig::default(), steps).unwrap();
        let mut seen = out.tokens.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), out.tokens.len(), "seed {seed}: {:?}", out.tokens);
    }
}

#[test]
fn winner_dominates_final_beam_and_replays() {
    for seed in 0..30 {
        let mut scorer = RandomScorer::new(6, seed);
        scorer.end = Some(0);
        scorer.sentence_end = Some(1);
        let config = DecodeConfig {
            alpha: 2.0,
            gamma: 3.0,
            max_len: 12,
            ..DecodeConfig::default()
        };
        let out = beam_search_story(&scorer, &config, 12).unwrap();
        for step in &out.trace {
            for entry in step.beam.iter().filter(|e| e.finished) {
                assert!(out.score >= entry.score);
            }
        }
        let replayed = replay_score(&out.tokens, &scorer, &config, Regime::Story, 12).unwrap();
        assert!((replayed - out.score).abs() < 1e-9);
        let raw: f64 = (0..out.tokens.len())
            .map(|i| scorer.log_probs(&out.tokens[..i], 12).unwrap()[out.tokens[i]])
            .sum();
        assert!((raw - out.raw_logprob).abs() < 1e-12);
        assert!(out.raw_logprob <= 0.0);
    }
}

/// Fixed distribution regardless of prefix.
struct Fixed(Vec<f64>, Option<usize>);

impl StepScorer for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }

    fn log_probs(&self, _prefix: &[usize], _target_len: usize) -> Result<Vec<f64>> {
        Ok(self.0.iter().map(|p| p.ln()).collect())
    }

    fn sentence_end_token(&self) -> Option<usize> {
        self.1
    }
}

#[test]
fn replay_matches_hand_arithmetic() {
    // Tokens a=0, b=1 with p = 0.6 and 0.4 at every step.
    let s = Fixed(vec![0.6, 0.4], None);
    let c = DecodeConfig::default();
    let ab = replay_score(&[0, 1], &s, &c, Regime::Story, 2).unwrap();
    let aa = replay_score(&[0, 0], &s, &c, Regime::Story, 2).unwrap();
    assert!((ab - (0.6f64.ln() + 0.4f64.ln())).abs() < 1e-12);
    assert!((aa - (2.0 * 0.6f64.ln() - 20.0)).abs() < 1e-12);
    assert_eq!(replay_score(&[], &s, &c, Regime::Story, 2).unwrap(), 0.0);
}

#[test]
fn inter_sentence_penalty_decays_with_length() {
    // Uniform over {a, b, c, .}; the last token repeats `a` from the first
    // sentence after a growing filler.
    let s = Fixed(vec![0.25; 4], Some(3));
    let c = DecodeConfig::default();
    let mut last = f64::INFINITY;
    for filler in 0..3 {
        let mut toks = vec![0, 3];
        toks.extend_from_slice(&[1, 2][..filler]);
        toks.push(0);
        let raw = toks.len() as f64 * 0.25f64.ln();
        let penalty = raw - replay_score(&toks, &s, &c, Regime::Story, 4).unwrap();
        let l = (toks.len() - 1) as f64;
        assert!((penalty - 5.0 / l).abs() < 1e-12, "{toks:?}");
        assert!(penalty < last);
        last = penalty;
    }
}
