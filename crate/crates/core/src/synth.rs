//! Synthetic fixtures: random scorers and graphs for oracle tests, bulk
//! tuple files for load tests and a small self-consistent story world for
//! end-to-end runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::StepScorer;
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::kg::{RelationTuple, Source};
use crate::neural::{ImageRecord, ObjectRecord};
use crate::terms::{Story, StoryMentions, Term};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Scorer whose distribution is a fixed pseudo-random function of the
/// prefix.
#[derive(Debug, Clone)]
pub struct RandomScorer {
    pub vocab: usize,
    pub seed: u64,
    pub end: Option<usize>,
    pub sentence_end: Option<usize>,
    /// Logits are drawn from `[-spread, spread]`.
    pub spread: f64,
}

impl RandomScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        RandomScorer {
            vocab,
            seed,
            end: None,
            sentence_end: None,
            spread: 3.0,
        }
    }
}

impl StepScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefix: &[usize], _target_len: usize) -> Result<Vec<f64>> {
        let mut h = splitmix(self.seed);
        for &t in prefix {
            h = splitmix(h ^ (t as u64 + 1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| rng.gen_range(-self.spread..=self.spread))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|x| x - lse).collect())
    }

    fn end_token(&self) -> Option<usize> {
        self.end
    }

    fn sentence_end_token(&self) -> Option<usize> {
        self.sentence_end
    }
}

/// `count` random tuples over `terms` nouns named `t0..` and `labels`
/// relation labels, with random sources; duplicates are possible.
pub fn random_tuples(rng: &mut impl Rng, count: usize, terms: usize, labels: usize) -> Vec<RelationTuple> {
    let term = |i: usize| Term::noun(&format!("t{i}")).expect("generated lemma is valid");
    let sources = [Source::VisualGenome, Source::Openie, Source::Other];
    (0..count)
        .map(|_| RelationTuple {
            head: term(rng.gen_range(0..terms)),
            rela: format!("rel {}", rng.gen_range(0..labels)),
            tail: term(rng.gen_range(0..terms)),
            source: sources[rng.gen_range(0..sources.len())],
        })
        .collect()
}

/// A tuple file body of `count` lines over `terms` distinct nouns.
pub fn synthetic_tuple_tsv(count: usize, terms: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(count * 32);
    for _ in 0..count {
        let h = rng.gen_range(0..terms);
        let t = rng.gen_range(0..terms);
        let r = rng.gen_range(0..50);
        let _ = writeln!(out, "e{h}_NOUN\trel{r}\te{t}_NOUN");
    }
    out
}

const NOUNS: &[&str] = &[
    "dog", "cat", "man", "girl", "boy", "tree", "ball", "car", "house", "park", "beach", "cake", "bike", "boat",
    "bird", "horse", "table", "chair", "door", "window", "river", "hill", "road", "flower", "book", "hat", "cup",
    "shirt", "phone", "lamp", "fence", "kite", "sand", "snow", "train", "bus", "baby", "teacher", "crowd", "stage",
];

const VERBS: &[(&str, &str)] = &[
    ("go", "Motion"),
    ("see", "Perception_experience"),
    ("eat", "Ingestion"),
    ("play", "Competition"),
    ("hold", "Manipulation"),
    ("ride", "Ride_vehicle"),
    ("throw", "Cause_motion"),
    ("watch", "Perception_active"),
    ("chase", "Cotheme"),
    ("build", "Building"),
    ("carry", "Bringing"),
    ("open", "Opening"),
];

pub const TOY_PRONOUN: &str = "he";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub stories: usize,
    pub objects_per_image: usize,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            stories: 20,
            objects_per_image: 3,
            d_in: 8,
            seed: 11,
        }
    }
}

/// A small consistent corpus: every sentence is `noun verb noun .`, all
/// content words of a story are distinct, and each image's objects are
/// random vectors unique to that image. The lexicon recovers each
/// sentence's terms exactly. Story `1` opens its third sentence with a
/// pronoun resolved by an annotation.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub lexicon_tsv: String,
    pub stories: Vec<Story>,
    pub mentions: Vec<StoryMentions>,
    pub images: Vec<ImageRecord>,
    /// Text-only stories (no images).
    pub text_stories: Vec<Story>,
    pub tuples: Vec<RelationTuple>,
}

impl ToyWorld {
    pub fn generate(config: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut lexicon_tsv = String::new();
        for n in NOUNS {
            let _ = writeln!(lexicon_tsv, "noun\t{n}");
        }
        for (v, f) in VERBS {
            let _ = writeln!(lexicon_tsv, "frame\t{v}\t{f}");
        }
        let _ = writeln!(lexicon_tsv, "pronoun\t{TOY_PRONOUN}");

        let mut stories = Vec::with_capacity(config.stories);
        let mut images = Vec::new();
        let mut mentions = Vec::new();
        for s in 0..config.stories {
            let nouns: Vec<&str> = NOUNS.choose_multiple(&mut rng, 10).copied().collect();
            let verbs: Vec<&str> = VERBS.choose_multiple(&mut rng, 5).map(|(v, _)| *v).collect();
            let id = format!("toy{s:03}");
            let sentences: Vec<Vec<String>> = (0..5)
                .map(|t| {
                    vec![
                        nouns[2 * t].into(),
                        verbs[t].into(),
                        nouns[2 * t + 1].into(),
                        ".".into(),
                    ]
                })
                .collect();
            let mut written = sentences.clone();
            if s == 1 {
                written[2][0] = TOY_PRONOUN.to_string();
                mentions.push(StoryMentions {
                    story_id: id.clone(),
                    mentions: vec![(2, 0, vec![nouns[4].to_string()])],
                });
            }
            stories.push(Story {
                id: id.clone(),
                sentences: written,
            });
            for order in 1..=5 {
                images.push(ImageRecord {
                    image_id: format!("{id}-img{order}"),
                    order,
                    objects: (0..config.objects_per_image)
                        .map(|_| ObjectRecord {
                            confidence: rng.gen_range(0.05..1.0),
                            feature: (0..config.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        })
                        .collect(),
                    story_id: Some(id.clone()),
                });
            }
        }

        // One linkable pair: the last noun of image 2 and the first noun of
        // image 3 of story 0, joined by a verb story 0 does not use. The
        // text-only corpus tells the six-sentence version of that story.
        let s0 = &stories[0].sentences;
        let used: Vec<&str> = s0.iter().map(|x| x[1].as_str()).collect();
        let (verb, _) = VERBS
            .iter()
            .find(|(v, _)| !used.contains(v))
            .expect("twelve verbs cover five");
        let head = s0[2][2].clone();
        let tail = s0[3][0].clone();
        let mut six = s0.clone();
        six.insert(3, vec![head.clone(), verb.to_string(), tail.clone(), ".".into()]);
        let text_stories = vec![Story {
            id: "toy000-enriched".into(),
            sentences: six,
        }];
        let noun = |w: &str| Term::noun(w).expect("fixture noun is valid");
        let mut tuples = vec![RelationTuple {
            head: noun(&head),
            rela: verb.to_string(),
            tail: noun(&tail),
            source: Source::VisualGenome,
        }];
        // Distractors between words no story pairs across images.
        for (h, r, t) in [("lamp", "near", "fence"), ("kite", "above", "sand")] {
            tuples.push(RelationTuple {
                head: noun(h),
                rela: r.into(),
                tail: noun(t),
                source: Source::VisualGenome,
            });
        }

        ToyWorld {
            lexicon_tsv,
            stories,
            mentions,
            images,
            text_stories,
            tuples,
        }
    }

    /// Writes the world under `dir` and returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<ToyPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = ToyPaths {
            lexicon: dir.join("lexicon.tsv"),
            stories: dir.join("stories.jsonl"),
            mentions: dir.join("mentions.jsonl"),
            features: dir.join("features.jsonl"),
            text_stories: dir.join("text_stories.jsonl"),
            tuples: dir.join("tuples.tsv"),
        };
        std::fs::write(&paths.lexicon, &self.lexicon_tsv).map_err(|e| Error::io(&paths.lexicon, e))?;
        write_jsonl(&paths.stories, &self.stories)?;
        write_jsonl(&paths.mentions, &self.mentions)?;
        write_jsonl(&paths.features, &self.images)?;
        write_jsonl(&paths.text_stories, &self.text_stories)?;
        let mut tsv = String::from("# head\trela\ttail\n");
        for t in &self.tuples {
            let _ = writeln!(tsv, "{}\t{}\t{}", t.head, t.rela, t.tail);
        }
        std::fs::write(&paths.tuples, tsv).map_err(|e| Error::io(&paths.tuples, e))?;
        Ok(paths)
    }
}

#[derive(Debug, Clone)]
pub struct ToyPaths {
    pub lexicon: PathBuf,
    pub stories: PathBuf,
    pub mentions: PathBuf,
    pub features: PathBuf,
    pub text_stories: PathBuf,
    pub tuples: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terms::{extract_terms, replace_coreferences, Lexicon};

    #[test]
    fn random_scorer_is_normalized_and_stable() {
        let s = RandomScorer::new(5, 3);
        let a = s.log_probs(&[1, 2], 0).unwrap();
        assert_eq!(a, s.log_probs(&[1, 2], 0).unwrap());
        assert_ne!(a, s.log_probs(&[2, 1], 0).unwrap());
        let total: f64 = a.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_world_is_consistent() {
        let w = ToyWorld::generate(&ToyConfig::default());
        let lex = Lexicon::from_reader(w.lexicon_tsv.as_bytes(), "toy").unwrap();
        assert_eq!(w.stories.len(), 20);
        assert_eq!(w.images.len(), 100);
        for story in &w.stories {
            let ms: Vec<_> = w
                .mentions
                .iter()
                .filter(|m| m.story_id == story.id)
                .flat_map(|m| m.to_mentions())
                .collect();
            let fixed = replace_coreferences(story, &ms, &lex).unwrap();
            assert!(fixed.skipped.is_empty());
            for sentence in &fixed.story.sentences {
                assert_eq!(sentence.len(), 4);
                assert_eq!(extract_terms(sentence, &lex).len(), 3);
            }
            let mut words: Vec<_> = fixed.story.tokens().into_iter().filter(|t| t != ".").collect();
            let n = words.len();
            words.sort();
            words.dedup();
            assert_eq!(words.len(), n);
        }
        assert_eq!(w.text_stories[0].sentences.len(), 6);
    }

    #[test]
    fn tuple_tsv_has_requested_lines() {
        let body = synthetic_tuple_tsv(100, 10, 1);
        assert_eq!(body.lines().count(), 100);
        assert!(body.lines().all(|l| l.split('\t').count() == 3));
    }
}
