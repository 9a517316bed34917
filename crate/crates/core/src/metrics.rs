//! Automatic text metrics: BLEU, ROUGE-L and distinct-n.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
    }
    counts
}

/// Modified (clipped) `k`-gram precision as `(matches, total)`.
pub fn modified_precision<S: AsRef<str>, R: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<R>],
    k: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, k);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, k) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let total = cand.values().sum();
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, total)
}

/// Sentence BLEU: geometric mean of clipped precisions for orders `1..=n`
/// times the brevity penalty against the closest reference length. No
/// smoothing, so any zero precision gives 0.
pub fn bleu_n<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::data(format!("BLEU order {n} outside 1..=4")));
    }
    if references.is_empty() {
        return Err(Error::data("BLEU needs at least one reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision(candidate, references, k);
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are nonempty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * (log_sum / n as f64).exp()).clamp(0.0, 1.0))
}

fn lcs_len<S: AsRef<str>, R: AsRef<str>>(a: &[S], b: &[R]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence, best over references.
pub fn rouge_l<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .fold(0.0, f64::max)
}

/// Unique `n`-grams over total `n`-grams across all `stories`.
pub fn distinct_n<S: AsRef<str>>(stories: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::data("distinct-n needs n >= 1"));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for s in stories {
        if s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            unique.insert(w.iter().map(|t| t.as_ref()).collect::<Vec<_>>());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::data(format!("no {n}-grams in the corpus")));
    }
    Ok(unique.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryScores {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stories: Vec<StoryScores>,
    /// BLEU and ROUGE-L averaged over stories; distinct-n over the corpus.
    pub corpus: Scores,
}

impl MetricReport {
    pub fn all_in_unit_interval(&self) -> bool {
        let ok = |s: &Scores| {
            [
                s.bleu_1,
                s.bleu_2,
                s.bleu_3,
                s.bleu_4,
                s.rouge_l,
                s.distinct_1,
                s.distinct_2,
            ]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
        };
        ok(&self.corpus) && self.stories.iter().all(|s| ok(&s.scores))
    }
}

/// Story id, candidate tokens and reference token lists.
pub type EvalItem = (String, Vec<String>, Vec<Vec<String>>);

/// Per-story scores and their corpus aggregate.
pub fn evaluate(items: &[EvalItem]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let mut stories = Vec::with_capacity(items.len());
    for (id, cand, refs) in items {
        let one = std::slice::from_ref(cand);
        stories.push(StoryScores {
            id: id.clone(),
            scores: Scores {
                bleu_1: bleu_n(cand, refs, 1)?,
                bleu_2: bleu_n(cand, refs, 2)?,
                bleu_3: bleu_n(cand, refs, 3)?,
                bleu_4: bleu_n(cand, refs, 4)?,
                rouge_l: rouge_l(cand, refs),
                distinct_1: distinct_n(one, 1).unwrap_or(0.0),
                distinct_2: distinct_n(one, 2).unwrap_or(0.0),
            },
        });
    }
    let n = stories.len() as f64;
    let mean = |f: fn(&Scores) -> f64| stories.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
    let cands: Vec<Vec<String>> = items.iter().map(|(_, c, _)| c.clone()).collect();
    let corpus = Scores {
        bleu_1: mean(|s| s.bleu_1),
        bleu_2: mean(|s| s.bleu_2),
        bleu_3: mean(|s| s.bleu_3),
        bleu_4: mean(|s| s.bleu_4),
        rouge_l: mean(|s| s.rouge_l),
        distinct_1: distinct_n(&cands, 1).unwrap_or(0.0),
        distinct_2: distinct_n(&cands, 2).unwrap_or(0.0),
    };
    Ok(MetricReport { stories, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_fixtures() {
        let r = vec![toks("a b c d")];
        assert_eq!(bleu_n(&toks("a b c d"), &r, 4).unwrap(), 1.0);
        assert_eq!(bleu_n(&toks("x y z"), &r, 1).unwrap(), 0.0);
        let v = bleu_n(&toks("a b c"), &[toks("a b d")], 1).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bleu_n(&Vec::<String>::new(), &r, 1).unwrap(), 0.0);
        assert!(bleu_n(&toks("a"), &r, 5).is_err());
    }

    #[test]
    fn bleu_clips_and_penalizes_brevity() {
        // "the the the" vs "the cat": clipped 1/3, BP 1 since 3 > 2.
        let v = bleu_n(&toks("the the the"), &[toks("the cat")], 1).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // "a b" vs "a b c d": p1 = 1, BP = exp(1 - 4/2).
        let v = bleu_n(&toks("a b"), &[toks("a b c d")], 1).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_fixtures() {
        assert_eq!(rouge_l(&toks("a b c"), &[toks("a b c")]), 1.0);
        assert_eq!(rouge_l(&toks("a b c"), &[toks("x y")]), 0.0);
        // LCS("a b c d", "a c e") = 2: P = 1/2, R = 2/3.
        let v = rouge_l(&toks("a b c d"), &[toks("a c e")]);
        assert!((v - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn distinct_fixtures() {
        assert!((distinct_n(&[toks("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[toks("a b c")], 2).unwrap(), 1.0);
        assert!(distinct_n(&[toks("a")], 2).is_err());
        let many: Vec<_> = (0..1000).map(|_| toks("a b")).collect();
        assert!((distinct_n(&many, 1).unwrap() - 2.0 / 2000.0).abs() < 1e-15);
    }

    #[test]
    fn report_in_range() {
        let items = vec![
            ("s1".to_string(), toks("a b c ."), vec![toks("a b d .")]),
            ("s2".to_string(), toks("x"), vec![toks("x y")]),
        ];
        let r = evaluate(&items).unwrap();
        assert!(r.all_in_unit_interval());
        assert_eq!(r.stories.len(), 2);
    }
}
