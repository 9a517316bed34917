//! Interpolated absolute-discounting n-gram model over term sequences.
//!
//! For a context `h` seen `c(h)` times with `N1+(h)` distinct successors:
//!
//! ```text
//! P(w | h) = max(c(h, w) - D, 0) / c(h) + D * N1+(h) / c(h) * P(w | h')
//! ```
//!
//! where `h'` drops the oldest token, unseen contexts defer to `h'` directly,
//! and the recursion bottoms out in the uniform distribution over the
//! predictable vocabulary (everything except `<s>`). Unknown query tokens
//! are scored as `<unk>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

pub const LM_FORMAT_VERSION: u32 = 1;

const RESERVED: [&str; 4] = [BOS, EOS, SEP, UNK];
const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 3;

/// Anything that scores token sequences. Perplexity normalises by the
/// token count plus one for the end marker.
pub trait SequenceScorer: Sync {
    fn log_prob(&self, tokens: &[String]) -> f64;

    fn perplexity(&self, tokens: &[String]) -> f64 {
        let n = tokens.len() as f64 + 1.0;
        (-self.log_prob(tokens) / n).exp()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    discount: f64,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    /// `levels[k]` holds contexts of length `k`.
    levels: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

impl NGramModel {
    fn empty(order: usize, discount: f64) -> Result<Self> {
        if order < 2 {
            return Err(Error::config(format!("n-gram order must be at least 2, got {order}")));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::config(format!("discount must lie in (0, 1), got {discount}")));
        }
        let mut model = NGramModel {
            order,
            discount,
            vocab: Vec::new(),
            ids: HashMap::new(),
            levels: vec![HashMap::new(); order],
        };
        for r in RESERVED {
            model.intern(r);
        }
        Ok(model)
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.vocab.len() as u32;
        self.vocab.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Trains on `sequences`, each padded with `order - 1` `<s>` and one `</s>`.
    pub fn train<S: AsRef<str>>(sequences: &[Vec<S>], order: usize, discount: f64) -> Result<Self> {
        let mut model = Self::empty(order, discount)?;
        if sequences.is_empty() {
            return Err(Error::data("language model corpus is empty"));
        }
        for seq in sequences {
            let mut padded = vec![BOS_ID; order - 1];
            for tok in seq {
                let tok = tok.as_ref();
                let id = if tok == BOS { UNK_ID } else { model.intern(tok) };
                padded.push(id);
            }
            padded.push(EOS_ID);
            for i in (order - 1)..padded.len() {
                let next = padded[i];
                for k in 0..order {
                    let ctx = padded[i - k..i].to_vec();
                    let entry = model.levels[k].entry(ctx).or_default();
                    entry.total += 1;
                    *entry.next.entry(next).or_default() += 1;
                }
            }
        }
        Ok(model)
    }

    /// An untrained model: uniform over `words` plus `</s>`, `<sep>`, `<unk>`.
    pub fn uniform<S: AsRef<str>>(order: usize, words: &[S]) -> Result<Self> {
        let mut model = Self::empty(order, 0.5)?;
        for w in words {
            if w.as_ref() != BOS {
                model.intern(w.as_ref());
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Number of tokens that can be predicted (vocabulary minus `<s>`).
    pub fn predictable_size(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Predictable tokens in id order.
    pub fn predictable_tokens(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().skip(1).map(String::as_str)
    }

    fn id_of(&self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&id) if id != BOS_ID => id,
            _ => UNK_ID,
        }
    }

    /// Raw training count of `token` following `context` (length < order).
    pub fn count(&self, context: &[&str], token: &str) -> u64 {
        if context.len() >= self.order {
            return 0;
        }
        let Some(ctx) = context
            .iter()
            .map(|t| self.ids.get(*t).copied())
            .collect::<Option<Vec<u32>>>()
        else {
            return 0;
        };
        let Some(&tok) = self.ids.get(token) else {
            return 0;
        };
        self.levels[context.len()]
            .get(&ctx)
            .and_then(|c| c.next.get(&tok).copied())
            .unwrap_or(0)
    }

    fn prob_id(&self, history: &[u32], token: u32) -> f64 {
        let mut p = 1.0 / self.predictable_size() as f64;
        let max_k = (self.order - 1).min(history.len());
        for k in 0..=max_k {
            let ctx = &history[history.len() - k..];
            if let Some(c) = self.levels[k].get(ctx) {
                let total = c.total as f64;
                let seen = c.next.get(&token).copied().unwrap_or(0) as f64;
                let backoff = self.discount * c.next.len() as f64 / total;
                p = (seen - self.discount).max(0.0) / total + backoff * p;
            }
        }
        p
    }

    /// `P(token | context)`; the context is truncated to the last
    /// `order - 1` tokens and unknown tokens map to `<unk>`.
    pub fn prob(&self, context: &[&str], token: &str) -> f64 {
        let history: Vec<u32> = context
            .iter()
            .map(|t| if *t == BOS { BOS_ID } else { self.id_of(t) })
            .collect();
        self.prob_id(&history, self.id_of(token))
    }

    /// Full next-token distribution for `context`, in predictable-token order.
    pub fn distribution(&self, context: &[&str]) -> Vec<f64> {
        let history: Vec<u32> = context
            .iter()
            .map(|t| if *t == BOS { BOS_ID } else { self.id_of(t) })
            .collect();
        (1..self.vocab.len() as u32)
            .map(|id| self.prob_id(&history, id))
            .collect()
    }

    /// Every context observed in training, as token strings.
    pub fn seen_contexts(&self) -> Vec<Vec<&str>> {
        let mut out: Vec<Vec<&str>> = self
            .levels
            .iter()
            .flat_map(|level| level.keys())
            .map(|ctx| ctx.iter().map(|&id| self.vocab[id as usize].as_str()).collect())
            .collect();
        out.sort();
        out
    }

    /// Largest `|Σ_w P(w | h) - 1|` over all seen contexts.
    pub fn max_normalization_error(&self) -> f64 {
        self.seen_contexts()
            .iter()
            .map(|ctx| (self.distribution(ctx).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_snapshot(&self) -> LmSnapshot {
        let levels = self
            .levels
            .iter()
            .map(|level| {
                let mut entries: Vec<ContextEntry> = level
                    .iter()
                    .map(|(ctx, c)| (ctx.clone(), c.next.iter().map(|(&k, &v)| (k, v)).collect()))
                    .collect();
                entries.sort();
                entries
            })
            .collect();
        LmSnapshot {
            format_version: LM_FORMAT_VERSION,
            order: self.order,
            discount: self.discount,
            vocab: self.vocab.clone(),
            levels,
        }
    }

    pub fn from_snapshot(snapshot: LmSnapshot) -> Result<Self> {
        if snapshot.format_version != LM_FORMAT_VERSION {
            return Err(Error::data(format!(
                "language model format_version {} is not supported",
                snapshot.format_version
            )));
        }
        let mut model = Self::empty(snapshot.order, snapshot.discount)?;
        if snapshot.vocab.len() < RESERVED.len() || snapshot.vocab[..RESERVED.len()] != RESERVED {
            return Err(Error::data("language model vocabulary lacks reserved tokens"));
        }
        for tok in &snapshot.vocab {
            model.intern(tok);
        }
        if model.vocab.len() != snapshot.vocab.len() {
            return Err(Error::data("language model vocabulary has duplicates"));
        }
        if snapshot.levels.len() != snapshot.order {
            return Err(Error::data("language model level count does not match order"));
        }
        let vocab_len = model.vocab.len() as u32;
        for (k, entries) in snapshot.levels.into_iter().enumerate() {
            for (ctx, next) in entries {
                if ctx.len() != k || ctx.iter().chain(next.iter().map(|(t, _)| t)).any(|&id| id >= vocab_len) {
                    return Err(Error::data("language model snapshot has malformed counts"));
                }
                let counts = ContextCounts {
                    total: next.iter().map(|(_, c)| c).sum(),
                    next: next.into_iter().collect(),
                };
                model.levels[k].insert(ctx, counts);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.to_snapshot())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_snapshot(crate::io::read_json(path)?)
    }
}

impl SequenceScorer for NGramModel {
    fn log_prob(&self, tokens: &[String]) -> f64 {
        let mut history = vec![BOS_ID; self.order - 1];
        let mut total = 0.0;
        for tok in tokens.iter().map(|t| self.id_of(t)).chain(std::iter::once(EOS_ID)) {
            total += self.prob_id(&history[history.len() - (self.order - 1)..], tok).ln();
            history.push(tok);
        }
        total
    }
}

/// A context's token ids with its `(successor id, count)` pairs.
pub type ContextEntry = (Vec<u32>, Vec<(u32, u64)>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSnapshot {
    pub format_version: u32,
    pub order: usize,
    pub discount: f64,
    pub vocab: Vec<String>,
    pub levels: Vec<Vec<ContextEntry>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn hand_counted_bigrams() {
        let m = NGramModel::train(&[seq("a b"), seq("a b")], 2, 0.75).unwrap();
        assert_eq!(m.count(&["a"], "b"), 2);
        assert_eq!(m.count(&["<s>"], "a"), 2);
        assert_eq!(m.count(&["b"], "</s>"), 2);
        assert_eq!(m.count(&["a"], "a"), 0);

        let single = NGramModel::train(&[seq("a")], 2, 0.75).unwrap();
        assert_eq!(single.count(&["a"], "</s>"), 1);
    }

    #[test]
    fn rejects_bad_training_input() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(NGramModel::train(&empty, 2, 0.75).is_err());
        assert!(NGramModel::train(&[seq("a")], 1, 0.75).is_err());
        assert!(NGramModel::train(&[seq("a")], 2, 1.0).is_err());
        assert!(NGramModel::train(&[seq("a")], 2, 0.0).is_err());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let m = NGramModel::uniform(3, &["a"]).unwrap();
        assert_eq!(m.predictable_size(), 4);
        let s = seq("a zz a");
        assert!((m.log_prob(&s) - 4.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((m.perplexity(&s) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_corpus_is_nearly_certain() {
        // Bigram, D = 0.75, corpus [[a, b]] x 4. Every context has a single
        // successor seen 4 times, the unigram level has a, b, </s> each 4 of
        // 12, and the base is uniform over {</s>, <sep>, <unk>, a, b}.
        let d: f64 = 0.75;
        let m = NGramModel::train(&vec![seq("a b"); 4], 2, d).unwrap();
        let uni = |seen: f64| (seen - d).max(0.0) / 12.0 + d * 3.0 / 12.0 * 0.2;
        let bi = |seen: f64, lower: f64| (seen - d).max(0.0) / 4.0 + d * 1.0 / 4.0 * lower;
        let expected = bi(4.0, uni(4.0)).ln() * 3.0;
        assert!((m.log_prob(&seq("a b")) - expected).abs() < 1e-12);
        assert!(m.log_prob(&seq("a b")) < 0.0);
        assert!(m.log_prob(&seq("a b")) > 3.0 * 0.85f64.ln());
    }

    #[test]
    fn unknown_tokens_get_unk_mass() {
        let m = NGramModel::train(&[seq("a b c")], 3, 0.75).unwrap();
        let p_unk = m.prob(&["a"], "<unk>");
        assert!(p_unk > 0.0);
        assert_eq!(m.prob(&["a"], "never-seen"), p_unk);
        assert!(m.log_prob(&seq("x y z")).is_finite());
    }

    #[test]
    fn appending_never_increases_log_prob() {
        let m = NGramModel::train(&[seq("a b c"), seq("b c a")], 3, 0.6).unwrap();
        let mut s = Vec::new();
        let mut prev = 0.0;
        for tok in ["a", "b", "c", "a", "q"] {
            s.push(tok.to_string());
            // Compare prefix scores without the end marker, which moves
            // with the sequence.
            let without_end: f64 = {
                let mut hist = vec!["<s>".to_string(); 2];
                let mut tot = 0.0;
                for t in &s {
                    let ctx: Vec<&str> = hist[hist.len() - 2..].iter().map(String::as_str).collect();
                    tot += m.prob(&ctx, t).ln();
                    hist.push(t.clone());
                }
                tot
            };
            assert!(without_end <= prev + 1e-15);
            prev = without_end;
        }
    }

    #[test]
    fn snapshot_round_trip_preserves_scores() {
        let m = NGramModel::train(&[seq("a b <sep> c"), seq("c a")], 3, 0.75).unwrap();
        let back = NGramModel::from_snapshot(m.to_snapshot()).unwrap();
        for probe in [seq("a b"), seq("c <sep> a q"), seq("b")] {
            assert_eq!(m.log_prob(&probe), back.log_prob(&probe));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        m.save(&path).unwrap();
        assert_eq!(NGramModel::load(&path).unwrap(), m);
    }

    #[test]
    fn normalised_on_trained_contexts() {
        let m = NGramModel::train(&[seq("a b c <sep> d"), seq("d c b"), seq("a a a")], 3, 0.75).unwrap();
        assert!(m.max_normalization_error() < 1e-12);
        for ctx in m.seen_contexts() {
            for p in m.distribution(&ctx) {
                assert!(p > 0.0 && p <= 1.0);
            }
        }
    }
}
