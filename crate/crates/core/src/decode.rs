//! Beam search with repetition penalties.
//!
//! Two regimes share one search loop. In the term regime a candidate token
//! already emitted for the current image loses `term_penalty`. In the story
//! regime a token already in the current sentence (`S`) loses `alpha` and a
//! token from an earlier sentence (`R`) loses `gamma / l`, where `l` is the
//! number of tokens emitted so far, floored at 1. Reserved tokens (end of
//! sequence, sentence end, separators) are never penalized.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Next-token distribution source for the decoders.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Normalized log-probabilities of the token after `prefix`.
    fn log_probs(&self, prefix: &[usize], target_len: usize) -> Result<Vec<f64>>;

    /// Token that finishes a hypothesis.
    fn end_token(&self) -> Option<usize> {
        None
    }

    /// Token that closes a sentence in the story regime.
    fn sentence_end_token(&self) -> Option<usize> {
        None
    }

    /// Tokens exempt from repetition penalties.
    fn is_reserved(&self, token: usize) -> bool {
        Some(token) == self.end_token() || Some(token) == self.sentence_end_token()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Terms,
    Story,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub term_penalty: f64,
    /// Step limit for story decoding.
    pub max_len: usize,
    pub sentence_end: String,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 3,
            alpha: 20.0,
            gamma: 5.0,
            term_penalty: 1e19,
            max_len: 100,
            sentence_end: ".".to_string(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("decode.beam_width must be at least 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("term_penalty", self.term_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "decode.{name} must be a finite non-negative number"
                )));
            }
        }
        if self.max_len == 0 {
            return Err(Error::config("decode.max_len must be at least 1"));
        }
        if self.sentence_end.is_empty() {
            return Err(Error::config("decode.sentence_end must be nonempty"));
        }
        Ok(())
    }
}

/// One partial or finished sequence on the beam.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub raw_logprob: f64,
    pub score: f64,
    pub finished: bool,
    /// `S`: penalized tokens of the current sentence (term regime: of the image).
    #[serde(skip)]
    current: BTreeSet<usize>,
    /// `R`: tokens of completed sentences.
    #[serde(skip)]
    previous: BTreeSet<usize>,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            raw_logprob: 0.0,
            score: 0.0,
            finished: false,
            current: BTreeSet::new(),
            previous: BTreeSet::new(),
        }
    }

    fn penalty(&self, token: usize, regime: Regime, config: &DecodeConfig, scorer: &dyn StepScorer) -> f64 {
        if scorer.is_reserved(token) {
            return 0.0;
        }
        match regime {
            Regime::Terms => {
                if self.current.contains(&token) {
                    config.term_penalty
                } else {
                    0.0
                }
            }
            Regime::Story => {
                let mut p = 0.0;
                if self.current.contains(&token) {
                    p += config.alpha;
                }
                if self.previous.contains(&token) {
                    p += config.gamma / self.tokens.len().max(1) as f64;
                }
                p
            }
        }
    }

    fn extend(&self, token: usize, logprob: f64, penalty: f64, regime: Regime, scorer: &dyn StepScorer) -> Self {
        let mut next = self.clone();
        next.tokens.push(token);
        next.raw_logprob += logprob;
        next.score += logprob - penalty;
        if Some(token) == scorer.end_token() {
            next.finished = true;
        } else if regime == Regime::Story && Some(token) == scorer.sentence_end_token() {
            let closed = std::mem::take(&mut next.current);
            next.previous.extend(closed);
        } else if !scorer.is_reserved(token) {
            next.current.insert(token);
        }
        next
    }

    /// Tokens with a trailing end token removed.
    pub fn content(&self, end_token: Option<usize>) -> &[usize] {
        match (self.tokens.last(), end_token) {
            (Some(&last), Some(end)) if last == end => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Beam order: higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub tokens: Vec<usize>,
    pub raw_logprob: f64,
    pub score: f64,
    pub finished: bool,
}

/// Beam contents after pruning at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub format_version: u32,
    pub regime: Regime,
    pub step: usize,
    pub beam: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeOutput {
    /// The winning sequence, including its end token when it finished.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub raw_logprob: f64,
    /// Set when the winner hit the step limit without an end token.
    pub truncated: bool,
    pub trace: Vec<TraceStep>,
}

impl DecodeOutput {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write_trace_jsonl(&mut out, &self.trace)?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn write_trace_jsonl(mut w: impl Write, trace: &[TraceStep]) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

fn checked_log_probs<S: StepScorer + ?Sized>(scorer: &S, prefix: &[usize], target_len: usize) -> Result<Vec<f64>> {
    let lp = scorer.log_probs(prefix, target_len)?;
    if lp.len() != scorer.vocab_size() {
        return Err(Error::data(format!(
            "scorer returned {} log-probabilities for a vocabulary of {}",
            lp.len(),
            scorer.vocab_size()
        )));
    }
    if let Some(bad) = lp.iter().find(|x| x.is_nan() || **x > 1e-9) {
        return Err(Error::Numeric(format!(
            "scorer returned log-probability {bad} after prefix {prefix:?}"
        )));
    }
    Ok(lp)
}

fn search<S: StepScorer + Sync>(
    scorer: &S,
    config: &DecodeConfig,
    regime: Regime,
    limit: usize,
    target_len: usize,
) -> Result<DecodeOutput> {
    config.validate()?;
    let vocab = scorer.vocab_size();
    if vocab == 0 {
        return Err(Error::data("cannot decode over an empty vocabulary"));
    }
    if limit == 0 {
        return Err(Error::config("decoding needs at least one step"));
    }
    let mut live = vec![Hypothesis::empty()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut trace = Vec::new();
    for step in 0..limit {
        let expanded: Vec<Vec<Hypothesis>> = live
            .par_iter()
            .map(|h| {
                let lp = checked_log_probs(scorer, &h.tokens, target_len)?;
                Ok((0..vocab)
                    .map(|x| {
                        let penalty = h.penalty(x, regime, config, scorer);
                        h.extend(x, lp[x], penalty, regime, scorer)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut candidates: Vec<Hypothesis> = expanded.into_iter().flatten().collect();
        candidates.sort_by(rank);
        candidates.truncate(config.beam_width);
        trace.push(TraceStep {
            format_version: TRACE_FORMAT_VERSION,
            regime,
            step,
            beam: candidates
                .iter()
                .map(|h| TraceEntry {
                    tokens: h.tokens.clone(),
                    raw_logprob: h.raw_logprob,
                    score: h.score,
                    finished: h.finished,
                })
                .collect(),
        });
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        // Scores never increase along a hypothesis, so once a finished
        // sequence strictly beats every live one the search is settled.
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || live.iter().all(|h| h.score < best_finished) {
            break;
        }
    }
    let has_end = scorer.end_token().is_some();
    let winner = finished
        .iter()
        .chain(live.iter())
        .min_by(|a, b| rank(a, b))
        .expect("beam search keeps at least one hypothesis");
    Ok(DecodeOutput {
        tokens: winner.tokens.clone(),
        score: winner.score,
        raw_logprob: winner.raw_logprob,
        truncated: has_end && !winner.finished,
        trace,
    })
}

/// Term-regime search over at most `steps` tokens.
pub fn beam_search_terms<S: StepScorer + Sync>(
    scorer: &S,
    config: &DecodeConfig,
    steps: usize,
) -> Result<DecodeOutput> {
    search(scorer, config, Regime::Terms, steps, steps)
}

/// Story-regime search up to `config.max_len` tokens; `target_len` is passed
/// through to the scorer for its length conditioning.
pub fn beam_search_story<S: StepScorer + Sync>(
    scorer: &S,
    config: &DecodeConfig,
    target_len: usize,
) -> Result<DecodeOutput> {
    search(scorer, config, Regime::Story, config.max_len, target_len)
}

/// Recomputes the penalized score the search assigns to `tokens`.
pub fn replay_score<S: StepScorer + ?Sized>(
    tokens: &[usize],
    scorer: &S,
    config: &DecodeConfig,
    regime: Regime,
    target_len: usize,
) -> Result<f64> {
    let scorer_dyn: &dyn StepScorer = &AsDyn(scorer);
    let mut h = Hypothesis::empty();
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= scorer.vocab_size() {
            return Err(Error::data(format!(
                "token id {tok} at position {i} is outside the vocabulary of {}",
                scorer.vocab_size()
            )));
        }
        let lp = checked_log_probs(scorer, &tokens[..i], target_len)?;
        let penalty = h.penalty(tok, regime, config, scorer_dyn);
        h = h.extend(tok, lp[tok], penalty, regime, scorer_dyn);
    }
    Ok(h.score)
}

struct AsDyn<'a, S: ?Sized>(&'a S);

impl<S: StepScorer + ?Sized> StepScorer for AsDyn<'_, S> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn log_probs(&self, prefix: &[usize], target_len: usize) -> Result<Vec<f64>> {
        self.0.log_probs(prefix, target_len)
    }

    fn end_token(&self) -> Option<usize> {
        self.0.end_token()
    }

    fn sentence_end_token(&self) -> Option<usize> {
        self.0.sentence_end_token()
    }

    fn is_reserved(&self, token: usize) -> bool {
        self.0.is_reserved(token)
    }
}
