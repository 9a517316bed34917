//! Term-path enrichment: turn knowledge-graph links between consecutive
//! images into inserted term segments and keep the candidate path the
//! language model finds least perplexing.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{CrossImageLink, Hop, KnowledgeGraph, LinkTuples};
use crate::lm::{SequenceScorer, SEP};
use crate::terms::{Lexicon, Term, TermSet};

pub const IMAGES_PER_STORY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichConfig {
    /// `None` enables two-hop links unless the graph holds only OpenIE tuples.
    pub allow_two_hop: Option<bool>,
    pub max_insertions: usize,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        EnrichConfig {
            allow_two_hop: None,
            max_insertions: 1,
        }
    }
}

impl EnrichConfig {
    pub fn two_hop_enabled(&self, kg: &KnowledgeGraph) -> bool {
        self.allow_two_hop.unwrap_or_else(|| kg.has_non_openie())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLink {
    pub gap: usize,
    pub hop: Hop,
    pub tuples: LinkTuples,
    pub segment: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Origin {
    Image(usize),
    Inserted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub origin: Origin,
    pub terms: Vec<Term>,
    /// Provenance for inserted segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkTuples>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedPath {
    pub segments: Vec<Segment>,
    pub insertion_count: usize,
}

impl EnrichedPath {
    /// The zero-insertion path made of the five image term sets.
    pub fn baseline(termsets: &[TermSet]) -> Result<Self> {
        check_termsets(termsets)?;
        Ok(EnrichedPath {
            segments: termsets
                .iter()
                .map(|ts| Segment {
                    origin: Origin::Image(ts.image_index),
                    terms: ts.terms.clone(),
                    link: None,
                })
                .collect(),
            insertion_count: 0,
        })
    }

    /// Checks the segment layout: five image segments in order, each
    /// inserted segment sitting between the two images of its gap.
    pub fn validate(&self, max_insertions: usize) -> Result<()> {
        let mut next_image = 0;
        let mut inserted = 0;
        for seg in &self.segments {
            match seg.origin {
                Origin::Image(i) => {
                    if i != next_image {
                        return Err(Error::data(format!("image segment {i} out of order")));
                    }
                    next_image += 1;
                }
                Origin::Inserted(g) => {
                    if next_image == 0 || g != next_image - 1 || g + 1 >= IMAGES_PER_STORY {
                        return Err(Error::data(format!("inserted segment for gap {g} misplaced")));
                    }
                    inserted += 1;
                }
            }
        }
        if next_image != IMAGES_PER_STORY {
            return Err(Error::data(format!("path has {next_image} image segments")));
        }
        if inserted != self.insertion_count || inserted > max_insertions {
            return Err(Error::data(format!(
                "path has {inserted} insertions (recorded {}, max {max_insertions})",
                self.insertion_count
            )));
        }
        Ok(())
    }

    /// The path with every inserted segment removed.
    pub fn without_insertions(&self) -> EnrichedPath {
        EnrichedPath {
            segments: self
                .segments
                .iter()
                .filter(|s| matches!(s.origin, Origin::Image(_)))
                .cloned()
                .collect(),
            insertion_count: 0,
        }
    }
}

fn check_termsets(termsets: &[TermSet]) -> Result<()> {
    if termsets.len() != IMAGES_PER_STORY {
        return Err(Error::data(format!(
            "expected {IMAGES_PER_STORY} term sets, got {}",
            termsets.len()
        )));
    }
    for (i, ts) in termsets.iter().enumerate() {
        if ts.image_index != i {
            return Err(Error::data(format!("term set {i} has image index {}", ts.image_index)));
        }
    }
    Ok(())
}

/// Frame term for a relation label: the lexicon frame of the label when it
/// has one, otherwise the label itself capitalised with spaces turned into
/// underscores (`cause to experience` -> `Cause_to_experience_FRAME`).
pub fn relation_term(label: &str, lexicon: &Lexicon) -> Result<Term> {
    if let Some(frame) = lexicon.frame_for(label.trim()) {
        return Term::frame(frame);
    }
    let joined = label.split_whitespace().collect::<Vec<_>>().join("_");
    let mut chars = joined.chars();
    let name: String = match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    Term::frame(&name)
}

pub fn link_to_segment(link: &LinkTuples, lexicon: &Lexicon) -> Result<Vec<Term>> {
    Ok(match link {
        LinkTuples::One(t) => vec![t.head.clone(), relation_term(&t.rela, lexicon)?, t.tail.clone()],
        LinkTuples::Two(p) => vec![
            p.first.head.clone(),
            relation_term(&p.first.rela, lexicon)?,
            p.first.tail.clone(),
            relation_term(&p.second.rela, lexicon)?,
            p.second.tail.clone(),
        ],
    })
}

pub fn candidate_links(
    termsets: &[TermSet],
    kg: &KnowledgeGraph,
    lexicon: &Lexicon,
    config: &EnrichConfig,
) -> Result<Vec<Vec<CandidateLink>>> {
    check_termsets(termsets)?;
    let two_hop = config.two_hop_enabled(kg);
    termsets
        .windows(2)
        .map(|pair| {
            kg.cross_image_links(&pair[0], &pair[1], two_hop)?
                .into_iter()
                .map(|CrossImageLink { gap, tuples }| {
                    Ok(CandidateLink {
                        gap,
                        hop: tuples.hop(),
                        segment: link_to_segment(&tuples, lexicon)?,
                        tuples,
                    })
                })
                .collect()
        })
        .collect()
}

/// The baseline path followed by one candidate per choice of links, with
/// at most one link per gap and at most `max_insertions` links overall.
/// With the default single insertion this is the baseline plus one path
/// per link, ordered by gap and then link order.
pub fn build_candidates(
    termsets: &[TermSet],
    kg: &KnowledgeGraph,
    lexicon: &Lexicon,
    config: &EnrichConfig,
) -> Result<Vec<EnrichedPath>> {
    let per_gap = candidate_links(termsets, kg, lexicon, config)?;
    let mut out = Vec::new();
    let mut chosen: Vec<Option<&CandidateLink>> = vec![None; per_gap.len()];
    enumerate_choices(&per_gap, 0, config.max_insertions, &mut chosen, &mut |choice| {
        out.push(assemble(termsets, choice));
    });
    out.sort_by_cached_key(|p| {
        let gaps: Vec<usize> = p
            .segments
            .iter()
            .filter_map(|s| match s.origin {
                Origin::Inserted(g) => Some(g),
                Origin::Image(_) => None,
            })
            .collect();
        (p.insertion_count, gaps)
    });
    Ok(out)
}

fn enumerate_choices<'a>(
    per_gap: &'a [Vec<CandidateLink>],
    gap: usize,
    budget: usize,
    chosen: &mut Vec<Option<&'a CandidateLink>>,
    emit: &mut impl FnMut(&[Option<&'a CandidateLink>]),
) {
    if gap == per_gap.len() {
        emit(chosen);
        return;
    }
    chosen[gap] = None;
    enumerate_choices(per_gap, gap + 1, budget, chosen, emit);
    if budget == 0 {
        return;
    }
    for link in &per_gap[gap] {
        chosen[gap] = Some(link);
        enumerate_choices(per_gap, gap + 1, budget - 1, chosen, emit);
    }
    chosen[gap] = None;
}

fn assemble(termsets: &[TermSet], choice: &[Option<&CandidateLink>]) -> EnrichedPath {
    let mut segments = Vec::new();
    let mut insertion_count = 0;
    for (i, ts) in termsets.iter().enumerate() {
        segments.push(Segment {
            origin: Origin::Image(i),
            terms: ts.terms.clone(),
            link: None,
        });
        if let Some(Some(link)) = choice.get(i) {
            segments.push(Segment {
                origin: Origin::Inserted(i),
                terms: link.segment.clone(),
                link: Some(link.tuples.clone()),
            });
            insertion_count += 1;
        }
    }
    EnrichedPath {
        segments,
        insertion_count,
    }
}

/// Canonical term strings of every segment joined by `<sep>`.
pub fn flatten(path: &EnrichedPath) -> Vec<String> {
    flatten_segments(path.segments.iter().map(|s| s.terms.as_slice()))
}

/// Joins term segments with `<sep>`, as [`flatten`] does for a path.
pub fn flatten_segments<'a>(segments: impl IntoIterator<Item = &'a [Term]>) -> Vec<String> {
    let mut out = Vec::new();
    for (i, terms) in segments.into_iter().enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        out.extend(terms.iter().map(Term::render));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub path: EnrichedPath,
    pub flattened: Vec<String>,
    pub perplexity: f64,
}

/// Perplexity of every candidate, in candidate order.
pub fn score_candidates(candidates: &[EnrichedPath], lm: &dyn SequenceScorer) -> Vec<ScoredCandidate> {
    candidates
        .par_iter()
        .map(|path| {
            let flattened = flatten(path);
            let perplexity = lm.perplexity(&flattened);
            ScoredCandidate {
                path: path.clone(),
                flattened,
                perplexity,
            }
        })
        .collect()
}

fn compare_scored(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    a.perplexity
        .total_cmp(&b.perplexity)
        .then(a.path.insertion_count.cmp(&b.path.insertion_count))
        .then_with(|| a.flattened.cmp(&b.flattened))
        .then_with(|| provenance(&a.path).cmp(&provenance(&b.path)))
}

fn provenance(path: &EnrichedPath) -> Vec<Option<&LinkTuples>> {
    path.segments.iter().map(|s| s.link.as_ref()).collect()
}

/// Index of the minimum-perplexity candidate; ties go to fewer insertions,
/// then to the lexicographically smaller flattened path, then to the
/// smaller link provenance (tuple order, which ranks sources).
pub fn select_index(scored: &[ScoredCandidate]) -> Result<usize> {
    scored
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| compare_scored(a, b))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::data("no candidate paths to select from"))
}

pub fn select_path(candidates: &[EnrichedPath], lm: &dyn SequenceScorer) -> Result<EnrichedPath> {
    let scored = score_candidates(candidates, lm);
    let best = select_index(&scored)?;
    Ok(scored[best].path.clone())
}
