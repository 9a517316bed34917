//! Relation-tuple store with head, tail and (head, tail) indexes.
//!
//! Tuples are directed `(head, rela, tail)` edges between canonical terms.
//! Terms and relation labels are interned; every query goes through an
//! index and never scans the tuple store.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terms::{parse_term, Term, TermSet};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    VisualGenome,
    Openie,
    Other,
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "visualgenome" | "vg" => Ok(Source::VisualGenome),
            "openie" => Ok(Source::Openie),
            "other" => Ok(Source::Other),
            _ => Err(Error::config(format!("unknown tuple source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTuple {
    pub head: Term,
    pub rela: String,
    pub tail: Term,
    pub source: Source,
}

/// `first.tail == second.head`; that shared term is the middle entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TwoHopPath {
    pub first: RelationTuple,
    pub second: RelationTuple,
}

impl TwoHopPath {
    pub fn middle(&self) -> &Term {
        &self.first.tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Hop {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTuples {
    One(RelationTuple),
    Two(TwoHopPath),
}

impl LinkTuples {
    pub fn head(&self) -> &Term {
        match self {
            LinkTuples::One(t) => &t.head,
            LinkTuples::Two(p) => &p.first.head,
        }
    }

    pub fn tail(&self) -> &Term {
        match self {
            LinkTuples::One(t) => &t.tail,
            LinkTuples::Two(p) => &p.second.tail,
        }
    }

    pub fn hop(&self) -> Hop {
        match self {
            LinkTuples::One(_) => Hop::One,
            LinkTuples::Two(_) => Hop::Two,
        }
    }
}

/// A KG connection between a term of image `gap` and a term of image
/// `gap + 1`, before it is turned into a term segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossImageLink {
    pub gap: usize,
    pub tuples: LinkTuples,
}

type TermId = u32;
type LabelId = u32;
type TupleId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct StoredTuple {
    head: TermId,
    rela: LabelId,
    tail: TermId,
    source: Source,
}

#[derive(Debug, Default, Clone)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }
}

#[derive(Debug, Default, Clone)]
pub struct KnowledgeGraph {
    terms: Vec<Term>,
    term_ids: HashMap<Term, TermId>,
    labels: Interner,
    tuples: Vec<StoredTuple>,
    dedup: HashSet<StoredTuple>,
    by_head: HashMap<TermId, Vec<TupleId>>,
    by_tail: HashMap<TermId, Vec<TupleId>>,
    by_pair: HashMap<(TermId, TermId), Vec<TupleId>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tuple_count(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// True when at least one tuple comes from a source other than OpenIE.
    pub fn has_non_openie(&self) -> bool {
        self.tuples.iter().any(|t| t.source != Source::Openie)
    }

    fn term_id(&mut self, term: &Term) -> TermId {
        if let Some(&id) = self.term_ids.get(term) {
            return id;
        }
        let id = self.terms.len() as TermId;
        self.terms.push(term.clone());
        self.term_ids.insert(term.clone(), id);
        id
    }

    /// Adds one tuple; returns false when it was already stored.
    pub fn insert(&mut self, tuple: &RelationTuple) -> Result<bool> {
        if tuple.rela.trim().is_empty() {
            return Err(Error::data("relation label is empty"));
        }
        let stored = StoredTuple {
            head: self.term_id(&tuple.head),
            rela: self.labels.intern(&tuple.rela),
            tail: self.term_id(&tuple.tail),
            source: tuple.source,
        };
        if !self.dedup.insert(stored) {
            return Ok(false);
        }
        let id = self.tuples.len() as TupleId;
        self.tuples.push(stored);
        self.by_head.entry(stored.head).or_default().push(id);
        self.by_tail.entry(stored.tail).or_default().push(id);
        self.by_pair.entry((stored.head, stored.tail)).or_default().push(id);
        Ok(true)
    }

    /// Reads `head\trela\ttail` lines; `#` comments and blank lines are
    /// skipped. Returns the number of new unique tuples.
    pub fn ingest(&mut self, reader: impl BufRead, source: Source, context: &str) -> Result<usize> {
        let mut added = 0;
        for (idx, line) in reader.lines().enumerate() {
            let bad = |reason: String| Error::Line {
                context: context.to_string(),
                line: idx + 1,
                reason,
            };
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(bad("empty field".into()));
            }
            let head = parse_term(fields[0].trim()).map_err(|e| bad(e.to_string()))?;
            let tail = parse_term(fields[2].trim()).map_err(|e| bad(e.to_string()))?;
            let tuple = RelationTuple {
                head,
                rela: fields[1].trim().to_string(),
                tail,
                source,
            };
            if self.insert(&tuple)? {
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn ingest_file(&mut self, path: &Path, source: Source) -> Result<usize> {
        self.ingest(crate::io::open(path)?, source, &path.display().to_string())
    }

    fn materialize(&self, id: TupleId) -> RelationTuple {
        let t = self.tuples[id as usize];
        RelationTuple {
            head: self.terms[t.head as usize].clone(),
            rela: self.labels.names[t.rela as usize].clone(),
            tail: self.terms[t.tail as usize].clone(),
            source: t.source,
        }
    }

    fn pair_ids(&self, head: TermId, tail: TermId) -> &[TupleId] {
        self.by_pair.get(&(head, tail)).map(Vec::as_slice).unwrap_or(&[])
    }

    fn sort_key(&self, id: TupleId) -> (&str, Source) {
        let t = &self.tuples[id as usize];
        (self.labels.names[t.rela as usize].as_str(), t.source)
    }

    /// All stored `(head, ·, tail)` tuples ordered by label, then source.
    pub fn one_hop(&self, head: &Term, tail: &Term) -> Vec<RelationTuple> {
        let (Some(&h), Some(&t)) = (self.term_ids.get(head), self.term_ids.get(tail)) else {
            return Vec::new();
        };
        let mut ids = self.pair_ids(h, t).to_vec();
        ids.sort_by(|a, b| self.sort_key(*a).cmp(&self.sort_key(*b)));
        ids.into_iter().map(|id| self.materialize(id)).collect()
    }

    /// All `(head, ·, m), (m, ·, tail)` chains with `m` distinct from both
    /// endpoints, found by joining the head index with the pair index.
    /// Ordered by middle term, then first and second (label, source).
    pub fn two_hop(&self, head: &Term, tail: &Term) -> Vec<TwoHopPath> {
        let (Some(&h), Some(&t)) = (self.term_ids.get(head), self.term_ids.get(tail)) else {
            return Vec::new();
        };
        let Some(firsts) = self.by_head.get(&h) else {
            return Vec::new();
        };
        let mut pairs: Vec<(TupleId, TupleId)> = Vec::new();
        for &first in firsts {
            let middle = self.tuples[first as usize].tail;
            if middle == h || middle == t {
                continue;
            }
            for &second in self.pair_ids(middle, t) {
                pairs.push((first, second));
            }
        }
        pairs.sort_by(|a, b| {
            let ma = &self.terms[self.tuples[a.0 as usize].tail as usize];
            let mb = &self.terms[self.tuples[b.0 as usize].tail as usize];
            ma.cmp(mb)
                .then_with(|| self.sort_key(a.0).cmp(&self.sort_key(b.0)))
                .then_with(|| self.sort_key(a.1).cmp(&self.sort_key(b.1)))
        });
        pairs
            .into_iter()
            .map(|(a, b)| TwoHopPath {
                first: self.materialize(a),
                second: self.materialize(b),
            })
            .collect()
    }

    /// Links for every (head in `left`, tail in `right`) pair: one-hop
    /// tuples, then two-hop paths when enabled. Pairs are visited in term-set
    /// order.
    pub fn cross_image_links(
        &self,
        left: &TermSet,
        right: &TermSet,
        allow_two_hop: bool,
    ) -> Result<Vec<CrossImageLink>> {
        if left.image_index + 1 != right.image_index {
            return Err(Error::data(format!(
                "term sets are not consecutive: images {} and {}",
                left.image_index, right.image_index
            )));
        }
        let gap = left.image_index;
        let mut links = Vec::new();
        for head in &left.terms {
            for tail in &right.terms {
                links.extend(self.one_hop(head, tail).into_iter().map(|t| CrossImageLink {
                    gap,
                    tuples: LinkTuples::One(t),
                }));
                if allow_two_hop {
                    links.extend(self.two_hop(head, tail).into_iter().map(|p| CrossImageLink {
                        gap,
                        tuples: LinkTuples::Two(p),
                    }));
                }
            }
        }
        Ok(links)
    }

    /// All tuples in insertion order.
    pub fn tuples(&self) -> impl Iterator<Item = RelationTuple> + '_ {
        (0..self.tuples.len() as TupleId).map(|id| self.materialize(id))
    }

    /// Rebuilds the indexes from the tuple store and compares them with the
    /// live ones.
    pub fn check_indexes(&self) -> Result<()> {
        let mut rebuilt = KnowledgeGraph::new();
        for t in self.tuples() {
            rebuilt.insert(&t)?;
        }
        let remap = |g: &KnowledgeGraph, idx: &HashMap<TermId, Vec<TupleId>>| {
            let mut out: Vec<(Term, Vec<RelationTuple>)> = idx
                .iter()
                .map(|(k, ids)| {
                    let mut v: Vec<_> = ids.iter().map(|&i| g.materialize(i)).collect();
                    v.sort();
                    (g.terms[*k as usize].clone(), v)
                })
                .collect();
            out.sort();
            out
        };
        if remap(self, &self.by_head) != remap(&rebuilt, &rebuilt.by_head)
            || remap(self, &self.by_tail) != remap(&rebuilt, &rebuilt.by_tail)
        {
            return Err(Error::data("knowledge graph head/tail index is inconsistent"));
        }
        let indexed: usize = self.by_pair.values().map(Vec::len).sum();
        if indexed != self.tuples.len() || rebuilt.tuple_count() != self.tuple_count() {
            return Err(Error::data("knowledge graph pair index is inconsistent"));
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            format_version: GRAPH_FORMAT_VERSION,
            tuple_count: self.tuple_count(),
            tuples: self
                .tuples()
                .map(|t| (t.head.render(), t.rela, t.tail.render(), t.source))
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: GraphSnapshot) -> Result<Self> {
        if snapshot.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::data(format!(
                "graph snapshot format_version {} is not supported (expected {})",
                snapshot.format_version, GRAPH_FORMAT_VERSION
            )));
        }
        let mut kg = KnowledgeGraph::new();
        for (head, rela, tail, source) in snapshot.tuples {
            kg.insert(&RelationTuple {
                head: parse_term(&head)?,
                rela,
                tail: parse_term(&tail)?,
                source,
            })?;
        }
        if kg.tuple_count() != snapshot.tuple_count {
            return Err(Error::data(format!(
                "graph snapshot claims {} tuples but holds {} unique tuples",
                snapshot.tuple_count,
                kg.tuple_count()
            )));
        }
        Ok(kg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.to_snapshot())?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_snapshot(crate::io::read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub format_version: u32,
    pub tuple_count: usize,
    pub tuples: Vec<(String, String, String, Source)>,
}
