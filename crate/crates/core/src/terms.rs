//! Canonical noun/frame terms, lexicon-driven term extraction and
//! annotation-driven coreference replacement.
//!
//! A term renders as `lemma_NOUN` (lemma lowercased) or `Name_FRAME`
//! (frame name kept as stored). Parsing accepts any case for the suffix, so
//! `Dog_Noun` and `dog_NOUN` denote the same term.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TermKind {
    Noun,
    Frame,
}

impl TermKind {
    fn suffix(self) -> &'static str {
        match self {
            TermKind::Noun => "NOUN",
            TermKind::Frame => "FRAME",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Term {
    lemma: String,
    kind: TermKind,
}

impl Term {
    pub fn noun(lemma: &str) -> Result<Self> {
        Self::new(lemma, TermKind::Noun)
    }

    pub fn frame(name: &str) -> Result<Self> {
        Self::new(name, TermKind::Frame)
    }

    pub fn new(lemma: &str, kind: TermKind) -> Result<Self> {
        if lemma.is_empty() {
            return Err(Error::TermParse {
                input: lemma.to_string(),
                reason: "empty lemma",
            });
        }
        if lemma.chars().any(char::is_whitespace) {
            return Err(Error::TermParse {
                input: lemma.to_string(),
                reason: "lemma contains whitespace",
            });
        }
        let lemma = match kind {
            TermKind::Noun => lemma.to_lowercase(),
            TermKind::Frame => lemma.to_string(),
        };
        Ok(Term { lemma, kind })
    }

    pub fn lemma(&self) -> &str {
        &self.lemma
    }

    pub fn kind(&self) -> TermKind {
        self.kind
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.lemma, self.kind.suffix())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_term(s)
    }
}

impl TryFrom<String> for Term {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_term(&s)
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

/// Parses `<lemma>_NOUN` or `<name>_FRAME`; the suffix is matched
/// case-insensitively and split at the last underscore.
pub fn parse_term(s: &str) -> Result<Term> {
    let err = |reason| Error::TermParse {
        input: s.to_string(),
        reason,
    };
    if s.is_empty() {
        return Err(err("empty input"));
    }
    let (lemma, suffix) = s.rsplit_once('_').ok_or_else(|| err("missing _NOUN/_FRAME suffix"))?;
    let kind = match suffix.to_ascii_uppercase().as_str() {
        "NOUN" => TermKind::Noun,
        "FRAME" => TermKind::Frame,
        _ => return Err(err("missing _NOUN/_FRAME suffix")),
    };
    if lemma.is_empty() {
        return Err(err("empty lemma"));
    }
    if lemma.chars().any(char::is_whitespace) {
        return Err(err("lemma contains whitespace"));
    }
    Term::new(lemma, kind)
}

/// Canonical spelling of a term string.
pub fn canonicalize(s: &str) -> Result<String> {
    parse_term(s).map(|t| t.render())
}

/// Terms distilled for one image of a five-image sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSet {
    pub image_index: usize,
    pub terms: Vec<Term>,
}

impl TermSet {
    /// Builds a set, dropping later duplicates.
    pub fn new(image_index: usize, terms: impl IntoIterator<Item = Term>) -> Result<Self> {
        if image_index > 4 {
            return Err(Error::data(format!("image index {image_index} outside 0..=4")));
        }
        let mut seen = HashSet::new();
        let terms = terms.into_iter().filter(|t| seen.insert(t.clone())).collect();
        Ok(TermSet { image_index, terms })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
}

impl Story {
    pub fn new(id: impl Into<String>, sentences: Vec<Vec<String>>) -> Result<Self> {
        let story = Story {
            id: id.into(),
            sentences,
        };
        story.validate()?;
        Ok(story)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::data(format!("story {:?} has no sentences", self.id)));
        }
        if let Some(i) = self.sentences.iter().position(Vec::is_empty) {
            return Err(Error::data(format!("story {:?}: sentence {i} is empty", self.id)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }

    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.join(" ")).collect::<Vec<_>>().join(" ")
    }
}

/// Stand-in for a POS tagger plus frame parser: which tokens are nouns,
/// which verbs evoke which frame, and which tokens are pronouns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    nouns: BTreeSet<String>,
    verb_to_frame: BTreeMap<String, String>,
    pronouns: BTreeSet<String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_noun(&mut self, lemma: &str) -> &mut Self {
        self.nouns.insert(lemma.to_lowercase());
        self
    }

    pub fn add_frame(&mut self, verb: &str, frame: &str) -> &mut Self {
        self.verb_to_frame.insert(verb.to_lowercase(), frame.to_string());
        self
    }

    pub fn add_pronoun(&mut self, token: &str) -> &mut Self {
        self.pronouns.insert(token.to_lowercase());
        self
    }

    pub fn is_noun(&self, token: &str) -> bool {
        self.nouns.contains(&token.to_lowercase())
    }

    pub fn frame_for(&self, verb: &str) -> Option<&str> {
        self.verb_to_frame.get(&verb.to_lowercase()).map(String::as_str)
    }

    pub fn is_pronoun(&self, token: &str) -> bool {
        self.pronouns.contains(&token.to_lowercase())
    }

    /// Reads the TSV form: `noun\t<lemma>`, `frame\t<verb>\t<Frame>`,
    /// `pronoun\t<token>`. Blank lines and `#` comments are skipped.
    pub fn from_reader(reader: impl BufRead, context: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (idx, line) in reader.lines().enumerate() {
            let bad = |reason: String| Error::Line {
                context: context.to_string(),
                line: idx + 1,
                reason,
            };
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.iter().any(|f| f.is_empty()) {
                return Err(bad("empty field".into()));
            }
            match fields.as_slice() {
                ["noun", lemma] => {
                    lex.add_noun(lemma);
                }
                ["frame", verb, frame] => {
                    if frame.chars().any(char::is_whitespace) {
                        return Err(bad(format!("frame name {frame:?} contains whitespace")));
                    }
                    lex.add_frame(verb, frame);
                }
                ["pronoun", token] => {
                    lex.add_pronoun(token);
                }
                _ => return Err(bad(format!("unrecognised lexicon entry {line:?}"))),
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(crate::io::open(path)?, &path.display().to_string())
    }
}

/// Terms of one sentence in sentence order; the first occurrence of a term
/// wins and unknown tokens are skipped.
pub fn extract_terms(sentence: &[String], lexicon: &Lexicon) -> Vec<Term> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for token in sentence {
        let term = if lexicon.is_noun(token) {
            Term::noun(token).ok()
        } else {
            lexicon.frame_for(token).and_then(|f| Term::frame(f).ok())
        };
        if let Some(term) = term {
            if seen.insert(term.clone()) {
                out.push(term);
            }
        }
    }
    out
}

/// One annotated pronoun: which token to replace and with what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sentence: usize,
    pub token: usize,
    pub replacement: Vec<String>,
}

/// Mentions file record: `{"story_id": .., "mentions": [[s, t, [tok..]], ..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryMentions {
    pub story_id: String,
    pub mentions: Vec<(usize, usize, Vec<String>)>,
}

impl StoryMentions {
    pub fn to_mentions(&self) -> Vec<Mention> {
        self.mentions
            .iter()
            .map(|(s, t, r)| Mention {
                sentence: *s,
                token: *t,
                replacement: r.clone(),
            })
            .collect()
    }
}

/// Result of [`replace_coreferences`]: the rewritten story and the mentions
/// that were skipped because the addressed token is not a pronoun.
#[derive(Debug, Clone, PartialEq)]
pub struct Replaced {
    pub story: Story,
    pub skipped: Vec<Mention>,
}

/// Replaces annotated pronouns by their antecedent tokens. Within a sentence
/// replacements are applied right to left so that token indices stay valid.
pub fn replace_coreferences(story: &Story, mentions: &[Mention], lexicon: &Lexicon) -> Result<Replaced> {
    for m in mentions {
        let sentence = story.sentences.get(m.sentence).ok_or_else(|| {
            Error::data(format!(
                "story {:?}: mention sentence {} out of range ({} sentences)",
                story.id,
                m.sentence,
                story.sentences.len()
            ))
        })?;
        if m.token >= sentence.len() {
            return Err(Error::data(format!(
                "story {:?}: mention token {} out of range in sentence {} ({} tokens)",
                story.id,
                m.token,
                m.sentence,
                sentence.len()
            )));
        }
    }

    let mut ordered: Vec<&Mention> = mentions.iter().collect();
    ordered.sort_by(|a, b| a.sentence.cmp(&b.sentence).then(b.token.cmp(&a.token)));
    ordered.dedup_by(|a, b| a.sentence == b.sentence && a.token == b.token);

    let mut out = story.clone();
    let mut skipped = Vec::new();
    for m in ordered {
        let sentence = &mut out.sentences[m.sentence];
        if !lexicon.is_pronoun(&sentence[m.token]) {
            log::warn!(
                "story {:?}: token {:?} at ({}, {}) is not a pronoun; mention skipped",
                story.id,
                sentence[m.token],
                m.sentence,
                m.token
            );
            skipped.push(m.clone());
            continue;
        }
        sentence.splice(m.token..=m.token, m.replacement.iter().cloned());
    }
    Ok(Replaced { story: out, skipped })
}
