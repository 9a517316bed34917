#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use kgstory::decode::{DecodeConfig, Regime, StepScorer};
use kgstory::enrich::{build_candidates, flatten, EnrichConfig, EnrichedPath};
use kgstory::kg::{CrossImageLink, KnowledgeGraph, LinkTuples, RelationTuple, TwoHopPath};
use kgstory::pipeline::config::PipelineConfig;
use kgstory::pipeline::{self, Corpus};
use kgstory::synth::{random_tuples, ToyConfig, ToyPaths, ToyWorld};
use kgstory::terms::{Lexicon, Term, TermSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Double-double sine and cosine for the positional-encoding oracle.

#[derive(Clone, Copy, Debug)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd(s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd(p, a.mul_add(b, -p))
}

impl Dd {
    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.0, o.0);
        let lo = s.1 + self.1 + o.1;
        two_sum(s.0, lo)
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.0, o.0);
        let lo = p.1 + self.0 * o.1 + self.1 * o.0;
        two_sum(p.0, lo)
    }

    fn mul_f(self, f: f64) -> Dd {
        self.mul(Dd(f, 0.0))
    }

    fn div_f(self, f: f64) -> Dd {
        let q = self.0 / f;
        let r = self.add(two_prod(q, f).neg());
        two_sum(q, r.0 / f)
    }
}

const TWO_PI: Dd = Dd(std::f64::consts::TAU, 2.449_293_598_294_706_4e-16);

/// `(sin x, cos x)` with `x = num / den` carried in double-double precision
/// and evaluated by Taylor series after reduction modulo 2π.
fn sin_cos_ratio(num: f64, den: f64) -> (f64, f64) {
    let x = Dd(num, 0.0).div_f(den);
    let k = (x.0 / TWO_PI.0).round();
    let r = x.add(TWO_PI.mul_f(k).neg());
    let mut sin = Dd(0.0, 0.0);
    let mut cos = Dd(0.0, 0.0);
    let mut term = Dd(1.0, 0.0);
    for n in 0..60u32 {
        match n % 4 {
            0 => cos = cos.add(term),
            1 => sin = sin.add(term),
            2 => cos = cos.add(term.neg()),
            _ => sin = sin.add(term.neg()),
        }
        term = term.mul(r).div_f(f64::from(n + 1));
    }
    (sin.0 + sin.1, cos.0 + cos.1)
}

/// Length-difference encoding evaluated directly from its defining formula.
pub fn ldpe_oracle(pos: usize, len: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let denom = 10000f64.powf(2.0 * i as f64 / d as f64);
        let (s, c) = sin_cos_ratio((len - pos) as f64, denom);
        out.push(s);
        out.push(c);
    }
    out
}

// ---------------------------------------------------------------------------
// Exhaustive penalized decoding.

/// Best complete sequence by exhaustive enumeration: sequences that end
/// with the end token at any length up to `limit`, and sequences of length
/// exactly `limit` otherwise. Returns `(tokens, score)`; ties go to the
/// lexicographically smaller token list.
pub fn exhaustive_decode(
    scorer: &dyn StepScorer,
    config: &DecodeConfig,
    regime: Regime,
    limit: usize,
    target_len: usize,
) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut prefix = Vec::new();
    walk(scorer, config, regime, limit, target_len, &mut prefix, 0.0, &mut best);
    best.expect("at least one complete sequence")
}

fn oracle_penalty(
    scorer: &dyn StepScorer,
    config: &DecodeConfig,
    regime: Regime,
    prefix: &[usize],
    token: usize,
) -> f64 {
    let reserved = |t: usize| Some(t) == scorer.end_token() || Some(t) == scorer.sentence_end_token();
    if reserved(token) {
        return 0.0;
    }
    match regime {
        Regime::Terms => {
            if prefix.contains(&token) {
                config.term_penalty
            } else {
                0.0
            }
        }
        Regime::Story => {
            let split = prefix
                .iter()
                .rposition(|&t| Some(t) == scorer.sentence_end_token())
                .map_or(0, |i| i + 1);
            let in_current = prefix[split..].contains(&token);
            let in_previous = prefix[..split].contains(&token);
            let l = prefix.len().max(1) as f64;
            let mut p = 0.0;
            if in_current {
                p += config.alpha;
            }
            if in_previous {
                p += config.gamma / l;
            }
            p
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn walk(
    scorer: &dyn StepScorer,
    config: &DecodeConfig,
    regime: Regime,
    limit: usize,
    target_len: usize,
    prefix: &mut Vec<usize>,
    score: f64,
    best: &mut Option<(Vec<usize>, f64)>,
) {
    let complete = prefix.len() == limit || (prefix.last().is_some() && prefix.last().copied() == scorer.end_token());
    if complete {
        let better = match best {
            None => true,
            Some((toks, s)) => score > *s || (score == *s && prefix.as_slice() < toks.as_slice()),
        };
        if better {
            *best = Some((prefix.clone(), score));
        }
        return;
    }
    let lp = scorer.log_probs(prefix, target_len).expect("scorer works");
    for (x, &l) in lp.iter().enumerate() {
        let pen = oracle_penalty(scorer, config, regime, prefix, x);
        let next = score + (l - pen);
        prefix.push(x);
        walk(scorer, config, regime, limit, target_len, prefix, next, best);
        prefix.pop();
    }
}

// ---------------------------------------------------------------------------
// Independent interpolated absolute-discounting n-gram model.

pub struct RefLm {
    order: usize,
    discount: f64,
    known: HashSet<String>,
    /// context -> (total, successor -> count)
    counts: HashMap<Vec<String>, (f64, HashMap<String, f64>)>,
}

impl RefLm {
    pub fn train(corpus: &[Vec<String>], order: usize, discount: f64) -> Self {
        let mut known: HashSet<String> = ["</s>", "<sep>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut counts: HashMap<Vec<String>, (f64, HashMap<String, f64>)> = HashMap::new();
        for seq in corpus {
            let mut padded: Vec<String> = vec!["<s>".to_string(); order - 1];
            padded.extend(seq.iter().cloned());
            padded.push("</s>".into());
            for t in seq {
                known.insert(t.clone());
            }
            for i in order - 1..padded.len() {
                for k in 0..order {
                    let e = counts.entry(padded[i - k..i].to_vec()).or_default();
                    e.0 += 1.0;
                    *e.1.entry(padded[i].clone()).or_default() += 1.0;
                }
            }
        }
        RefLm {
            order,
            discount,
            known,
            counts,
        }
    }

    fn map(&self, t: &str) -> String {
        if self.known.contains(t) {
            t.to_string()
        } else {
            "<unk>".to_string()
        }
    }

    pub fn prob(&self, history: &[String], token: &str) -> f64 {
        let mut p = 1.0 / self.known.len() as f64;
        let max_k = (self.order - 1).min(history.len());
        for k in 0..=max_k {
            if let Some((total, next)) = self.counts.get(&history[history.len() - k..]) {
                let c = next.get(token).copied().unwrap_or(0.0);
                p = (c - self.discount).max(0.0) / total + self.discount * next.len() as f64 / total * p;
            }
        }
        p
    }

    pub fn log_prob(&self, tokens: &[String]) -> f64 {
        let mut hist: Vec<String> = vec!["<s>".to_string(); self.order - 1];
        let mut lp = 0.0;
        for t in tokens
            .iter()
            .map(|t| self.map(t))
            .chain(std::iter::once("</s>".to_string()))
        {
            lp += self.prob(&hist[hist.len() - (self.order - 1)..], &t).ln();
            hist.push(t);
        }
        lp
    }

    pub fn perplexity(&self, tokens: &[String]) -> f64 {
        (-self.log_prob(tokens) / (tokens.len() as f64 + 1.0)).exp()
    }
}

// ---------------------------------------------------------------------------
// Brute-force graph queries over a plain tuple list.

/// Every one-hop and two-hop answer of a tuple list, found by scanning all
/// tuples and all ordered tuple pairs once.
pub struct BruteGraph {
    one: HashMap<(Term, Term), BTreeSet<RelationTuple>>,
    two: HashMap<(Term, Term), BTreeSet<TwoHopPath>>,
}

impl BruteGraph {
    pub fn new(tuples: &[RelationTuple]) -> Self {
        let mut one: HashMap<(Term, Term), BTreeSet<RelationTuple>> = HashMap::new();
        let mut two: HashMap<(Term, Term), BTreeSet<TwoHopPath>> = HashMap::new();
        for a in tuples {
            one.entry((a.head.clone(), a.tail.clone()))
                .or_default()
                .insert(a.clone());
            for b in tuples {
                if a.tail == b.head && a.tail != a.head && a.tail != b.tail {
                    two.entry((a.head.clone(), b.tail.clone()))
                        .or_default()
                        .insert(TwoHopPath {
                            first: a.clone(),
                            second: b.clone(),
                        });
                }
            }
        }
        BruteGraph { one, two }
    }

    pub fn one_hop(&self, head: &Term, tail: &Term) -> BTreeSet<RelationTuple> {
        self.one.get(&(head.clone(), tail.clone())).cloned().unwrap_or_default()
    }

    pub fn two_hop(&self, head: &Term, tail: &Term) -> BTreeSet<TwoHopPath> {
        self.two.get(&(head.clone(), tail.clone())).cloned().unwrap_or_default()
    }

    /// Sorted `gap hop tuples` descriptions of every link between the sets.
    pub fn links(&self, left: &TermSet, right: &TermSet, two_hop: bool) -> Vec<String> {
        let mut out = Vec::new();
        for h in &left.terms {
            for t in &right.terms {
                for one in self.one_hop(h, t) {
                    out.push(format!("{} 1 {one:?}", left.image_index));
                }
                if two_hop {
                    for p in self.two_hop(h, t) {
                        out.push(format!("{} 2 {p:?}", left.image_index));
                    }
                }
            }
        }
        out.sort();
        out
    }
}

/// The same descriptions for links returned by the graph.
pub fn describe_links(links: &[CrossImageLink]) -> Vec<String> {
    let mut out: Vec<String> = links
        .iter()
        .map(|l| match &l.tuples {
            LinkTuples::One(t) => format!("{} 1 {t:?}", l.gap),
            LinkTuples::Two(p) => format!("{} 2 {p:?}", l.gap),
        })
        .collect();
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Random fixtures.

/// Term paths of five segments separated by `<sep>` over a small alphabet.
pub fn synthetic_paths(rng: &mut impl Rng, count: usize) -> Vec<Vec<String>> {
    (0..count)
        .map(|_| {
            let mut out = Vec::new();
            for seg in 0..5 {
                if seg > 0 {
                    out.push("<sep>".to_string());
                }
                for _ in 0..rng.gen_range(1..=3) {
                    let w = rng.gen_range(0..30);
                    out.push(if w % 3 == 0 {
                        format!("F{w}_FRAME")
                    } else {
                        format!("w{w}_NOUN")
                    });
                }
            }
            out
        })
        .collect()
}

pub struct EnrichFixture {
    pub termsets: Vec<TermSet>,
    pub tuples: Vec<RelationTuple>,
    pub kg: KnowledgeGraph,
    pub corpus: Vec<Vec<String>>,
}

/// Five random term sets, a random graph over the same nouns and an LM
/// corpus mixing shuffled baselines with copies of some candidates, so the
/// winner varies between fixtures.
pub fn enrich_fixture(rng: &mut ChaCha8Rng) -> EnrichFixture {
    let terms = 10;
    let termsets: Vec<TermSet> = (0..5)
        .map(|i| {
            let mut ids: Vec<usize> = (0..terms).collect();
            ids.shuffle(rng);
            let k = rng.gen_range(1..=3);
            TermSet::new(i, ids[..k].iter().map(|j| Term::noun(&format!("t{j}")).unwrap())).unwrap()
        })
        .collect();
    let count = rng.gen_range(5..60);
    let tuples = random_tuples(rng, count, terms, 3);
    let mut kg = KnowledgeGraph::new();
    for t in &tuples {
        kg.insert(t).unwrap();
    }
    let baseline = flatten(&EnrichedPath::baseline(&termsets).unwrap());
    let mut corpus: Vec<Vec<String>> = (0..rng.gen_range(3..12))
        .map(|_| {
            let mut p = baseline.clone();
            p.shuffle(rng);
            p
        })
        .collect();
    let cands = build_candidates(&termsets, &kg, &Lexicon::new(), &EnrichConfig::default()).unwrap();
    for c in cands.choose_multiple(rng, 2) {
        for _ in 0..rng.gen_range(0..3) {
            corpus.push(flatten(c));
        }
    }
    EnrichFixture {
        termsets,
        tuples,
        kg,
        corpus,
    }
}

/// The candidate an exhaustive scan ranks first: lowest reference-model
/// perplexity, then fewer insertions, flattened path and link provenance.
pub fn exhaustive_best<'a>(cands: &'a [EnrichedPath], lm: &RefLm) -> &'a EnrichedPath {
    let key = |p: &EnrichedPath| {
        let flat = flatten(p);
        (
            lm.perplexity(&flat),
            p.insertion_count,
            flat,
            p.segments.iter().map(|s| s.link.clone()).collect::<Vec<_>>(),
        )
    };
    let keyed: Vec<_> = cands.iter().map(|c| (key(c), c)).collect();
    keyed
        .iter()
        .min_by(|(a, _), (b, _)| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        })
        .map(|(_, c)| *c)
        .expect("candidates are nonempty")
}

// ---------------------------------------------------------------------------
// Toy pipeline setup.

/// Model and training settings that memorize the toy world in seconds.
pub const TOY_SETTINGS: &str = "\
model.d_model = 32
model.heads = 2
model.layers = 1
model.ff_dim = 64
model.d_in = 8
model.top_k = 3
model.learning_rate = 0.005
model.warmup_steps = 200
model.max_len = 64
train.term_epochs = 60
train.story_epochs = 60
decode.max_len = 40
";

pub struct Toy {
    pub world: ToyWorld,
    pub paths: ToyPaths,
    pub config_path: std::path::PathBuf,
}

/// Writes the toy world and a config file under `dir`. `extra` lines are
/// appended to the config.
pub fn write_toy(dir: &Path, text_stories: bool, extra: &str) -> Toy {
    let world = ToyWorld::generate(&ToyConfig::default());
    let paths = world.write(dir).expect("toy world writes");
    let mut text = String::new();
    text.push_str("paths.lexicon = lexicon.tsv\npaths.stories = stories.jsonl\npaths.mentions = mentions.jsonl\n");
    text.push_str("paths.features = features.jsonl\npaths.kg_visual_genome = tuples.tsv\n");
    if text_stories {
        text.push_str("paths.text_stories = text_stories.jsonl\n");
    }
    text.push_str(TOY_SETTINGS);
    text.push_str(extra);
    let config_path = dir.join("toy.conf");
    std::fs::write(&config_path, text).expect("config writes");
    Toy {
        world,
        paths,
        config_path,
    }
}

pub fn load_config(path: &Path) -> PipelineConfig {
    PipelineConfig::from_sources(&std::fs::read_to_string(path).unwrap(), path.parent().unwrap(), |_| {
        None
    })
    .unwrap()
}

/// Builds every artifact the inference stages need and saves it where the
/// config points.
pub fn train_all(cfg: &PipelineConfig) {
    pipeline::build_graph(cfg).unwrap().save(&cfg.paths.graph).unwrap();
    pipeline::train_lm(cfg).unwrap().save(&cfg.paths.lm).unwrap();
    pipeline::train_term_model(cfg)
        .unwrap()
        .0
        .save(&cfg.paths.term_model)
        .unwrap();
    pipeline::train_generator(cfg)
        .unwrap()
        .0
        .save(&cfg.paths.story_model)
        .unwrap();
}

pub fn corpus(cfg: &PipelineConfig) -> (kgstory::terms::Lexicon, Corpus) {
    let lex = kgstory::terms::Lexicon::load(&cfg.paths.lexicon).unwrap();
    let corpus = pipeline::load_corpus(cfg, &lex).unwrap();
    (lex, corpus)
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}
