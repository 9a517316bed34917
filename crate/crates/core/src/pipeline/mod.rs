//! Stage orchestration: data loading, training of the three models, and
//! the distill, enrich and generate stages with an audit record.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{beam_search_story, beam_search_terms, DecodeConfig, DecodeOutput, TraceStep};
use crate::enrich::{
    build_candidates, flatten, flatten_segments, score_candidates, select_index, EnrichConfig, EnrichedPath,
    ScoredCandidate, IMAGES_PER_STORY,
};
use crate::error::{Error, Result, StageContext};
use crate::io::{read_jsonl_file, write_json, write_jsonl};
use crate::kg::{KnowledgeGraph, Source};
use crate::lm::NGramModel;
use crate::metrics::{evaluate, MetricReport};
use crate::neural::vocab::EOS_ID;
use crate::neural::{
    fit, ImageRecord, ObjectFeature, StoryExample, StoryModel, TermExample, TermModel, TrainConfig, Vocab,
};
use crate::terms::{extract_terms, parse_term, replace_coreferences, Lexicon, Story, StoryMentions, Term, TermSet};

pub use config::PipelineConfig;

pub const AUDIT_FORMAT_VERSION: u32 = 1;

/// Loaded training stories, pronouns already replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Five-sentence stories aligned with image sequences.
    pub stories: Vec<Story>,
    pub text_stories: Vec<Story>,
}

impl Corpus {
    /// Image stories followed by `text_weight` copies of each text story.
    pub fn weighted(&self, text_weight: usize) -> Vec<&Story> {
        let mut out: Vec<&Story> = self.stories.iter().collect();
        for _ in 0..text_weight {
            out.extend(self.text_stories.iter());
        }
        out
    }
}

fn load_stories(path: &Path) -> Result<Vec<Story>> {
    let stories: Vec<Story> = read_jsonl_file(path)?;
    for s in &stories {
        s.validate()?;
    }
    Ok(stories)
}

pub fn load_corpus(config: &PipelineConfig, lexicon: &Lexicon) -> Result<Corpus> {
    let paths = &config.paths;
    let mut stories = load_stories(&paths.stories)?;
    if let Some(mpath) = &paths.mentions {
        let records: Vec<StoryMentions> = read_jsonl_file(mpath)?;
        let mut by_story: HashMap<&str, Vec<_>> = HashMap::new();
        for r in &records {
            by_story.entry(r.story_id.as_str()).or_default().extend(r.to_mentions());
        }
        for story in &mut stories {
            if let Some(ms) = by_story.get(story.id.as_str()) {
                *story = replace_coreferences(story, ms, lexicon)?.story;
            }
        }
    }
    let text_stories = match &paths.text_stories {
        Some(p) => load_stories(p)?,
        None => Vec::new(),
    };
    Ok(Corpus { stories, text_stories })
}

/// Terms of each sentence, in order.
pub fn story_segments(story: &Story, lexicon: &Lexicon) -> Vec<Vec<Term>> {
    story.sentences.iter().map(|s| extract_terms(s, lexicon)).collect()
}

/// Flattened term path of a story, as the language model and the story
/// model see it.
pub fn story_path(story: &Story, lexicon: &Lexicon) -> Vec<String> {
    let segments = story_segments(story, lexicon);
    flatten_segments(segments.iter().map(Vec::as_slice))
}

/// Mean sentence length in tokens, sentence end included.
pub fn mean_sentence_len<'a>(stories: impl IntoIterator<Item = &'a Story>) -> Result<f64> {
    let (mut tokens, mut sentences) = (0usize, 0usize);
    for s in stories {
        tokens += s.sentences.iter().map(Vec::len).sum::<usize>();
        sentences += s.sentences.len();
    }
    if sentences == 0 {
        return Err(Error::data("no sentences to measure"));
    }
    Ok(tokens as f64 / sentences as f64)
}

/// Requested story length for a path of `segments` term segments.
pub fn target_len(segments: usize, mean_sentence_len: f64) -> usize {
    segments * mean_sentence_len.round().max(1.0) as usize
}

pub fn build_graph(config: &PipelineConfig) -> Result<KnowledgeGraph> {
    let paths = &config.paths;
    let groups = [
        (Source::VisualGenome, &paths.kg_visual_genome),
        (Source::Openie, &paths.kg_openie),
        (Source::Other, &paths.kg_other),
    ];
    let mut all = Vec::new();
    for (_, files) in &groups {
        all.extend(files.iter().map(|p| p.as_path()));
    }
    if all.is_empty() {
        log::warn!("no tuple files configured; the graph is empty");
    }
    PipelineConfig::require(&all)?;
    let mut kg = KnowledgeGraph::new();
    for (source, files) in groups {
        for f in files {
            let added = kg.ingest_file(f, source)?;
            log::info!("{}: {added} new tuples", f.display());
        }
    }
    Ok(kg)
}

pub fn train_lm(config: &PipelineConfig) -> Result<NGramModel> {
    let p = &config.paths;
    PipelineConfig::require(&[&p.lexicon, &p.stories])?;
    let lexicon = Lexicon::load(&p.lexicon)?;
    let corpus = load_corpus(config, &lexicon)?;
    let sequences: Vec<Vec<String>> = corpus
        .weighted(config.train.text_weight)
        .into_iter()
        .map(|s| story_path(s, &lexicon))
        .collect();
    NGramModel::train(&sequences, config.lm.order, config.lm.discount)
}

/// Object features of one five-image sequence, images in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub story_id: String,
    pub objects: Vec<ObjectFeature>,
}

/// Groups image records by `story_id` (first-appearance order), or in
/// consecutive runs of five when no record has one. Each group must hold
/// orders 1..=5 exactly once.
pub fn group_images(records: &[ImageRecord], top_k: usize) -> Result<Vec<ImageSequence>> {
    let with_id = records.iter().filter(|r| r.story_id.is_some()).count();
    if with_id != 0 && with_id != records.len() {
        return Err(Error::data("either every image record or none must carry a story_id"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&ImageRecord>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r
            .story_id
            .clone()
            .unwrap_or_else(|| format!("seq{:05}", i / IMAGES_PER_STORY));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let mut imgs = groups.remove(&id).expect("key recorded");
            imgs.sort_by_key(|r| r.order);
            let orders: Vec<usize> = imgs.iter().map(|r| r.order).collect();
            if orders != [1, 2, 3, 4, 5] {
                return Err(Error::data(format!(
                    "story {id:?} has image orders {orders:?}, expected 1..=5 once each"
                )));
            }
            let mut objects = Vec::new();
            for r in imgs {
                let top = r.top_objects(top_k)?;
                if top.is_empty() {
                    return Err(Error::data(format!("image {:?} has no objects", r.image_id)));
                }
                objects.extend(top);
            }
            Ok(ImageSequence { story_id: id, objects })
        })
        .collect()
}

pub fn load_images(path: &Path, top_k: usize) -> Result<Vec<ImageSequence>> {
    let records: Vec<ImageRecord> = read_jsonl_file(path)?;
    group_images(&records, top_k)
}

fn train_config(config: &PipelineConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: config.model.learning_rate,
        warmup_steps: config.model.warmup_steps,
        seed: config.seed,
    }
}

/// Objects of a sequence with the gold terms of its five sentences.
pub type TermPair = (Vec<ObjectFeature>, Vec<Vec<Term>>);

/// Training pairs for the term model: each image sequence whose story has
/// five sentences, predicting each sentence's terms from its image.
pub fn term_training_data(
    corpus: &Corpus,
    images: &[ImageSequence],
    lexicon: &Lexicon,
) -> Result<(Vocab, Vec<TermPair>)> {
    let by_id: HashMap<&str, &Story> = corpus.stories.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut pairs = Vec::new();
    for seq in images {
        let Some(story) = by_id.get(seq.story_id.as_str()) else {
            log::warn!("no story for image sequence {:?}; skipped", seq.story_id);
            continue;
        };
        if story.sentences.len() != IMAGES_PER_STORY {
            log::warn!("story {:?} has {} sentences; skipped", story.id, story.sentences.len());
            continue;
        }
        pairs.push((seq.objects.clone(), story_segments(story, lexicon)));
    }
    if pairs.is_empty() {
        return Err(Error::data("no image sequence matches a five-sentence story"));
    }
    let rendered: Vec<String> = pairs
        .iter()
        .flat_map(|(_, t)| t.iter().flatten().map(Term::render))
        .collect();
    let vocab = Vocab::build(rendered.iter().map(String::as_str));
    Ok((vocab, pairs))
}

pub fn train_term_model(config: &PipelineConfig) -> Result<(TermModel, Vec<f64>)> {
    let p = &config.paths;
    PipelineConfig::require(&[&p.lexicon, &p.stories, &p.features])?;
    let lexicon = Lexicon::load(&p.lexicon)?;
    let corpus = load_corpus(config, &lexicon)?;
    let images = load_images(&p.features, config.model.top_k)?;
    let (vocab, pairs) = term_training_data(&corpus, &images, &lexicon)?;
    let examples: Vec<TermExample> = pairs
        .into_iter()
        .map(|(objects, segs)| TermExample {
            objects,
            targets: segs
                .iter()
                .map(|s| s.iter().map(|t| vocab.id(&t.render())).collect())
                .collect(),
        })
        .collect();
    let mut model = TermModel::new(&config.model, vocab)?;
    let history = fit(&mut model, &examples, &train_config(config, config.train.term_epochs))?;
    Ok((model, history))
}

/// Story-model training pairs over the weighted corpus, and the vocabularies.
pub fn story_training_data(
    corpus: &Corpus,
    lexicon: &Lexicon,
    text_weight: usize,
) -> (Vocab, Vocab, Vec<StoryExample>, f64) {
    let stories = corpus.weighted(text_weight);
    let sources: Vec<Vec<String>> = stories.iter().map(|s| story_path(s, lexicon)).collect();
    let targets: Vec<Vec<String>> = stories.iter().map(|s| s.tokens()).collect();
    let source_vocab = Vocab::build(sources.iter().flatten().map(String::as_str));
    let target_vocab = Vocab::build(targets.iter().flatten().map(String::as_str));
    let examples = sources
        .iter()
        .zip(&targets)
        .map(|(s, t)| StoryExample {
            source: source_vocab.encode(s),
            target: target_vocab.encode(t),
        })
        .collect();
    let mean = mean_sentence_len(stories.iter().copied()).unwrap_or(0.0);
    (source_vocab, target_vocab, examples, mean)
}

pub fn train_generator(config: &PipelineConfig) -> Result<(StoryModel, Vec<f64>)> {
    let p = &config.paths;
    PipelineConfig::require(&[&p.lexicon, &p.stories])?;
    let lexicon = Lexicon::load(&p.lexicon)?;
    let corpus = load_corpus(config, &lexicon)?;
    let (source_vocab, target_vocab, examples, mean) = story_training_data(&corpus, &lexicon, config.train.text_weight);
    if examples.is_empty() {
        return Err(Error::data("no stories to train the story model on"));
    }
    if target_vocab.get(&config.decode.sentence_end).is_none() {
        log::warn!(
            "sentence end {:?} never occurs in the training stories",
            config.decode.sentence_end
        );
    }
    let mut model = StoryModel::new(&config.model, source_vocab, target_vocab)?;
    model.set_mean_sentence_len(mean);
    let history = fit(&mut model, &examples, &train_config(config, config.train.story_epochs))?;
    Ok((model, history))
}

/// Term sets decoded for the five images of one sequence, with the decoder
/// output of each image.
#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub term_sets: Vec<TermSet>,
    pub outputs: Vec<DecodeOutput>,
}

/// Decodes a term set per image; the repetition set starts empty for every
/// image. Special tokens are dropped from the output.
pub fn distill(
    model: &TermModel,
    objects: &[ObjectFeature],
    decode: &DecodeConfig,
    max_terms: usize,
) -> Result<Distilled> {
    for order in 1..=IMAGES_PER_STORY {
        if !objects.iter().any(|o| o.order == order) {
            return Err(Error::data(format!("no objects for image order {order}")));
        }
    }
    let mut term_sets = Vec::with_capacity(IMAGES_PER_STORY);
    let mut outputs = Vec::with_capacity(IMAGES_PER_STORY);
    for order in 1..=IMAGES_PER_STORY {
        let scorer = model.scorer(objects, order)?;
        let out = beam_search_terms(&scorer, decode, max_terms)?;
        let terms = out
            .tokens
            .iter()
            .filter(|&&id| !Vocab::is_special(id))
            .map(|&id| parse_term(model.vocab().token(id)))
            .collect::<Result<Vec<_>>>()?;
        term_sets.push(TermSet::new(order - 1, terms)?);
        outputs.push(out);
    }
    Ok(Distilled { term_sets, outputs })
}

/// Every candidate with its perplexity, and the index of the selected one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrichment {
    pub candidates: Vec<ScoredCandidate>,
    pub selected: usize,
}

impl Enrichment {
    pub fn selected_path(&self) -> &EnrichedPath {
        &self.candidates[self.selected].path
    }
}

/// Builds and scores candidate paths. Without a graph only the baseline
/// competes.
pub fn enrich(
    term_sets: &[TermSet],
    kg: Option<&KnowledgeGraph>,
    lm: &NGramModel,
    lexicon: &Lexicon,
    config: &EnrichConfig,
) -> Result<Enrichment> {
    let candidates = match kg {
        Some(kg) => build_candidates(term_sets, kg, lexicon, config)?,
        None => vec![EnrichedPath::baseline(term_sets)?],
    };
    let scored = score_candidates(&candidates, lm);
    if let Some(bad) = scored.iter().find(|c| !c.perplexity.is_finite()) {
        return Err(Error::Numeric(format!(
            "perplexity {} for path {:?}",
            bad.perplexity, bad.flattened
        )));
    }
    let selected = select_index(&scored)?;
    Ok(Enrichment {
        candidates: scored,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub story: Story,
    pub target_len: usize,
    pub output: DecodeOutput,
}

/// Generates a story for `path`. Terms unknown to the model map to `<unk>`.
pub fn generate(model: &StoryModel, story_id: &str, path: &EnrichedPath, decode: &DecodeConfig) -> Result<Generated> {
    if !model.is_trained() {
        return Err(Error::data("the story model has not been trained"));
    }
    let flat = flatten(path);
    let source = model.source_vocab().encode(&flat);
    let unknown = flat.iter().filter(|t| model.source_vocab().get(t).is_none()).count();
    if unknown > 0 {
        log::warn!("story {story_id:?}: {unknown} path terms unknown to the story model");
    }
    let target_len = target_len(path.segments.len(), model.mean_sentence_len());
    let scorer = model.scorer(&source, &decode.sentence_end)?;
    let output = beam_search_story(&scorer, decode, target_len)?;
    if output.truncated {
        log::warn!("story {story_id:?}: decoding stopped at max_len {}", decode.max_len);
    }
    let words: Vec<String> = output
        .tokens
        .iter()
        .filter(|&&id| id != EOS_ID && !Vocab::is_special(id))
        .map(|&id| model.target_vocab().token(id).to_string())
        .collect();
    let story = Story {
        id: story_id.to_string(),
        sentences: split_sentences(words, &decode.sentence_end),
    };
    Ok(Generated {
        story,
        target_len,
        output,
    })
}

/// Splits after every `sentence_end`; a trailing unterminated run is kept.
pub fn split_sentences(words: Vec<String>, sentence_end: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for w in words {
        let end = w == sentence_end;
        cur.push(w);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub raw_logprob: f64,
    pub truncated: bool,
}

impl From<&DecodeOutput> for DecodeSummary {
    fn from(o: &DecodeOutput) -> Self {
        DecodeSummary {
            tokens: o.tokens.clone(),
            score: o.score,
            raw_logprob: o.raw_logprob,
            truncated: o.truncated,
        }
    }
}

/// Everything decided for one story.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoryAudit {
    pub story_id: String,
    pub term_sets: Vec<TermSet>,
    pub term_decodes: Vec<DecodeSummary>,
    pub candidates: Vec<ScoredCandidate>,
    pub selected: usize,
    pub selected_path: EnrichedPath,
    pub target_len: usize,
    pub story_decode: DecodeSummary,
    pub decode_trace: Vec<TraceStep>,
    pub story: Story,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditBundle {
    pub format_version: u32,
    pub stories: Vec<StoryAudit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub stories: Vec<Story>,
    pub audit: AuditBundle,
}

/// Trained artifacts needed by the inference stages.
pub struct Artifacts {
    pub lexicon: Lexicon,
    pub graph: Option<KnowledgeGraph>,
    pub lm: NGramModel,
    pub term_model: TermModel,
    pub story_model: StoryModel,
}

impl Artifacts {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let p = &config.paths;
        let mut needed = vec![
            p.lexicon.as_path(),
            p.lm.as_path(),
            p.term_model.as_path(),
            p.story_model.as_path(),
        ];
        if config.enrich_enabled {
            needed.push(&p.graph);
        }
        PipelineConfig::require(&needed)?;
        let expected = &config.model;
        let term_model = TermModel::load(&p.term_model, Some(expected)).stage("load")?;
        let story_model = StoryModel::load(&p.story_model, Some(expected)).stage("load")?;
        Ok(Artifacts {
            lexicon: Lexicon::load(&p.lexicon).stage("load")?,
            graph: if config.enrich_enabled {
                Some(KnowledgeGraph::load(&p.graph).stage("load")?)
            } else {
                None
            },
            lm: NGramModel::load(&p.lm).stage("load")?,
            term_model,
            story_model,
        })
    }
}

/// Distill, enrich and generate for one image sequence.
pub fn run_sequence(seq: &ImageSequence, art: &Artifacts, config: &PipelineConfig) -> Result<StoryAudit> {
    let distilled = distill(&art.term_model, &seq.objects, &config.decode, config.max_terms).stage("distill")?;
    let enrichment = enrich(
        &distilled.term_sets,
        art.graph.as_ref(),
        &art.lm,
        &art.lexicon,
        &config.enrich,
    )
    .stage("enrich")?;
    let path = enrichment.selected_path().clone();
    let generated = generate(&art.story_model, &seq.story_id, &path, &config.decode).stage("generate")?;
    Ok(StoryAudit {
        story_id: seq.story_id.clone(),
        term_sets: distilled.term_sets,
        term_decodes: distilled.outputs.iter().map(DecodeSummary::from).collect(),
        candidates: enrichment.candidates,
        selected: enrichment.selected,
        selected_path: path,
        target_len: generated.target_len,
        story_decode: DecodeSummary::from(&generated.output),
        decode_trace: generated.output.trace,
        story: generated.story,
    })
}

/// The full inference pipeline over every sequence in the inference
/// features file.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    let features = config.paths.inference_features();
    PipelineConfig::require(&[features])?;
    let art = Artifacts::load(config)?;
    let sequences = load_images(features, config.model.top_k).stage("load")?;
    let mut audits = Vec::with_capacity(sequences.len());
    for seq in &sequences {
        audits.push(run_sequence(seq, &art, config)?);
    }
    Ok(RunOutput {
        stories: audits.iter().map(|a| a.story.clone()).collect(),
        audit: AuditBundle {
            format_version: AUDIT_FORMAT_VERSION,
            stories: audits,
        },
    })
}

/// Writes `stories.jsonl` and `audit.json` under the output directory.
pub fn write_run(output: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("stories.jsonl"), &output.stories)?;
    write_json(&dir.join("audit.json"), &output.audit)
}

/// Scores generated stories against references with the same ids.
pub fn evaluate_files(generated: &Path, references: &Path) -> Result<MetricReport> {
    let gen = load_stories(generated)?;
    let refs = load_stories(references)?;
    let mut by_id: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in &refs {
        by_id.entry(r.id.as_str()).or_default().push(r.tokens());
    }
    let items = gen
        .iter()
        .map(|g| {
            let rs = by_id
                .get(g.id.as_str())
                .ok_or_else(|| Error::data(format!("no reference for story {:?}", g.id)))?;
            Ok((g.id.clone(), g.tokens(), rs.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn target_len_grows_with_segments() {
        assert_eq!(target_len(5, 4.0), 20);
        assert_eq!(target_len(6, 4.0), 24);
        assert_eq!(target_len(5, 3.6), 20);
        assert!(target_len(6, 7.2) > target_len(5, 7.2));
    }

    #[test]
    fn splits_on_sentence_end() {
        assert_eq!(
            split_sentences(toks("a b . c . d"), "."),
            vec![toks("a b ."), toks("c ."), toks("d")]
        );
        assert!(split_sentences(Vec::new(), ".").is_empty());
    }

    #[test]
    fn grouping_checks_orders() {
        let rec = |id: &str, order: usize| ImageRecord {
            image_id: format!("{id}-{order}"),
            order,
            objects: vec![crate::neural::ObjectRecord {
                confidence: 0.5,
                feature: vec![0.0],
            }],
            story_id: Some(id.to_string()),
        };
        let mut records: Vec<_> = (1..=5).map(|o| rec("a", o)).collect();
        records.extend((1..=5).rev().map(|o| rec("b", o)));
        let groups = group_images(&records, 4).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].story_id, "b");
        assert_eq!(
            groups[1].objects.iter().map(|o| o.order).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        records.pop();
        assert!(group_images(&records, 4).is_err());
    }

    #[test]
    fn mean_sentence_length() {
        let s = Story::new("x", vec![toks("a b ."), toks("c d e f .")]).unwrap();
        assert_eq!(mean_sentence_len([&s]).unwrap(), 4.0);
        assert!(mean_sentence_len(std::iter::empty()).is_err());
    }
}
