//! Term-path-to-story Transformer.
//!
//! The encoder reads the flattened term path with absolute sinusoidal
//! positions. The decoder input embeddings get length-difference positions
//! computed from the requested story length, so the model sees how many
//! tokens remain at each step.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{absolute_rows, ldpe_rows};
use super::layers::{DecoderLayer, EncoderLayer, Linear};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::train::Trainable;
use super::vocab::{Vocab, BOS_ID, EOS_ID};
use super::{load_checkpoint, save_checkpoint, ModelConfig};
use crate::decode::StepScorer;
use crate::error::{Error, Result};

const KIND: &str = "story_model";
pub const SENTENCE_END: &str = ".";

/// Source term ids and target story token ids (without `</s>`).
#[derive(Debug, Clone, PartialEq)]
pub struct StoryExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StoryModel {
    config: ModelConfig,
    source_vocab: Vocab,
    target_vocab: Vocab,
    store: ParamStore,
    source_embed: ParamId,
    target_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
    mean_sentence_len: f64,
    trained_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoryMeta {
    source_vocab: Vocab,
    target_vocab: Vocab,
    mean_sentence_len: f64,
    trained_steps: u64,
}

impl StoryModel {
    /// `target_vocab` should contain the sentence end token `"."`.
    pub fn new(config: &ModelConfig, source_vocab: Vocab, target_vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut store = ParamStore::new();
        let source_embed = store.add_uniform("source_embed", source_vocab.len(), d, &mut rng);
        let target_embed = store.add_uniform("target_embed", target_vocab.len(), d, &mut rng);
        let encoder = (0..config.layers)
            .map(|l| {
                EncoderLayer::new(
                    &mut store,
                    &format!("encoder.{l}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    &mut rng,
                )
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|l| {
                DecoderLayer::new(
                    &mut store,
                    &format!("decoder.{l}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    &mut rng,
                )
            })
            .collect();
        let out = Linear::new(&mut store, "out", d, target_vocab.len(), true, &mut rng);
        Ok(StoryModel {
            config: config.clone(),
            source_vocab,
            target_vocab,
            store,
            source_embed,
            target_embed,
            encoder,
            decoder,
            out,
            mean_sentence_len: 0.0,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn source_vocab(&self) -> &Vocab {
        &self.source_vocab
    }

    pub fn target_vocab(&self) -> &Vocab {
        &self.target_vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    /// Mean gold sentence length (tokens, including the period) seen in
    /// training; used to turn a segment count into a requested length.
    pub fn mean_sentence_len(&self) -> f64 {
        self.mean_sentence_len
    }

    pub fn set_mean_sentence_len(&mut self, v: f64) {
        self.mean_sentence_len = v;
    }

    fn encode_graph(&self, g: &mut Graph, source: &[usize]) -> Result<Var> {
        if source.is_empty() {
            return Err(Error::data("empty source sequence"));
        }
        if source.len() > self.config.max_len {
            return Err(Error::data(format!(
                "source of {} tokens exceeds max_len {}",
                source.len(),
                self.config.max_len
            )));
        }
        let table = g.param(&self.store, self.source_embed);
        let emb = g.gather(table, source);
        let pos = g.constant(absolute_rows(source.len(), self.config.d_model)?);
        let mut x = g.add(emb, pos);
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x);
        }
        Ok(x)
    }

    /// Encoder output for a source id sequence.
    pub fn encode_source(&self, source: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = self.encode_graph(&mut g, source)?;
        Ok(g.value(x).clone())
    }

    fn decode_graph(&self, g: &mut Graph, memory: Var, inputs: &[usize], target_len: usize) -> Result<Var> {
        let table = g.param(&self.store, self.target_embed);
        let emb = g.gather(table, inputs);
        let pos = g.constant(ldpe_rows(inputs.len(), target_len, self.config.d_model)?);
        let mut x = g.add(emb, pos);
        for layer in &self.decoder {
            x = layer.forward(g, &self.store, x, memory);
        }
        Ok(self.out.forward(g, &self.store, x))
    }

    /// Log-probabilities of the next target token after `prefix` (which
    /// excludes `<bos>`), for a story of requested length `target_len`.
    pub fn next_token_logprobs(&self, memory: &Matrix, prefix: &[usize], target_len: usize) -> Result<Vec<f64>> {
        if prefix.len() >= self.config.max_len {
            return Err(Error::data(format!(
                "prefix of {} tokens reaches max_len {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        let mut g = Graph::new();
        let mem = g.constant(memory.clone());
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(prefix);
        let logits = self.decode_graph(&mut g, mem, &inputs, target_len)?;
        let v = g.value(logits);
        let row = Matrix::from_vec(1, v.cols, v.row(v.rows - 1).to_vec());
        Ok(row.log_softmax_rows().data)
    }

    /// Scorer for one source sequence; `sentence_end` names the token that
    /// closes a sentence (normally `"."`).
    pub fn scorer(&self, source: &[usize], sentence_end: &str) -> Result<StoryScorer<'_>> {
        Ok(StoryScorer {
            model: self,
            memory: self.encode_source(source)?,
            sentence_end: self.target_vocab.get(sentence_end),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = StoryMeta {
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            mean_sentence_len: self.mean_sentence_len,
            trained_steps: self.trained_steps,
        };
        save_checkpoint(path, KIND, &self.config, meta, &self.store)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let (config, meta, params): (_, StoryMeta, _) = load_checkpoint(path, KIND, expected)?;
        let mut model = StoryModel::new(&config, meta.source_vocab, meta.target_vocab)?;
        model.store.load_from(params)?;
        model.mean_sentence_len = meta.mean_sentence_len;
        model.trained_steps = meta.trained_steps;
        Ok(model)
    }
}

impl Trainable for StoryModel {
    type Example = StoryExample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn example_loss(&self, g: &mut Graph, example: &StoryExample) -> Result<(Var, usize)> {
        if example.target.len() + 1 > self.config.max_len {
            return Err(Error::data(format!(
                "target of {} tokens exceeds max_len {}",
                example.target.len(),
                self.config.max_len
            )));
        }
        let memory = self.encode_graph(g, &example.source)?;
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(&example.target);
        let mut outputs = example.target.clone();
        outputs.push(EOS_ID);
        let logits = self.decode_graph(g, memory, &inputs, example.target.len())?;
        Ok((g.cross_entropy(logits, &outputs), outputs.len()))
    }

    fn mark_trained(&mut self, steps: u64) {
        self.trained_steps += steps;
    }
}

/// Story-token scorer for one encoded term path.
pub struct StoryScorer<'a> {
    model: &'a StoryModel,
    memory: Matrix,
    sentence_end: Option<usize>,
}

impl StepScorer for StoryScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.target_vocab.len()
    }

    fn log_probs(&self, prefix: &[usize], target_len: usize) -> Result<Vec<f64>> {
        self.model.next_token_logprobs(&self.memory, prefix, target_len)
    }

    fn end_token(&self) -> Option<usize> {
        Some(EOS_ID)
    }

    fn sentence_end_token(&self) -> Option<usize> {
        self.sentence_end
    }

    fn is_reserved(&self, token: usize) -> bool {
        Vocab::is_special(token) || Some(token) == self.sentence_end
    }
}
