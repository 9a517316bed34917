//! Image-to-term model.
//!
//! Objects of all five images are projected, summed with a trainable
//! embedding of their image order (`x_i = W o_i + order[t]`) and passed
//! through a Transformer encoder with no other position signal, so objects
//! of one image are an unordered set. Terms for image `t` are decoded by a
//! GRU whose initial state pools image `t`'s encoded objects and which
//! attends over those objects with additive attention.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AdditiveAttention, EncoderLayer, GruCell, Linear};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::train::Trainable;
use super::vocab::{Vocab, BOS_ID, EOS_ID};
use super::{load_checkpoint, save_checkpoint, ModelConfig, ObjectFeature};
use crate::decode::StepScorer;
use crate::error::{Error, Result};

const KIND: &str = "term_model";

/// Five images' objects and the term ids to predict for each image.
#[derive(Debug, Clone, PartialEq)]
pub struct TermExample {
    pub objects: Vec<ObjectFeature>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct TermModel {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    projection: ParamId,
    order_embeddings: ParamId,
    encoder: Vec<EncoderLayer>,
    embed: ParamId,
    init: Linear,
    attention: AdditiveAttention,
    gru: GruCell,
    out: Linear,
    trained_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermMeta {
    vocab: Vocab,
    trained_steps: u64,
}

impl TermModel {
    pub fn new(config: &ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let projection = store.add_uniform("projection", config.d_in, d, &mut rng);
        let order_embeddings = store.add_uniform("order_embeddings", 5, d, &mut rng);
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
        let embed = store.add_uniform("decoder.embed", vocab.len(), d, &mut rng);
        let init = Linear::new(&mut store, "decoder.init", d, d, true, &mut rng);
        let attention = AdditiveAttention::new(&mut store, "decoder.attention", d, &mut rng);
        let gru = GruCell::new(&mut store, "decoder.gru", 2 * d, d, &mut rng);
        let out = Linear::new(&mut store, "decoder.out", 2 * d, vocab.len(), true, &mut rng);
        Ok(TermModel {
            config: config.clone(),
            vocab,
            store,
            projection,
            order_embeddings,
            encoder,
            embed,
            init,
            attention,
            gru,
            out,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
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

    fn check_objects(&self, objects: &[ObjectFeature]) -> Result<()> {
        for (i, o) in objects.iter().enumerate() {
            if o.vector.len() != self.config.d_in {
                return Err(Error::data(format!(
                    "object {i} has {} features, model expects {}",
                    o.vector.len(),
                    self.config.d_in
                )));
            }
            if !(1..=5).contains(&o.order) {
                return Err(Error::data(format!(
                    "object {i} has image order {} outside 1..=5",
                    o.order
                )));
            }
            if o.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!("object {i} has a non-finite feature")));
            }
        }
        Ok(())
    }

    /// Projected inputs plus order embeddings, before the encoder stack.
    fn embed_objects(&self, g: &mut Graph, objects: &[ObjectFeature]) -> Var {
        let rows: Vec<Vec<f64>> = objects.iter().map(|o| o.vector.clone()).collect();
        let feats = g.constant(Matrix::from_rows(&rows));
        let w = g.param(&self.store, self.projection);
        let projected = g.matmul(feats, w);
        let table = g.param(&self.store, self.order_embeddings);
        let orders: Vec<usize> = objects.iter().map(|o| o.order - 1).collect();
        let order = g.gather(table, &orders);
        g.add(projected, order)
    }

    fn encode_graph(&self, g: &mut Graph, objects: &[ObjectFeature]) -> Result<Var> {
        if objects.is_empty() {
            return Err(Error::data("no objects to encode"));
        }
        self.check_objects(objects)?;
        let mut x = self.embed_objects(g, objects);
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x);
        }
        Ok(x)
    }

    /// The encoder input rows `W o_i + order[t_i]`.
    pub fn input_rows(&self, objects: &[ObjectFeature]) -> Result<Matrix> {
        self.check_objects(objects)?;
        let mut g = Graph::new();
        let x = self.embed_objects(&mut g, objects);
        Ok(g.value(x).clone())
    }

    /// Encoded object states, one row per input object.
    pub fn encode_objects(&self, objects: &[ObjectFeature]) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = self.encode_graph(&mut g, objects)?;
        Ok(g.value(x).clone())
    }

    /// Logit rows for decoder inputs `inputs` (starting with `<bos>`) given
    /// the encoded objects of one image.
    fn decode_graph(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Var {
        let pooled = g.mean_rows(memory);
        let h0 = self.init.forward(g, &self.store, pooled);
        let mut h = g.tanh(h0);
        let keys = self.attention.project_keys(g, &self.store, memory);
        let table = g.param(&self.store, self.embed);
        let mut logits = Vec::with_capacity(inputs.len());
        for &tok in inputs {
            let context = self.attention.forward(g, &self.store, h, keys, memory);
            let emb = g.gather(table, &[tok]);
            let x = g.concat_cols(&[emb, context]);
            h = self.gru.forward(g, &self.store, x, h);
            let feats = g.concat_cols(&[h, context]);
            logits.push(self.out.forward(g, &self.store, feats));
        }
        g.concat_rows(&logits)
    }

    fn image_rows(objects: &[ObjectFeature], order: usize) -> Vec<usize> {
        objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.order == order)
            .map(|(i, _)| i)
            .collect()
    }

    /// Scorer over the term vocabulary for the image with 1-based `order`.
    pub fn scorer(&self, objects: &[ObjectFeature], order: usize) -> Result<TermScorer<'_>> {
        let encoded = self.encode_objects(objects)?;
        let rows = Self::image_rows(objects, order);
        if rows.is_empty() {
            return Err(Error::data(format!("no objects for image order {order}")));
        }
        let mut memory = Matrix::zeros(rows.len(), encoded.cols);
        for (i, &r) in rows.iter().enumerate() {
            memory.row_mut(i).copy_from_slice(encoded.row(r));
        }
        Ok(TermScorer { model: self, memory })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TermMeta {
            vocab: self.vocab.clone(),
            trained_steps: self.trained_steps,
        };
        save_checkpoint(path, KIND, &self.config, meta, &self.store)
    }

    /// Loads a checkpoint; with `expected` set, a differing config is refused.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let (config, meta, params): (_, TermMeta, _) = load_checkpoint(path, KIND, expected)?;
        let mut model = TermModel::new(&config, meta.vocab)?;
        model.store.load_from(params)?;
        model.trained_steps = meta.trained_steps;
        Ok(model)
    }
}

impl Trainable for TermModel {
    type Example = TermExample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn example_loss(&self, g: &mut Graph, example: &TermExample) -> Result<(Var, usize)> {
        let encoded = self.encode_graph(g, &example.objects)?;
        let mut losses = Vec::new();
        let mut tokens = 0;
        for (t, target) in example.targets.iter().enumerate() {
            let rows = Self::image_rows(&example.objects, t + 1);
            if rows.is_empty() {
                return Err(Error::data(format!(
                    "training example has no objects for image {}",
                    t + 1
                )));
            }
            let memory = g.gather(encoded, &rows);
            let mut inputs = vec![BOS_ID];
            inputs.extend_from_slice(target);
            let mut outputs = target.clone();
            outputs.push(EOS_ID);
            let logits = self.decode_graph(g, memory, &inputs);
            losses.push(g.cross_entropy(logits, &outputs));
            tokens += outputs.len();
        }
        if losses.is_empty() {
            return Err(Error::data("training example has no images"));
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = g.add(total, *l);
        }
        Ok((total, tokens))
    }

    fn mark_trained(&mut self, steps: u64) {
        self.trained_steps += steps;
    }
}

/// Next-term log-probabilities for one image.
pub struct TermScorer<'a> {
    model: &'a TermModel,
    memory: Matrix,
}

impl TermScorer<'_> {
    pub fn next_token_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.model.config.max_len {
            return Err(Error::data(format!(
                "prefix of {} tokens reaches max_len {}",
                prefix.len(),
                self.model.config.max_len
            )));
        }
        let mut g = Graph::new();
        let memory = g.constant(self.memory.clone());
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(prefix);
        let logits = self.model.decode_graph(&mut g, memory, &inputs);
        let last = g.value(logits).rows - 1;
        let row = Matrix::from_vec(1, self.model.vocab.len(), g.value(logits).row(last).to_vec());
        Ok(row.log_softmax_rows().data)
    }
}

impl StepScorer for TermScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn log_probs(&self, prefix: &[usize], _target_len: usize) -> Result<Vec<f64>> {
        self.next_token_logprobs(prefix)
    }

    fn end_token(&self) -> Option<usize> {
        Some(EOS_ID)
    }

    fn is_reserved(&self, token: usize) -> bool {
        Vocab::is_special(token)
    }
}
