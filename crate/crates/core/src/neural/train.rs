use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Adam, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

/// A model trained by per-token cross-entropy.
pub trait Trainable {
    type Example;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Records the summed token loss of one example; returns it with the
    /// number of predicted tokens.
    fn example_loss(&self, g: &mut Graph, example: &Self::Example) -> Result<(Var, usize)>;

    /// Called after training with the number of optimizer steps taken.
    fn mark_trained(&mut self, _steps: u64) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

/// Mean per-token loss of one example as a scalar graph node.
pub(crate) fn objective<M: Trainable>(model: &M, g: &mut Graph, example: &M::Example) -> Result<(Var, f64, usize)> {
    let (loss, tokens) = model.example_loss(g, example)?;
    if tokens == 0 {
        return Err(Error::data("training example has no target tokens"));
    }
    let raw = g.value(loss).data[0];
    Ok((g.scale(loss, 1.0 / tokens as f64), raw, tokens))
}

/// Trains with Adam, one update per example, visiting examples in a seeded
/// shuffle each epoch. Returns the per-token loss of every epoch measured
/// before each update. Bit-reproducible for a fixed seed.
pub fn fit<M: Trainable>(model: &mut M, examples: &[M::Example], config: &TrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::data("no training examples"));
    }
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.store(), config.learning_rate, config.warmup_steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0;
        for &i in &order {
            let mut g = Graph::new();
            let (loss, raw, n) = objective(model, &mut g, &examples[i])?;
            if !raw.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {raw} at epoch {epoch}, example {i}, step {}",
                    adam.steps() + 1
                )));
            }
            total += raw;
            tokens += n;
            g.backward(loss);
            let grads = g.param_grads(model.store());
            adam.update(model.store_mut(), &grads);
            if !model.store().all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameter after step {} (epoch {epoch})",
                    adam.steps()
                )));
            }
        }
        let epoch_loss = total / tokens as f64;
        log::debug!("epoch {epoch}: {epoch_loss:.6} nats/token");
        history.push(epoch_loss);
    }
    model.mark_trained(adam.steps());
    Ok(history)
}

/// Per-token cross-entropy over `examples` without updating the model.
pub fn mean_loss<M: Trainable>(model: &M, examples: &[M::Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut g = Graph::new();
        let (loss, n) = model.example_loss(&mut g, ex)?;
        total += g.value(loss).data[0];
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::data("no target tokens"));
    }
    Ok(total / tokens as f64)
}
