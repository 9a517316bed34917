//! Central finite-difference verification of the tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::train::{objective, Trainable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
    pub parameter_count: usize,
}

fn batch_objective<M: Trainable>(model: &M, batch: &[M::Example]) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for ex in batch {
        let (loss, _, _) = objective(model, &mut g, ex)?;
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::data("gradient check needs a nonempty batch"))?;
    Ok((g, total))
}

/// Per-token losses of each example, each paired with its token count.
fn token_losses<M: Trainable>(model: &M, batch: &[M::Example]) -> Result<Vec<(Vec<f64>, usize)>> {
    batch
        .iter()
        .map(|ex| {
            let mut g = Graph::new();
            let (_, _, tokens) = objective(model, &mut g, ex)?;
            Ok((g.cross_entropy_terms(), tokens))
        })
        .collect()
}

/// Central difference of the batch objective, taken token by token so that
/// the large constant part of each loss cancels before it is rounded.
fn central_difference(plus: &[(Vec<f64>, usize)], minus: &[(Vec<f64>, usize)], epsilon: f64) -> f64 {
    plus.iter()
        .zip(minus)
        .map(|((p, n), (m, _))| {
            let diff: f64 = p.iter().zip(m).map(|(a, b)| a - b).sum();
            diff / *n as f64
        })
        .sum::<f64>()
        / (2.0 * epsilon)
}

/// Relative error `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares tape gradients of the batch objective (the sum over examples
/// of the mean token loss) with central differences
/// `(f(θ + ε) - f(θ - ε)) / 2ε` on up to `per_group` sampled entries of
/// every parameter tensor.
pub fn grad_check<M: Trainable>(
    model: &mut M,
    batch: &[M::Example],
    epsilon: f64,
    per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (mut g, loss) = batch_objective(model, batch)?;
    g.backward(loss);
    let analytic = g.param_grads(model.store());
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let len = model.store().value(id).data.len();
        let picks: Vec<usize> = if len <= per_group {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst_err: f64 = 0.0;
        let mut worst = (0.0, 0.0);
        for &j in &picks {
            let original = model.store().value(id).data[j];
            let mut eval = |value: f64| {
                model.store_mut().value_mut(id).data[j] = value;
                token_losses(model, batch)
            };
            let plus = eval(original + epsilon);
            let minus = eval(original - epsilon);
            model.store_mut().value_mut(id).data[j] = original;
            let numeric = central_difference(&plus?, &minus?, epsilon);
            let a = analytic[id.0].data[j];
            let err = relative_error(a, numeric);
            if err >= worst_err {
                worst_err = err;
                worst = (a, numeric);
            }
        }
        groups.push(GroupError {
            name: model.store().name(id).to_string(),
            checked: picks.len(),
            max_rel_error: worst_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
        groups,
        parameter_count: model.store().scalar_count(),
    })
}

/// Control model: `softmax(x W + b)` with cross-entropy, whose gradient has
/// the closed form `x^T (p - onehot)`.
#[derive(Debug, Clone)]
pub struct LinearSoftmax {
    store: ParamStore,
    weights: ParamId,
    bias: ParamId,
}

impl LinearSoftmax {
    pub fn new(weights: Matrix, bias: Matrix) -> Self {
        let mut store = ParamStore::new();
        let weights = store.add("weights", weights);
        let bias = store.add("bias", bias);
        LinearSoftmax { store, weights, bias }
    }

    pub fn weights(&self) -> &Matrix {
        self.store.value(self.weights)
    }

    pub fn bias(&self) -> &Matrix {
        self.store.value(self.bias)
    }
}

impl Trainable for LinearSoftmax {
    /// Input rows and one target class per row.
    type Example = (Matrix, Vec<usize>);

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn example_loss(&self, g: &mut Graph, (x, targets): &Self::Example) -> Result<(Var, usize)> {
        let x = g.constant(x.clone());
        let w = g.param(&self.store, self.weights);
        let b = g.param(&self.store, self.bias);
        let logits = g.matmul(x, w);
        let logits = g.add_row(logits, b);
        Ok((g.cross_entropy(logits, targets), targets.len()))
    }
}
