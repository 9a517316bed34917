//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`] and are memoised so a parameter used many times
//! (a recurrent cell unrolled over steps) is a single leaf. After
//! [`Graph::backward`] the gradient of each parameter is available from
//! [`Graph::param_grads`].

use std::collections::HashMap;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
        row_losses: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Matrix>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a single row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols, r.cols, "add_row width mismatch");
        for i in 0..value.rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "mul_row expects a single row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols, r.cols, "mul_row width mismatch");
        for i in 0..value.rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = xhat.clone();
        self.push(value, Op::LayerNorm { x: a, xhat, inv_std })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Rows of `table` at the given indices (embedding lookup, row selection).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(rows.len(), t.cols);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols);
        let mut value = Matrix::zeros(x.rows, end - start);
        for r in 0..x.rows {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in value.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        value.data.iter_mut().for_each(|v| *v /= n);
        self.push(value, Op::MeanRows(a))
    }

    /// Summed negative log-likelihood of `targets[i]` under row `i` of
    /// `logits`, as a `1 x 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per logits row");
        let log_probs = l.log_softmax_rows();
        let row_losses: Vec<f64> = targets.iter().enumerate().map(|(i, &t)| -log_probs.get(i, t)).collect();
        let probs = log_probs.map(f64::exp);
        self.push(
            Matrix::scalar(row_losses.iter().sum()),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                row_losses,
            },
        )
    }

    /// Per-row losses of every cross-entropy node, in recording order.
    pub fn cross_entropy_terms(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::CrossEntropy { row_losses, .. } => Some(row_losses.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).data.iter().sum());
        self.push(value, Op::Sum(a))
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &Matrix) {
        // Each arm computes parent gradients from immutable borrows first and
        // accumulates afterwards.
        let updates: Vec<(Var, Matrix)> = {
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param => Vec::new(),
                Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))), (*b, val(*a).t_matmul(g))],
                Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
                Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
                Op::Mul(a, b) => vec![
                    (*a, g.zip_map(val(*b), |x, y| x * y)),
                    (*b, g.zip_map(val(*a), |x, y| x * y)),
                ],
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    vec![(*a, g.clone()), (*row, gr)]
                }
                Op::MulRow(a, row) => {
                    let x = val(*a);
                    let rv = val(*row);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.set(r, c, g.get(r, c) * rv.data[c]);
                            gr.data[c] += g.get(r, c) * x.get(r, c);
                        }
                    }
                    vec![(*a, ga), (*row, gr)]
                }
                Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
                Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y)))],
                Op::Sigmoid(a) => vec![(*a, g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y)))],
                Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |gy, x| gy * gelu_grad(x)))],
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    vec![(*a, gx)]
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.cols as f64;
                    let mut gx = Matrix::zeros(xhat.rows, xhat.cols);
                    for (r, &inv) in inv_std.iter().enumerate().take(xhat.rows) {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.cols {
                            gx.set(r, c, inv / n * (n * gr[c] - sum_g - hr[c] * sum_gh));
                        }
                    }
                    vec![(*x, gx)]
                }
                Op::Transpose(a) => vec![(*a, g.transpose())],
                Op::Gather { table, rows } => {
                    let t = val(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    vec![(*table, gt)]
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    vec![(*x, gx)]
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    parts
                        .iter()
                        .map(|p| {
                            let cols = val(*p).cols;
                            let mut gp = Matrix::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            offset += cols;
                            (*p, gp)
                        })
                        .collect()
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    parts
                        .iter()
                        .map(|p| {
                            let rows = val(*p).rows;
                            let gp = Matrix::from_vec(
                                rows,
                                g.cols,
                                g.data[offset * g.cols..(offset + rows) * g.cols].to_vec(),
                            );
                            offset += rows;
                            (*p, gp)
                        })
                        .collect()
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let n = x.rows as f64;
                    let mut gx = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                            *o = v / n;
                        }
                    }
                    vec![(*a, gx)]
                }
                Op::CrossEntropy {
                    logits, targets, probs, ..
                } => {
                    let scale = g.data[0];
                    let mut gl = probs.map(|p| p * scale);
                    for (i, &t) in targets.iter().enumerate() {
                        let v = gl.get(i, t);
                        gl.set(i, t, v - scale);
                    }
                    vec![(*logits, gl)]
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    vec![(*a, Matrix::from_vec(x.rows, x.cols, vec![g.data[0]; x.rows * x.cols]))]
                }
            }
        };
        for (v, gv) in updates {
            self.accumulate(v, gv);
        }
    }

    /// Gradient of every parameter touched by the last backward pass;
    /// untouched parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        (0..store.len())
            .map(|i| {
                let id = ParamId(i);
                self.params
                    .get(&id)
                    .and_then(|v| self.grads.get(v.0).and_then(Clone::clone))
                    .unwrap_or_else(|| {
                        let (r, c) = store.value(id).shape();
                        Matrix::zeros(r, c)
                    })
            })
            .collect()
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
