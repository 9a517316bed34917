//! Building blocks shared by the term and story models. Each block owns
//! parameter ids in a [`ParamStore`] and records its forward pass on a
//! [`Graph`].

use rand::Rng;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_filled(format!("{name}.b"), 1, fan_out, 0.0));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_filled(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Scaled dot-product attention with bias-free projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            heads,
            dim,
        }
    }

    /// `queries` attend over `memory`; `causal` hides later memory rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let nq = g.value(queries).rows;
        let nk = g.value(memory).rows;
        let mask = causal.then(|| {
            let mut m = Matrix::zeros(nq, nk);
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m.set(i, j, MASKED);
                }
            }
            g.constant(m)
        });
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(mask) = mask {
                scores = g.add(scores, mask);
            }
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, store, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Post-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = self.attn.forward(g, store, x, x, false);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let f = self.ff.forward(g, store, x);
        let x = g.add(x, f);
        self.norm2.forward(g, store, x)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention, FFN.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(g, store, x, x, true);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, memory, false);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, store, x);
        let f = self.ff.forward(g, store, x);
        let x = g.add(x, f);
        self.norm3.forward(g, store, x)
    }
}

/// Gated recurrent unit operating on single `1 x n` rows.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            input: Linear::new(store, &format!("{name}.input"), input_dim, 3 * dim, true, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, 3 * dim, true, rng),
            dim,
        }
    }

    /// `z = σ(..)`, `r = σ(..)`, `n = tanh(x_n + r ⊙ h_n)`, `h' = n + z ⊙ (h - n)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let d = self.dim;
        let xi = self.input.forward(g, store, x);
        let hh = self.hidden.forward(g, store, h);
        let xz = g.slice_cols(xi, 0, d);
        let xr = g.slice_cols(xi, d, 2 * d);
        let xn = g.slice_cols(xi, 2 * d, 3 * d);
        let hz = g.slice_cols(hh, 0, d);
        let hr = g.slice_cols(hh, d, 2 * d);
        let hn = g.slice_cols(hh, 2 * d, 3 * d);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

/// Additive (Bahdanau) attention of one query row over key rows.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    query: Linear,
    key: Linear,
    score: Linear,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        AdditiveAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng),
            score: Linear::new(store, &format!("{name}.score"), dim, 1, false, rng),
        }
    }

    /// Projects the memory once so it can be reused across decode steps.
    pub fn project_keys(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Var {
        self.key.forward(g, store, memory)
    }

    /// Returns the `1 x dim` context vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: Var, memory: Var) -> Var {
        let q = self.query.forward(g, store, query);
        let e = g.add_row(keys, q);
        let e = g.tanh(e);
        let s = self.score.forward(g, store, e);
        let s = g.transpose(s);
        let w = g.softmax_rows(s);
        g.matmul(w, memory)
    }
}
