//! Transformer building blocks over the autograd graph. Each block records
//! the [`ParamId`]s it owns; weights live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{normal, xavier, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.insert(format!("{name}.w"), xavier(fan_in, fan_out, rng));
        let b = bias.then(|| ps.insert(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Zeroes weight and bias in place.
    pub fn zero<T: Real>(&self, ps: &mut ParamStore<T>) {
        for id in std::iter::once(self.w).chain(self.b) {
            let t = ps.get_mut(id);
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = ps.insert(format!("{name}.gamma"), Tensor::filled(1, d, T::one()));
        let beta = ps.insert(format!("{name}.beta"), Tensor::zeros(1, d));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    /// Key and value projections of a memory, reusable across queries.
    pub fn project_memory<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, memory: Var) -> (Var, Var) {
        (self.k.forward(g, ps, memory), self.v.forward(g, ps, memory))
    }

    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        query: Var,
        kv: (Var, Var),
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, ps, query);
        let a = g.attention(q, kv.0, kv.1, self.heads, causal);
        self.o.forward(g, ps, a)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, query: Var, memory: Var, causal: bool) -> Var {
        let kv = self.project_memory(g, ps, memory);
        self.attend(g, ps, query, kv, causal)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), d, d_ff, true, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), d_ff, d, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.l1.forward(g, ps, x);
        let h = g.gelu(h);
        self.l2.forward(g, ps, h)
    }
}

/// Pre-norm encoder layer: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, d_ff, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, false);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, h);
        g.add(x, f)
    }
}

/// Bidirectional encoder with learned positions over already-embedded rows.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub max_len: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        n_layers: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pos = ps.insert(format!("{name}.pos"), normal(max_len, d, 0.02, rng));
        let layers = (0..n_layers).map(|i| EncoderLayer::new(ps, &format!("{name}.layers.{i}"), d, heads, d_ff, rng)).collect();
        Encoder { pos, layers, max_len }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let n = g.shape(x).0;
        assert!(n <= self.max_len, "sequence of {n} exceeds encoder length {}", self.max_len);
        let pos = g.param(ps, self.pos);
        let p = g.slice_rows(pos, 0..n);
        let mut h = g.add(x, p);
        for layer in &self.layers {
            h = layer.forward(g, ps, h);
        }
        h
    }

    /// Zeroes every residual-branch output projection, making the encoder an
    /// identity over `embeddings + positions`.
    pub fn zero_residual_outputs<T: Real>(&self, ps: &mut ParamStore<T>) {
        for l in &self.layers {
            l.attn.o.zero(ps);
            l.ffn.l2.zero(ps);
        }
    }
}
