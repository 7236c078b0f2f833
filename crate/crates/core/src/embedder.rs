//! Sentence embedders: a fixed hashing scorer and a small trainable
//! transformer encoder with mean or first-position pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{normal, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::text::{Vocab, BOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    HashDeterministic,
    TinyTransformerPooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub d_emb: usize,
    #[serde(default)]
    pub trainable: bool,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec { kind: EmbedderKind::HashDeterministic, d_emb: 64, trainable: false }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(Error::Config("embedder d_emb must be positive".into()));
        }
        if self.kind == EmbedderKind::HashDeterministic && self.trainable {
            return Err(Error::Config("hash_deterministic embedder cannot be trainable".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch { name: "embedding".into(), expected: (1, a.dim()), found: (1, b.dim()) });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EmbedderSpec;
    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding>;
}

const HASH_POSITION_WEIGHT: f64 = 0.25;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pseudo-random vector in `[-1, 1)^d` determined by `seed`.
pub fn hash_vector(seed: u64, d: usize) -> Vec<f64> {
    let mut s = seed;
    (0..d).map(|_| (splitmix(&mut s) >> 11) as f64 / (1u64 << 52) as f64 - 1.0).collect()
}

/// `Σ_t g(token_t) + 0.25·g(token_t, t)`, with `g` a seeded hash vector.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    spec: EmbedderSpec,
}

impl HashEmbedder {
    pub fn new(d_emb: usize) -> Self {
        HashEmbedder { spec: EmbedderSpec { kind: EmbedderKind::HashDeterministic, d_emb, trainable: false } }
    }
}

impl Embedder for HashEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding> {
        let d = self.spec.d_emb;
        if tokens.is_empty() {
            return Ok(SentenceEmbedding(vec![1.0 / (d as f64).sqrt(); d]));
        }
        let mut out = vec![0.0; d];
        for (pos, tok) in tokens.iter().enumerate() {
            let h = fnv1a(tok.as_bytes());
            let positional = h ^ splitmix(&mut (pos as u64 + 1));
            for ((o, a), b) in out.iter_mut().zip(hash_vector(h, d)).zip(hash_vector(positional, d)) {
                *o += a + HASH_POSITION_WEIGHT * b;
            }
        }
        Ok(SentenceEmbedding(out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// First position; inputs are prefixed with `[BOS]`.
    Cls,
}

/// Token embedding table plus a bidirectional encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub encoder: Encoder,
    pub pooling: Pooling,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        d: usize,
        heads: usize,
        n_layers: usize,
        max_len: usize,
        pooling: Pooling,
        rng: &mut impl Rng,
    ) -> Self {
        let tok = ps.insert(format!("{name}.tok"), normal(vocab_size, d, 0.1, rng));
        let encoder = Encoder::new(ps, &format!("{name}.enc"), d, heads, 2 * d, n_layers, max_len, rng);
        TextEncoder { tok, encoder, pooling }
    }

    pub fn dim<T: Real>(&self, ps: &ParamStore<T>) -> usize {
        ps.get(self.tok).cols
    }

    /// Ids actually fed to the encoder: `[BOS]`-prefixed for CLS pooling,
    /// truncated to the encoder length keeping the head.
    pub fn prepare(&self, ids: &[usize]) -> Vec<usize> {
        let mut v = Vec::with_capacity(ids.len() + 1);
        if self.pooling == Pooling::Cls || ids.is_empty() {
            v.push(BOS);
        }
        v.extend_from_slice(ids);
        v.truncate(self.encoder.max_len);
        v
    }

    /// Pooled `1×d` encoding.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ids: &[usize]) -> Var {
        let ids = self.prepare(ids);
        let table = g.param(ps, self.tok);
        let x = g.gather(table, &ids);
        let h = self.encoder.forward(g, ps, x);
        match self.pooling {
            Pooling::Mean => g.mean_rows(h),
            Pooling::Cls => g.slice_rows(h, 0..1),
        }
    }
}

/// Trainable-backbone embedder evaluated at 64-bit precision.
#[derive(Clone, Debug)]
pub struct TransformerEmbedder {
    spec: EmbedderSpec,
    pub vocab: Vocab,
    pub encoder: TextEncoder,
    pub params: ParamStore<f64>,
}

impl TransformerEmbedder {
    pub fn new(spec: EmbedderSpec, vocab: Vocab, heads: usize, n_layers: usize, max_len: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let encoder =
            TextEncoder::new(&mut params, "embedder", vocab.len(), spec.d_emb, heads, n_layers, max_len, Pooling::Mean, rng);
        Ok(TransformerEmbedder { spec, vocab, encoder, params })
    }

    /// Wraps existing parameters, checking their width against the spec.
    pub fn from_parts(spec: EmbedderSpec, vocab: Vocab, encoder: TextEncoder, params: ParamStore<f64>) -> Result<Self> {
        spec.validate()?;
        let d = encoder.dim(&params);
        if d != spec.d_emb {
            return Err(Error::Config(format!("embedder parameters have width {d} but spec says d_emb = {}", spec.d_emb)));
        }
        Ok(TransformerEmbedder { spec, vocab, encoder, params })
    }
}

impl Embedder for TransformerEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let mut g = Graph::inference();
        let v = self.encoder.forward(&mut g, &self.params, &ids);
        Ok(SentenceEmbedding(g.value(v).data.clone()))
    }
}
