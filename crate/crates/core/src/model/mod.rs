//! The generator: context and knowledge encoders, the dialogue-graph encoder
//! with recall scores, and the recall-prefixed decoder with gated fusion.

pub mod base;
pub mod decoder;
pub mod generate;
pub mod rgat;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{normal, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Encoder, Linear};
use crate::text::{BOS, EOS, SEP};

pub use decoder::{DecoderLayer, LayerMemory, CTX, KNOW, STC, STREAMS};
pub use rgat::{Adjacency, RgatLayer, N_RELATIONS};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_vertex: usize,
    pub d_speaker: usize,
    pub n_rgat_layers: usize,
    /// Filled in from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub max_history_len: usize,
    pub max_knowledge_len: usize,
    pub max_recall_len: usize,
    pub max_response_len: usize,
    pub lambda_response: f64,
    pub lambda_recall: f64,
    pub lambda_recall_score: f64,
    pub use_kdge: bool,
    pub use_reg: bool,
    pub use_knowledge: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_vertex: 64,
            d_speaker: 8,
            n_rgat_layers: 2,
            vocab_size: 0,
            max_history_len: 256,
            max_knowledge_len: 128,
            max_recall_len: 48,
            max_response_len: 32,
            lambda_response: 0.9,
            lambda_recall: 0.9,
            lambda_recall_score: 0.1,
            use_kdge: true,
            use_reg: true,
            use_knowledge: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.d_ff, self.n_heads, self.d_vertex, self.d_speaker, self.vocab_size];
        if dims.contains(&0) || self.n_dec_layers == 0 {
            return Err(Error::Config("model dimensions, vocab_size and n_dec_layers must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.d_vertex != self.d_model {
            return Err(Error::Config("d_vertex must equal d_model (structure rows add utterance and vertex encodings)".into()));
        }
        if self.max_history_len == 0 || self.max_knowledge_len == 0 {
            return Err(Error::Config("max_history_len and max_knowledge_len must be positive".into()));
        }
        let lambdas = [self.lambda_response, self.lambda_recall, self.lambda_recall_score];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Decoder positions: BOS, recall, SEP, response.
    pub fn max_decoder_len(&self) -> usize {
        self.max_recall_len + self.max_response_len + 2
    }

    /// Streams the decoder fuses, in [`STREAMS`] order.
    pub fn active_streams(&self) -> [bool; 3] {
        [true, self.use_kdge, self.use_knowledge]
    }
}

/// One training or decoding instance in token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub id: String,
    /// Speaker-prefixed utterances, concatenated.
    pub history: Vec<usize>,
    /// Token span of each utterance in `history`.
    pub spans: Vec<Range<usize>>,
    pub speakers: Vec<usize>,
    pub adjacency: Adjacency,
    pub knowledge: Vec<usize>,
    pub recall: Vec<usize>,
    pub recall_labels: Vec<f64>,
    pub response: Vec<usize>,
}

impl ModelInput {
    pub fn num_utterances(&self) -> usize {
        self.spans.len()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let m = self.spans.len();
        let bad = |msg: String| Err(Error::Argument(format!("sample {}: {msg}", self.id)));
        if self.history.is_empty() || m == 0 {
            return bad("empty history".into());
        }
        if self.history.len() > cfg.max_history_len {
            return bad(format!("history of {} tokens exceeds {}", self.history.len(), cfg.max_history_len));
        }
        if self.knowledge.len() > cfg.max_knowledge_len {
            return bad(format!("knowledge of {} tokens exceeds {}", self.knowledge.len(), cfg.max_knowledge_len));
        }
        if self.recall.len() > cfg.max_recall_len || self.response.len() > cfg.max_response_len {
            return bad("recall or response longer than the configured maximum".into());
        }
        let mut next = 0;
        for s in &self.spans {
            if s.start != next || s.end <= s.start {
                return bad("utterance spans must tile the history".into());
            }
            next = s.end;
        }
        if next != self.history.len() || self.speakers.len() != m || self.recall_labels.len() != m {
            return bad("spans, speakers and recall labels disagree on the number of utterances".into());
        }
        if self.adjacency.iter().any(|a| a.len() != m * m) || self.speakers.iter().any(|&s| s > 1) {
            return bad("malformed graph".into());
        }
        let v = cfg.vocab_size;
        if [&self.history, &self.knowledge, &self.recall, &self.response].iter().any(|s| s.iter().any(|&t| t >= v)) {
            return bad("token id outside the vocabulary".into());
        }
        Ok(())
    }

    /// Decoder input, optional separator position, targets and the number of
    /// leading targets that belong to the recall phase.
    pub fn teacher_forcing(&self, use_reg: bool) -> (Vec<usize>, Option<usize>, Vec<usize>, usize) {
        let mut input = vec![BOS];
        let mut targets = Vec::new();
        let mut sep_pos = None;
        let mut n_recall = 0;
        if use_reg {
            input.extend(&self.recall);
            sep_pos = Some(input.len());
            input.push(SEP);
            targets.extend(&self.recall);
            targets.push(SEP);
            n_recall = targets.len();
        }
        input.extend(&self.response);
        targets.extend(&self.response);
        targets.push(EOS);
        (input, sep_pos, targets, n_recall)
    }
}

/// Encoder-side products for one input.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub ctx: Var,
    pub pooled: Var,
    pub utterances: Option<Var>,
    pub vertices: Option<Var>,
    pub alpha: Option<Var>,
    pub stc: Option<Var>,
    pub know: Option<Var>,
    /// Input embedding used at the separator position.
    pub sep: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub hidden: Var,
    pub logits: Var,
    /// One `T×3` gate matrix per layer.
    pub gates: Vec<Var>,
}

/// Loss components of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub response: f64,
    pub recall: f64,
    pub recall_score: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub response: Var,
    pub recall: Option<Var>,
    pub recall_score: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tok: ParamId,
    pub ctx_encoder: Encoder,
    pub know_encoder: Encoder,
    pub know_null: ParamId,
    pub speaker: ParamId,
    pub vertex_init: Linear,
    pub rgat: Vec<RgatLayer>,
    pub recall_q: Linear,
    pub recall_k: Linear,
    pub dec_pos: ParamId,
    pub dec_layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl Model {
    /// Registers every parameter, whatever the ablation flags say.
    pub fn new<T: Real>(cfg: ModelConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
        let tok = ps.insert("tok", normal(cfg.vocab_size, d, 0.1, rng));
        let ctx_encoder = Encoder::new(ps, "ctx_enc", d, h, ff, cfg.n_enc_layers, cfg.max_history_len, rng);
        let know_encoder = Encoder::new(ps, "know_enc", d, h, ff, cfg.n_enc_layers, cfg.max_knowledge_len, rng);
        let know_null = ps.insert("know_null", normal(1, d, 0.1, rng));
        let speaker = ps.insert("speaker", normal(2, cfg.d_speaker, 0.1, rng));
        let vertex_init = Linear::new(ps, "vertex_init", d + cfg.d_speaker, cfg.d_vertex, true, rng);
        let rgat = (0..cfg.n_rgat_layers).map(|l| RgatLayer::new(ps, &format!("rgat.{l}"), cfg.d_vertex, rng)).collect();
        let recall_q = Linear::new(ps, "recall.q", d, d, false, rng);
        let recall_k = Linear::new(ps, "recall.k", cfg.d_vertex, d, false, rng);
        let dec_pos = ps.insert("dec.pos", normal(cfg.max_decoder_len(), d, 0.02, rng));
        let dec_layers = (0..cfg.n_dec_layers).map(|l| DecoderLayer::new(ps, &format!("dec.layers.{l}"), d, h, ff, rng)).collect();
        let out = Linear::new(ps, "out", d, cfg.vocab_size, true, rng);
        Ok(Model {
            cfg,
            tok,
            ctx_encoder,
            know_encoder,
            know_null,
            speaker,
            vertex_init,
            rgat,
            recall_q,
            recall_k,
            dec_pos,
            dec_layers,
            out,
        })
    }

    /// Token-level context encoding.
    pub fn encode_context<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, history: &[usize]) -> Var {
        let tok = g.param(ps, self.tok);
        let x = g.gather(tok, history);
        self.ctx_encoder.forward(g, ps, x)
    }

    /// Token-level knowledge encoding; a single learned row when empty.
    pub fn encode_knowledge<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, knowledge: &[usize]) -> Var {
        if knowledge.is_empty() {
            return g.param(ps, self.know_null);
        }
        let tok = g.param(ps, self.tok);
        let x = g.gather(tok, knowledge);
        self.know_encoder.forward(g, ps, x)
    }

    /// Initial vertices from utterance means and speakers, then the RGAT stack.
    pub fn encode_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        utterances: Var,
        speakers: &[usize],
        adjacency: &Adjacency,
    ) -> Var {
        let table = g.param(ps, self.speaker);
        let spk = g.gather(table, speakers);
        let cat = g.concat_cols(&[utterances, spk]);
        let mut v = self.vertex_init.forward(g, ps, cat);
        for layer in &self.rgat {
            v = layer.forward(g, ps, v, adjacency);
        }
        v
    }

    /// `M×1` recall probabilities `σ((W_q h_ctx)·(W_k v_i))`.
    pub fn recall_scores<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, pooled: Var, vertices: Var) -> Var {
        let q = self.recall_q.forward(g, ps, pooled);
        let k = self.recall_k.forward(g, ps, vertices);
        let logits = g.matmul_t(k, false, q, true);
        g.sigmoid(logits)
    }

    /// Rows `α_i (h_i + v_i)`.
    pub fn structure_encoding<T: Real>(&self, g: &mut Graph<T>, alpha: Var, utterances: Var, vertices: Var) -> Var {
        let s = g.add(utterances, vertices);
        g.mul_col(s, alpha)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inp: &ModelInput) -> Encoded {
        let ctx = self.encode_context(g, ps, &inp.history);
        let pooled = g.mean_rows(ctx);
        let (mut utterances, mut vertices, mut alpha, mut stc) = (None, None, None, None);
        if self.cfg.use_kdge {
            let u = g.segment_mean(ctx, &inp.spans);
            let v = self.encode_graph(g, ps, u, &inp.speakers, &inp.adjacency);
            let a = self.recall_scores(g, ps, pooled, v);
            stc = Some(self.structure_encoding(g, a, u, v));
            (utterances, vertices, alpha) = (Some(u), Some(v), Some(a));
        }
        let know = self.cfg.use_knowledge.then(|| self.encode_knowledge(g, ps, &inp.knowledge));
        let sep = match know {
            Some(k) => g.mean_rows(k),
            None => {
                let tok = g.param(ps, self.tok);
                g.gather(tok, &[SEP])
            }
        };
        Encoded { ctx, pooled, utterances, vertices, alpha, stc, know, sep }
    }

    pub fn memory<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, enc: &Encoded) -> Vec<LayerMemory> {
        self.dec_layers.iter().map(|l| l.memory(g, ps, [Some(enc.ctx), enc.stc, enc.know])).collect()
    }

    /// Token embeddings plus positions, with the separator row replaced.
    pub fn decoder_input<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        ids: &[usize],
        sep_pos: Option<usize>,
        sep: Var,
    ) -> Var {
        let n = ids.len();
        assert!(n > 0 && n <= self.cfg.max_decoder_len(), "decoder input length {n}");
        let tok = g.param(ps, self.tok);
        let mut x = g.gather(tok, ids);
        if let Some(p) = sep_pos.filter(|&p| p < n) {
            let mut parts = Vec::with_capacity(3);
            if p > 0 {
                parts.push(g.slice_rows(x, 0..p));
            }
            parts.push(sep);
            if p + 1 < n {
                parts.push(g.slice_rows(x, p + 1..n));
            }
            x = g.concat_rows(&parts);
        }
        let pos = g.param(ps, self.dec_pos);
        let p = g.slice_rows(pos, 0..n);
        g.add(x, p)
    }

    pub fn decode_hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        memory: &[LayerMemory],
        ids: &[usize],
        sep_pos: Option<usize>,
        sep: Var,
    ) -> (Var, Vec<Var>) {
        let mut h = self.decoder_input(g, ps, ids, sep_pos, sep);
        let mut gates = Vec::with_capacity(self.dec_layers.len());
        for (layer, mem) in self.dec_layers.iter().zip(memory) {
            let (next, w) = layer.forward(g, ps, h, mem);
            h = next;
            gates.push(w);
        }
        (h, gates)
    }

    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        memory: &[LayerMemory],
        ids: &[usize],
        sep_pos: Option<usize>,
        sep: Var,
    ) -> DecoderOutput {
        let (hidden, gates) = self.decode_hidden(g, ps, memory, ids, sep_pos, sep);
        let logits = self.out.forward(g, ps, hidden);
        DecoderOutput { hidden, logits, gates }
    }

    /// Teacher-forced logits over the whole target and the targets themselves.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inp: &ModelInput) -> (Encoded, DecoderOutput, Vec<usize>, usize) {
        let enc = self.encode(g, ps, inp);
        let mem = self.memory(g, ps, &enc);
        let (ids, sep_pos, targets, n_recall) = inp.teacher_forcing(self.cfg.use_reg);
        let out = self.decode(g, ps, &mem, &ids, sep_pos, enc.sep);
        (enc, out, targets, n_recall)
    }

    /// Weighted joint loss. The recall-phase NLL covers recall tokens and the
    /// separator, the response NLL covers response tokens and EOS.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inp: &ModelInput) -> LossVars {
        let (enc, out, targets, n_recall) = self.forward(g, ps, inp);
        let n = targets.len();
        let resp_logits = g.slice_rows(out.logits, n_recall..n);
        let response = g.cross_entropy(resp_logits, &targets[n_recall..]);
        let recall = (n_recall > 0).then(|| {
            let l = g.slice_rows(out.logits, 0..n_recall);
            g.cross_entropy(l, &targets[..n_recall])
        });
        let recall_score = enc.alpha.map(|a| {
            let labels: Vec<T> = inp.recall_labels.iter().map(|&r| T::lit(r)).collect();
            g.bce(a, &labels, T::lit(BCE_EPS))
        });
        let c = &self.cfg;
        let mut total = g.scale(response, T::lit(c.lambda_response));
        if let Some(r) = recall {
            let t = g.scale(r, T::lit(c.lambda_recall));
            total = g.add(total, t);
        }
        if let Some(r) = recall_score {
            let t = g.scale(r, T::lit(c.lambda_recall_score));
            total = g.add(total, t);
        }
        LossVars { response, recall, recall_score, total }
    }

    pub fn loss_values<T: Real>(g: &Graph<T>, l: &LossVars) -> LossBundle {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).to_f64().unwrap_or(f64::NAN));
        LossBundle {
            response: v(Some(l.response)),
            recall: v(l.recall),
            recall_score: v(l.recall_score),
            total: v(Some(l.total)),
        }
    }
}

/// Random well-formed input with `m` utterances of 1–4 tokens each, random
/// graph edges and knowledge, for tests and benchmarks.
pub fn random_input(cfg: &ModelConfig, m: usize, rng: &mut impl Rng) -> ModelInput {
    use crate::text::SPECIAL_TOKENS;
    let first = SPECIAL_TOKENS.len();
    let word = |rng: &mut dyn rand::RngCore| rng.random_range(first..cfg.vocab_size);
    let mut history = Vec::new();
    let mut spans = Vec::new();
    let mut speakers = Vec::new();
    for i in 0..m {
        let start = history.len();
        history.push(crate::text::PATIENT + i % 2);
        for _ in 0..rng.random_range(1..=4) {
            history.push(word(rng));
        }
        spans.push(start..history.len());
        speakers.push(i % 2);
    }
    let mut temporal = vec![false; m * m];
    let mut knowledge = vec![false; m * m];
    let self_loop: Vec<bool> = (0..m * m).map(|k| k / m == k % m).collect();
    for i in 0..m {
        for j in i + 1..m {
            let (t, k) = (j == i + 1, rng.random_bool(0.3));
            for (a, b) in [(i, j), (j, i)] {
                temporal[a * m + b] = t;
                knowledge[a * m + b] = k;
            }
        }
    }
    let recall_labels: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let take = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<usize> { (0..n).map(|_| word(rng)).collect() };
    let kn = rng.random_range(0..=cfg.max_knowledge_len.min(6));
    let mut know = take(rng, kn);
    if know.len() > 2 {
        know[1] = SEP;
    }
    let rn = rng.random_range(0..=cfg.max_recall_len.min(5));
    let yn = rng.random_range(0..=cfg.max_response_len.min(5));
    ModelInput {
        id: "random".into(),
        history,
        spans,
        speakers,
        adjacency: [temporal, knowledge, self_loop],
        knowledge: know,
        recall: take(rng, rn),
        recall_labels,
        response: take(rng, yn),
    }
}
