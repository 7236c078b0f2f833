//! Bi-encoder entity retrieval over one-hop KG neighborhoods of the history.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradStore, Graph, ParamStore, Real, Var};
use crate::corpus::Utterance;
use crate::dialograph::{utterance_entities, MentionSource};
use crate::embedder::{Pooling, TextEncoder};
use crate::error::{Error, Result};
use crate::medkg::KnowledgeGraph;
use crate::optim::{lr_at, Adam};
use crate::recall::speaker_token;
use crate::text::{tokenize, Vocab, SEP, SPECIAL_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub n_negatives: usize,
    pub k_retrieve: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            n_negatives: 8,
            k_retrieve: 20,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            max_len: 64,
            lr_max: 2e-3,
            warmup_steps: 100,
            max_steps: 1000,
            batch_size: 8,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("retriever d_model must be a positive multiple of n_heads".into()));
        }
        if self.max_len < 2 || self.batch_size == 0 {
            return Err(Error::Config("retriever max_len must be at least 2 and batch_size positive".into()));
        }
        Ok(())
    }
}

/// One positive-set / negative-set training instance, as token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalExample {
    pub history: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Everything needed to draw fresh negatives for a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPool {
    pub history: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    /// Candidates that are not positives.
    pub others: Vec<Vec<usize>>,
}

impl RetrievalPool {
    /// `n` uniform draws without replacement from the non-positive candidates.
    pub fn example(&self, n: usize, rng: &mut impl Rng) -> RetrievalExample {
        let n = n.min(self.others.len());
        let mut idx = sample(rng, self.others.len(), n).into_vec();
        idx.sort_unstable();
        RetrievalExample {
            history: self.history.clone(),
            positives: self.positives.clone(),
            negatives: idx.into_iter().map(|i| self.others[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedKnowledge {
    pub entities: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub sequence: Vec<String>,
}

impl RetrievedKnowledge {
    pub fn new(entities: Vec<String>, scores: Vec<f64>) -> Self {
        let sequence = knowledge_sequence(&entities);
        RetrievedKnowledge { entities, scores, sequence }
    }
}

/// Entity tokens joined by `[SEP]`.
pub fn knowledge_sequence(entities: &[String]) -> Vec<String> {
    let mut seq = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        if i > 0 {
            seq.push(SPECIAL_TOKENS[SEP].to_string());
        }
        seq.extend(tokenize(e));
    }
    seq
}

/// Entities mentioned in the history, used as sub-graph centers.
pub fn history_entities(history: &[Utterance], kg: &KnowledgeGraph, source: MentionSource) -> Vec<String> {
    let set: BTreeSet<String> = history.iter().flat_map(|u| utterance_entities(u, kg, source)).collect();
    set.into_iter().collect()
}

/// Sorted, deduplicated entities of the one-hop sub-graph around the history.
pub fn candidate_set(history: &[Utterance], kg: &KnowledgeGraph, source: MentionSource) -> Vec<String> {
    let centers = history_entities(history, kg, source);
    kg.one_hop_subgraph(&centers).entity_names().map(str::to_string).collect()
}

/// History ids with speaker tokens, truncated to the most recent `max` tokens.
pub fn history_ids(history: &[Utterance], vocab: &Vocab, max: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for u in history {
        ids.push(vocab.id(speaker_token(u.speaker)));
        ids.extend(u.tokens().iter().map(|t| vocab.id(t)));
    }
    let start = ids.len().saturating_sub(max);
    ids.split_off(start)
}

/// `−log softmax(pos | pos ∪ negs)` on plain scores.
pub fn softmax_nll(pos: f64, negs: &[f64]) -> f64 {
    let m = negs.iter().copied().fold(pos, f64::max);
    let z: f64 = std::iter::once(pos).chain(negs.iter().copied()).map(|s| (s - m).exp()).sum();
    m + z.ln() - pos
}

/// Two independent encoders: one for histories, one for entity names.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub history_encoder: TextEncoder,
    pub entity_encoder: TextEncoder,
}

impl Retriever {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, vocab_size: usize, cfg: &RetrieverConfig, rng: &mut impl Rng) -> Self {
        let enc = |ps: &mut ParamStore<T>, name: &str, rng: &mut _| {
            TextEncoder::new(ps, name, vocab_size, cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.max_len, Pooling::Cls, rng)
        };
        let history_encoder = enc(ps, "retriever.history", rng);
        let entity_encoder = enc(ps, "retriever.entity", rng);
        Retriever { history_encoder, entity_encoder }
    }

    fn max_history(&self) -> usize {
        self.history_encoder.encoder.max_len - 1
    }

    pub fn encode_history<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ids: &[usize]) -> Var {
        let start = ids.len().saturating_sub(self.max_history());
        self.history_encoder.forward(g, ps, &ids[start..])
    }

    /// Stacked entity encodings, one row each.
    pub fn encode_entities<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, entities: &[Vec<usize>]) -> Var {
        let rows: Vec<Var> = entities.iter().map(|e| self.entity_encoder.forward(g, ps, e)).collect();
        g.concat_rows(&rows)
    }

    /// `1×n` inner products between the history and each entity.
    pub fn scores<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, history: &[usize], entities: &[Vec<usize>]) -> Var {
        let h = self.encode_history(g, ps, history);
        let e = self.encode_entities(g, ps, entities);
        g.matmul_t(h, false, e, true)
    }

    pub fn score(&self, ps: &ParamStore<f64>, history: &[usize], entity: &[usize]) -> f64 {
        let mut g = Graph::inference();
        let s = self.scores(&mut g, ps, history, &[entity.to_vec()]);
        g.scalar(s)
    }

    /// Mean over positives of the softmax NLL against the shared negatives;
    /// `None` when there is no positive.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ex: &RetrievalExample) -> Option<Var> {
        if ex.positives.is_empty() {
            return None;
        }
        let all: Vec<Vec<usize>> = ex.positives.iter().chain(&ex.negatives).cloned().collect();
        let s = self.scores(g, ps, &ex.history, &all);
        let np = ex.positives.len();
        let mut terms = Vec::with_capacity(np);
        for p in 0..np {
            let cols: Vec<usize> = std::iter::once(p).chain(np..all.len()).collect();
            let row = g.select_cols(s, &cols);
            terms.push(g.cross_entropy(row, &[0]));
        }
        let stacked = g.concat_rows(&terms);
        let total = g.sum_all(stacked);
        Some(g.scale(total, T::lit(1.0 / np as f64)))
    }

    /// Top-`k` candidates by score, ties by name.
    pub fn retrieve_topk(
        &self,
        ps: &ParamStore<f64>,
        history: &[usize],
        candidates: &[(String, Vec<usize>)],
        k: usize,
    ) -> RetrievedKnowledge {
        if candidates.is_empty() || k == 0 {
            return RetrievedKnowledge::default();
        }
        let ids: Vec<Vec<usize>> = candidates.iter().map(|(_, t)| t.clone()).collect();
        let mut g = Graph::inference();
        let s = self.scores(&mut g, ps, history, &ids);
        let scores = &g.value(s).data;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| candidates[a].0.cmp(&candidates[b].0)));
        order.truncate(k);
        RetrievedKnowledge::new(
            order.iter().map(|&i| candidates[i].0.clone()).collect(),
            order.iter().map(|&i| scores[i]).collect(),
        )
    }
}

/// Loss trace entry of retriever training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrieverStep {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Batched Adam training; negatives are redrawn every time a pool is visited.
/// Per-example gradients are reduced in batch order.
pub fn train_retriever<T: Real>(
    model: &Retriever,
    ps: &mut ParamStore<T>,
    pools: &[RetrievalPool],
    cfg: &RetrieverConfig,
    rng: &mut impl Rng,
) -> Result<Vec<RetrieverStep>> {
    let pools: Vec<&RetrievalPool> = pools.iter().filter(|p| !p.positives.is_empty()).collect();
    let mut trace = Vec::new();
    if pools.is_empty() {
        return Ok(trace);
    }
    let mut opt = Adam::new(ps);
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pools.len()) {
            if order.is_empty() {
                order = (0..pools.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled");
            batch.push(pools[i].example(cfg.n_negatives, rng));
        }
        let params: &ParamStore<T> = ps;
        let results: Vec<(f64, Vec<_>)> = batch
            .par_iter()
            .map(|ex| {
                let mut g = Graph::new();
                let loss = model.loss(&mut g, params, ex).expect("pools have positives");
                let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
                (value, g.backward(loss).into_param_grads())
            })
            .collect();
        let mut grads = GradStore::new(ps.len());
        let mut total = 0.0;
        for (l, gr) in results {
            total += l;
            grads.accumulate(gr);
        }
        let n = batch.len() as f64;
        grads.scale(T::lit(1.0 / n));
        let loss = total / n;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical { sample_id: format!("retriever step {step}"), message: "non-finite loss".into() });
        }
        let lr = lr_at(step, cfg.warmup_steps, cfg.max_steps + 1, cfg.lr_max);
        opt.step(ps, &grads, lr);
        trace.push(RetrieverStep { step, loss, lr });
    }
    Ok(trace)
}

/// Cache row written by the retrieval pre-pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    pub sample_id: String,
    pub entities: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn cache_map(rows: Vec<CacheRow>) -> BTreeMap<String, RetrievedKnowledge> {
    rows.into_iter().map(|r| (r.sample_id, RetrievedKnowledge::new(r.entities, r.scores))).collect()
}
