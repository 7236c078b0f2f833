//! Two-phase decoding (recall, separator, response) with beam-sample search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::text::{BOS, EOS, PAD, SEP};

use super::{LayerMemory, Model, ModelInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub top_k: usize,
    pub max_recall_len: usize,
    pub max_response_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, top_k: 64, max_recall_len: 48, max_response_len: 32 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_recall_len: usize, max_response_len: usize) -> Self {
        DecodeConfig { beam: 1, top_k: 1, max_recall_len, max_response_len }
    }

    pub fn validate(&self, model: &super::ModelConfig) -> Result<()> {
        if self.beam == 0 || self.top_k == 0 {
            return Err(Error::Config("decode beam and top_k must be at least 1".into()));
        }
        if self.max_recall_len > model.max_recall_len || self.max_response_len > model.max_response_len {
            return Err(Error::Config("decode lengths exceed the model's decoder positions".into()));
        }
        Ok(())
    }

    fn sampling(&self) -> bool {
        self.top_k > 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Recall,
    Response,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub recall: Vec<usize>,
    pub response: Vec<usize>,
    /// Every emitted token after BOS, separator and EOS included.
    pub sequence: Vec<usize>,
    pub score: f64,
}

/// Encoder products detached from any graph, reused at every step.
#[derive(Clone, Debug)]
pub struct Frozen<T: Real> {
    pub kv: Vec<[Option<(Tensor<T>, Tensor<T>)>; 3]>,
    pub sep: Tensor<T>,
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Hyp {
    ids: Vec<usize>,
    sep_pos: Option<usize>,
    phase: Phase,
    recall: Vec<usize>,
    response: Vec<usize>,
    score: f64,
    done: bool,
}

impl Hyp {
    fn push(&mut self, tok: usize, lp: f64, dc: &DecodeConfig) {
        self.ids.push(tok);
        self.score += lp;
        match self.phase {
            Phase::Recall if tok == SEP => {
                self.sep_pos = Some(self.ids.len() - 1);
                self.phase = Phase::Response;
                self.done = dc.max_response_len == 0;
            }
            Phase::Recall => self.recall.push(tok),
            Phase::Response if tok == EOS => self.done = true,
            Phase::Response => {
                self.response.push(tok);
                self.done = self.response.len() >= dc.max_response_len;
            }
        }
    }

    /// The separator once the recall budget is spent.
    fn forced(&self, dc: &DecodeConfig) -> Option<usize> {
        (self.phase == Phase::Recall && self.recall.len() >= dc.max_recall_len).then_some(SEP)
    }

    fn banned(&self, tok: usize) -> bool {
        match self.phase {
            Phase::Recall => matches!(tok, PAD | BOS | EOS),
            Phase::Response => matches!(tok, PAD | BOS | SEP),
        }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

impl Model {
    pub fn freeze<T: Real>(&self, ps: &ParamStore<T>, inp: &ModelInput) -> Frozen<T> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, ps, inp);
        let mem = self.memory(&mut g, ps, &enc);
        let kv = mem
            .iter()
            .map(|layer| layer.map(|kv| kv.map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))))
            .collect();
        let alpha = enc.alpha.map(|a| g.value(a).to_f64_vec());
        Frozen { kv, sep: g.value(enc.sep).clone(), alpha }
    }

    /// Log-probabilities of the token following `ids`.
    pub fn next_logprobs<T: Real>(
        &self,
        ps: &ParamStore<T>,
        frozen: &Frozen<T>,
        ids: &[usize],
        sep_pos: Option<usize>,
    ) -> Vec<f64> {
        let mut g = Graph::inference();
        let mem: Vec<LayerMemory> = frozen
            .kv
            .iter()
            .map(|layer| layer.clone().map(|kv| kv.map(|(k, v)| (g.constant(k), g.constant(v)))))
            .collect();
        let sep = g.constant(frozen.sep.clone());
        let (hidden, _) = self.decode_hidden(&mut g, ps, &mem, ids, sep_pos, sep);
        let last = g.slice_rows(hidden, ids.len() - 1..ids.len());
        let logits = self.out.forward(&mut g, ps, last);
        log_softmax(&g.value(logits).to_f64_vec())
    }

    /// Recall tokens up to the separator, then response tokens up to EOS or
    /// the length limit. With `top_k > 1` each expansion is sampled; with
    /// `beam = top_k = 1` this is greedy decoding.
    pub fn generate<T: Real>(
        &self,
        ps: &ParamStore<T>,
        inp: &ModelInput,
        dc: &DecodeConfig,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        inp.validate(&self.cfg)?;
        dc.validate(&self.cfg)?;
        let frozen = self.freeze(ps, inp);
        let phase = if self.cfg.use_reg { Phase::Recall } else { Phase::Response };
        let start = Hyp {
            ids: vec![BOS],
            sep_pos: None,
            phase,
            recall: Vec::new(),
            response: Vec::new(),
            score: 0.0,
            done: phase == Phase::Response && dc.max_response_len == 0,
        };
        let mut beams = vec![start];
        while beams.iter().any(|h| !h.done) {
            // (beam, token, step log-prob, joint score)
            let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
            for (b, h) in beams.iter().enumerate().filter(|(_, h)| !h.done) {
                if let Some(tok) = h.forced(dc) {
                    cands.push((b, tok, 0.0, h.score));
                    continue;
                }
                let lp = self.next_logprobs(ps, &frozen, &h.ids, h.sep_pos);
                let mut toks: Vec<usize> = (0..lp.len()).filter(|&t| !h.banned(t)).collect();
                toks.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                toks.truncate(dc.top_k);
                cands.extend(toks.into_iter().map(|t| (b, t, lp[t], h.score + lp[t])));
            }
            if dc.sampling() {
                let mut keyed: Vec<(f64, (usize, usize, f64, f64))> =
                    cands.into_iter().map(|c| (c.3 + gumbel(rng), c)).collect();
                keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
                keyed.truncate(2 * dc.beam);
                cands = keyed.into_iter().map(|(_, c)| c).collect();
            }
            let mut next: Vec<Hyp> = beams.iter().filter(|h| h.done).cloned().collect();
            for (b, tok, lp, _) in cands {
                let mut h = beams[b].clone();
                h.push(tok, lp, dc);
                next.push(h);
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(dc.beam);
            beams = next;
        }
        let best = beams.into_iter().next().expect("at least one hypothesis");
        Ok(Generation { recall: best.recall, response: best.response, sequence: best.ids[1..].to_vec(), score: best.score })
    }
}
