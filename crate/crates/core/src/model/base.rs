//! Plain encoder-decoder: context encoder, optional knowledge encoder, and a
//! decoder that cross-attends to the context (and knowledge, mixed by two
//! normalized sigmoid gates). Built from a [`Model`]'s parameters.

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::nn::{Encoder, FeedForward, LayerNorm, Linear, MultiHeadAttention};

use super::{Model, CTX, KNOW};

#[derive(Clone, Debug)]
pub struct BaseLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ctx_gate: Linear,
    pub know_gate: Linear,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BaseKnowledge {
    pub encoder: Encoder,
    pub null: ParamId,
}

#[derive(Clone, Debug)]
pub struct BaseModel {
    pub tok: ParamId,
    pub encoder: Encoder,
    pub knowledge: Option<BaseKnowledge>,
    pub dec_pos: ParamId,
    pub layers: Vec<BaseLayer>,
    pub out: Linear,
}

impl BaseModel {
    /// Shares the full model's weights; the knowledge encoder is included when
    /// the model uses knowledge. Graph and recall parts are unused.
    pub fn sharing(m: &Model) -> Self {
        BaseModel {
            tok: m.tok,
            encoder: m.ctx_encoder.clone(),
            knowledge: m
                .cfg
                .use_knowledge
                .then(|| BaseKnowledge { encoder: m.know_encoder.clone(), null: m.know_null }),
            dec_pos: m.dec_pos,
            layers: m
                .dec_layers
                .iter()
                .map(|l| BaseLayer {
                    self_attn: l.self_attn.clone(),
                    ln1: l.ln1.clone(),
                    cross: l.cross.clone(),
                    ctx_gate: l.gates[CTX].clone(),
                    know_gate: l.gates[KNOW].clone(),
                    ffn: l.ffn.clone(),
                    ln2: l.ln2.clone(),
                })
                .collect(),
            out: m.out.clone(),
        }
    }

    /// `T×V` logits for decoder input `ids` given the history and knowledge.
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        history: &[usize],
        knowledge: &[usize],
        ids: &[usize],
    ) -> Var {
        let tok = g.param(ps, self.tok);
        let x = g.gather(tok, history);
        let ctx = self.encoder.forward(g, ps, x);
        let know = self.knowledge.as_ref().map(|k| {
            if knowledge.is_empty() {
                g.param(ps, k.null)
            } else {
                let xk = g.gather(tok, knowledge);
                k.encoder.forward(g, ps, xk)
            }
        });
        let y = g.gather(tok, ids);
        let pos = g.param(ps, self.dec_pos);
        let p = g.slice_rows(pos, 0..ids.len());
        let mut h = g.add(y, p);
        for l in &self.layers {
            let a = l.self_attn.forward(g, ps, h, h, true);
            let r = g.add(a, h);
            let hs = l.ln1.forward(g, ps, r);
            let c = l.cross.forward(g, ps, hs, ctx, false);
            let mixed = match know {
                None => c,
                Some(k) => {
                    let ck = l.cross.forward(g, ps, hs, k, false);
                    let (lc, lk) = (l.ctx_gate.forward(g, ps, c), l.know_gate.forward(g, ps, ck));
                    let (sc, sk) = (g.sigmoid(lc), g.sigmoid(lk));
                    let both = g.concat_cols(&[sc, sk]);
                    let w = g.softmax(both, None);
                    let (wc, wk) = (g.select_cols(w, &[0]), g.select_cols(w, &[1]));
                    let tc = g.mul_col(c, wc);
                    let tk = g.mul_col(ck, wk);
                    g.add(tc, tk)
                }
            };
            let hf = g.add(mixed, hs);
            let f = l.ffn.forward(g, ps, hf);
            let r2 = g.add(f, hf);
            h = l.ln2.forward(g, ps, r2);
        }
        self.out.forward(g, ps, h)
    }
}
