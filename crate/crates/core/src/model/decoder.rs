//! Post-norm decoder block with gated fusion of three encoder streams.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// Stream order used for gates and memories.
pub const STREAMS: [&str; 3] = ["ctx", "stc", "know"];
pub const CTX: usize = 0;
pub const STC: usize = 1;
pub const KNOW: usize = 2;

/// Projected keys and values of each stream for one layer; `None` marks a
/// disabled stream.
pub type LayerMemory = [Option<(Var, Var)>; 3];

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross: MultiHeadAttention,
    pub gates: Vec<Linear>,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, heads, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            cross: MultiHeadAttention::new(ps, &format!("{name}.cross"), d, heads, rng),
            gates: STREAMS.iter().map(|s| Linear::new(ps, &format!("{name}.gate.{s}"), d, 1, true, rng)).collect(),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, d_ff, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
        }
    }

    pub fn memory<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, streams: [Option<Var>; 3]) -> LayerMemory {
        streams.map(|s| s.map(|h| self.cross.project_memory(g, ps, h)))
    }

    /// Returns the layer output and the `T×3` normalized gate matrix.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, h: Var, mem: &LayerMemory) -> (Var, Var) {
        assert!(mem[CTX].is_some(), "context stream is always active");
        let t = g.shape(h).0;
        let a = self.self_attn.forward(g, ps, h, h, true);
        let r = g.add(a, h);
        let hs = self.ln1.forward(g, ps, r);

        let mut condensed: [Option<Var>; 3] = [None; 3];
        let mut gate_cols = Vec::with_capacity(3);
        for (j, kv) in mem.iter().enumerate() {
            match kv {
                Some(kv) => {
                    let ca = self.cross.attend(g, ps, hs, *kv, false);
                    let logit = self.gates[j].forward(g, ps, ca);
                    gate_cols.push(g.sigmoid(logit));
                    condensed[j] = Some(ca);
                }
                None => gate_cols.push(g.constant(Tensor::zeros(t, 1))),
            }
        }
        let raw = g.concat_cols(&gate_cols);
        let mask: Vec<bool> = (0..t).flat_map(|_| mem.iter().map(Option::is_some)).collect();
        let weights = g.softmax(raw, Some(&mask));

        let mut fused: Option<Var> = None;
        for (j, ca) in condensed.iter().enumerate() {
            if let Some(ca) = *ca {
                let w = g.select_cols(weights, &[j]);
                let term = g.mul_col(ca, w);
                fused = Some(match fused {
                    Some(f) => g.add(f, term),
                    None => term,
                });
            }
        }
        let hf = g.add(fused.expect("context stream present"), hs);
        let f = self.ffn.forward(g, ps, hf);
        let r2 = g.add(f, hf);
        (self.ln2.forward(g, ps, r2), weights)
    }
}
