//! Relational graph attention over utterance vertices.

use rand::Rng;

use crate::autograd::{xavier, Graph, ParamId, ParamStore, Real, Var};
use crate::dialograph::RelationType;
use crate::nn::Linear;

pub const N_RELATIONS: usize = RelationType::ALL.len();

/// Per-relation dense adjacency, each row-major `M×M`, in
/// [`RelationType::ALL`] order.
pub type Adjacency = [Vec<bool>; N_RELATIONS];

pub const ATTENTION_SLOPE: f64 = 0.2;

/// One layer: `v'_i = ELU(Σ_{r,j∈N_r(i)} a_ijr W_r v_j)` where the weights
/// `a_ijr` are a softmax over every `(r, j)` pair reachable from `i`, of
/// `LeakyReLU(s_r·W_r v_i + t_r·W_r v_j)`.
#[derive(Clone, Debug)]
pub struct RgatLayer {
    pub proj: Vec<Linear>,
    pub att_src: Vec<ParamId>,
    pub att_dst: Vec<ParamId>,
}

impl RgatLayer {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut proj = Vec::new();
        let mut att_src = Vec::new();
        let mut att_dst = Vec::new();
        for rel in RelationType::ALL {
            let r = rel.name();
            proj.push(Linear::new(ps, &format!("{name}.{r}.proj"), d, d, false, rng));
            att_src.push(ps.insert(format!("{name}.{r}.att_src"), xavier(d, 1, rng)));
            att_dst.push(ps.insert(format!("{name}.{r}.att_dst"), xavier(d, 1, rng)));
        }
        RgatLayer { proj, att_src, att_dst }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, v: Var, adjacency: &Adjacency) -> Var {
        let m = g.shape(v).0;
        let mut logits = Vec::with_capacity(N_RELATIONS);
        let mut values = Vec::with_capacity(N_RELATIONS);
        for r in 0..N_RELATIONS {
            let p = self.proj[r].forward(g, ps, v);
            let a_src = g.param(ps, self.att_src[r]);
            let a_dst = g.param(ps, self.att_dst[r]);
            let s = g.matmul(p, a_src);
            let t = g.matmul_t(a_dst, true, p, true);
            logits.push(g.add_outer(s, t));
            values.push(p);
        }
        let cat = g.concat_cols(&logits);
        let e = g.leaky_relu(cat, T::lit(ATTENTION_SLOPE));
        let mut mask = vec![false; m * N_RELATIONS * m];
        for (r, adj) in adjacency.iter().enumerate() {
            assert_eq!(adj.len(), m * m, "adjacency size");
            for i in 0..m {
                for j in 0..m {
                    mask[i * N_RELATIONS * m + r * m + j] = adj[i * m + j];
                }
            }
        }
        let a = g.softmax(e, Some(&mask));
        let stacked = g.concat_rows(&values);
        let out = g.matmul(a, stacked);
        g.elu(out)
    }
}
