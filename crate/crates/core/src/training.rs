//! Joint training: recall BCE, sequence NLLs, batched Adam updates with a
//! deterministic gradient reduction, and the per-step loss trace.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradStore, Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::optim::{lr_at, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr_max: f64,
    pub warmup_steps: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 8, max_steps: 3000, lr_max: 1e-3, warmup_steps: 3000, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training batch_size must be positive".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::Config("training lr_max must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based step; decay reaches 0 one step past the end.
    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.warmup_steps, self.max_steps + 1, self.lr_max)
    }
}

/// `Σ −r log α − (1−r) log(1−α)` with α clamped to `[eps, 1−eps]`. Also
/// returns how many entries needed the clamp.
pub fn recall_bce(alpha: &[f64], labels: &[f64], eps: f64) -> (f64, usize) {
    assert_eq!(alpha.len(), labels.len(), "one label per score");
    let mut clamped = 0;
    let loss = alpha
        .iter()
        .zip(labels)
        .map(|(&a, &r)| {
            let c = a.clamp(eps, 1.0 - eps);
            clamped += (c != a) as usize;
            -r * c.ln() - (1.0 - r) * (1.0 - c).ln()
        })
        .sum();
    (loss, clamped)
}

/// Summed `−log softmax(logits_t)[gold_t]` over rows.
pub fn sequence_nll<T: Real>(logits: &Tensor<T>, gold: &[usize]) -> f64 {
    assert_eq!(logits.rows, gold.len(), "one gold token per step");
    (0..logits.rows)
        .map(|t| {
            let row: Vec<f64> = logits.row(t).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[gold[t]]
        })
        .sum()
}

/// Batch-mean loss components at one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub response: f64,
    pub recall: f64,
    pub recall_score: f64,
    pub total: f64,
    pub lr: f64,
}

impl TraceRow {
    pub const CSV_HEADER: [&'static str; 6] = ["step", "L_Y", "L_R", "L_r", "L_total", "lr"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            format!("{:.9}", self.response),
            format!("{:.9}", self.recall),
            format!("{:.9}", self.recall_score),
            format!("{:.9}", self.total),
            format!("{:.9e}", self.lr),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub step: u64,
    pub lr: f64,
    pub optimizer: Adam<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(ps: &ParamStore<T>, rng: ChaCha8Rng) -> Self {
        TrainState { step: 0, lr: 0.0, optimizer: Adam::new(ps), rng }
    }
}

/// Batches of sample indices with similar history lengths, in random order.
pub fn length_grouped_batches(data: &[ModelInput], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| data[i].history.len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// One optimizer step on `batch`: per-sample gradients computed in parallel,
/// summed in batch order, then averaged.
pub fn train_step<T: Real>(
    model: &Model,
    ps: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    data: &[ModelInput],
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<TraceRow> {
    let params: &ParamStore<T> = ps;
    let results: Vec<_> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let l = model.loss(&mut g, params, &data[i]);
            let values = Model::loss_values(&g, &l);
            (i, values, g.backward(l.total).into_param_grads())
        })
        .collect();
    let mut grads = GradStore::new(ps.len());
    let mut sums = [0.0; 4];
    for (i, v, gr) in results {
        let parts = [v.response, v.recall, v.recall_score, v.total];
        if parts.iter().any(|x| !x.is_finite()) || gr.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numerical { sample_id: data[i].id.clone(), message: "non-finite loss or gradient".into() });
        }
        for (s, p) in sums.iter_mut().zip(parts) {
            *s += p;
        }
        grads.accumulate(gr);
    }
    let n = batch.len() as f64;
    grads.scale(T::lit(1.0 / n));
    state.step += 1;
    state.lr = cfg.lr(state.step);
    state.optimizer.step(ps, &grads, state.lr);
    Ok(TraceRow {
        step: state.step,
        response: sums[0] / n,
        recall: sums[1] / n,
        recall_score: sums[2] / n,
        total: sums[3] / n,
        lr: state.lr,
    })
}

/// One pass over `data`, stopping early at `cfg.max_steps`.
pub fn train_epoch<T: Real>(
    model: &Model,
    ps: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    data: &[ModelInput],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TraceRow, &ParamStore<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    let mut trace = Vec::new();
    for batch in length_grouped_batches(data, cfg.batch_size, &mut state.rng) {
        if state.step >= cfg.max_steps {
            break;
        }
        let row = train_step(model, ps, state, data, &batch, cfg)?;
        on_step(&row, ps, state)?;
        trace.push(row);
    }
    Ok(trace)
}

/// Epochs until `cfg.max_steps`; an empty dataset takes no steps.
pub fn train<T: Real>(
    model: &Model,
    ps: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    data: &[ModelInput],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TraceRow, &ParamStore<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    for inp in data {
        inp.validate(&model.cfg)?;
    }
    let mut trace = Vec::new();
    while !data.is_empty() && state.step < cfg.max_steps {
        trace.extend(train_epoch(model, ps, state, data, cfg, on_step)?);
    }
    Ok(trace)
}

/// Teacher-forced argmax accuracy over every decoder target.
pub fn token_accuracy<T: Real>(model: &Model, ps: &ParamStore<T>, data: &[ModelInput]) -> f64 {
    let (hit, total) = data
        .par_iter()
        .map(|inp| {
            let mut g = Graph::inference();
            let (_, out, targets, _) = model.forward(&mut g, ps, inp);
            let logits = g.value(out.logits);
            let hit = targets
                .iter()
                .enumerate()
                .filter(|&(t, &gold)| {
                    let row = logits.row(t);
                    let best = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)));
                    best == Some(gold)
                })
                .count();
            (hit, targets.len())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::model::{random_input, ModelConfig, BCE_EPS};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_vertex: 8,
            d_speaker: 2,
            n_rgat_layers: 1,
            vocab_size: 20,
            max_history_len: 40,
            max_knowledge_len: 8,
            max_recall_len: 6,
            max_response_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bce_examples() {
        let (l, c) = recall_bce(&[0.5], &[1.0], BCE_EPS);
        assert!((l - 2f64.ln()).abs() < 1e-15 && c == 0);
        let (l, c) = recall_bce(&[1.0, 0.0], &[1.0, 0.0], BCE_EPS);
        assert!(l < 1e-6 && c == 2);
    }

    #[test]
    fn nll_examples() {
        let uniform = Tensor::<f64>::zeros(3, 7);
        assert!((sequence_nll(&uniform, &[0, 1, 2]) - 3.0 * 7f64.ln()).abs() < 1e-12);
        let mut peaked = Tensor::<f64>::zeros(2, 4);
        peaked.data[1] = 1e4;
        peaked.data[4 + 3] = 1e4;
        assert_eq!(sequence_nll(&peaked, &[1, 3]), 0.0);
    }

    fn setup(seed: u64) -> (Model, ParamStore<f64>, Vec<ModelInput>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let m = Model::new(tiny(), &mut ps, &mut rng).unwrap();
        let data = (0..5).map(|i| random_input(&tiny(), 2 + i % 3, &mut rng)).collect();
        (m, ps, data)
    }

    #[test]
    fn empty_dataset_takes_no_steps() {
        let (m, mut ps, _) = setup(0);
        let before = ps.clone();
        let mut st = TrainState::new(&ps, ChaCha8Rng::seed_from_u64(1));
        let trace = train(&m, &mut ps, &mut st, &[], &TrainConfig::default(), &mut |_, _, _| Ok(())).unwrap();
        assert!(trace.is_empty() && st.step == 0);
        assert!(ps.iter().zip(before.iter()).all(|(a, b)| a.2 == b.2));
    }

    #[test]
    fn equal_seeds_give_bitwise_equal_traces() {
        let cfg = TrainConfig { batch_size: 2, max_steps: 6, lr_max: 1e-2, warmup_steps: 2, checkpoint_every: 0 };
        let run = || {
            let (m, mut ps, data) = setup(3);
            let mut st = TrainState::new(&ps, ChaCha8Rng::seed_from_u64(9));
            let t = train(&m, &mut ps, &mut st, &data, &cfg, &mut |_, _, _| Ok(())).unwrap();
            (t, ps.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let (m, mut ps, data) = setup(4);
        let data = vec![data[0].clone()];
        let cfg = TrainConfig { batch_size: 1, max_steps: 200, lr_max: 1e-2, warmup_steps: 10, checkpoint_every: 0 };
        let mut st = TrainState::new(&ps, ChaCha8Rng::seed_from_u64(0));
        let t = train(&m, &mut ps, &mut st, &data, &cfg, &mut |_, _, _| Ok(())).unwrap();
        let avg: Vec<f64> = t.chunks(10).map(|c| c.iter().map(|r| r.total).sum::<f64>() / 10.0).collect();
        assert!(avg.windows(2).all(|w| w[1] < w[0]), "{avg:?}");
    }

    #[test]
    fn total_gradient_is_weighted_component_sum() {
        let (m, ps, data) = setup(5);
        let inp = data.iter().find(|d| !d.recall.is_empty()).unwrap();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &ps, inp);
        let grads = |v| {
            let mut s = GradStore::new(ps.len());
            s.accumulate(g.backward(v).into_param_grads());
            s
        };
        let total = grads(l.total);
        let parts = [(l.response, 0.9), (l.recall.unwrap(), 0.9), (l.recall_score.unwrap(), 0.1)];
        let mut sum = GradStore::new(ps.len());
        for (v, w) in parts {
            let mut s = grads(v);
            s.scale(w);
            sum.accumulate(s.iter().map(|(id, t)| (id, t.clone())).collect());
        }
        for (id, t) in total.iter() {
            let o = sum.get(id).unwrap();
            for (a, b) in t.data.iter().zip(&o.data) {
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn non_finite_loss_names_sample() {
        let (m, mut ps, mut data) = setup(6);
        for d in &mut data {
            d.id = "bad-sample".into();
        }
        ps.get_mut(m.out.w).data[0] = f64::NAN;
        let mut st = TrainState::new(&ps, ChaCha8Rng::seed_from_u64(0));
        let cfg = TrainConfig { batch_size: 5, max_steps: 1, ..TrainConfig::default() };
        match train(&m, &mut ps, &mut st, &data, &cfg, &mut |_, _, _| Ok(())) {
            Err(Error::Numerical { sample_id, .. }) => assert_eq!(sample_id, "bad-sample"),
            other => panic!("{other:?}"),
        }
    }
}
