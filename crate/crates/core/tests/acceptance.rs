//! Acceptance suite. Prints one line per criterion and exits non-zero when any
//! fails. Pass criterion numbers (`cargo test --test acceptance -- 3 6`) to run
//! a subset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medrecall::artifact::read_jsonl;
use medrecall::autograd::{Graph, ParamStore};
use medrecall::cli::{self, PredictionRow};
use medrecall::config::{Ablation, PathsConfig, RunConfig, Split};
use medrecall::corpus::{expand_samples, generate_synthetic, Category, Speaker, Utterance};
use medrecall::dialograph::{build_graph, Edge, EdgeKind, MentionSource};
use medrecall::embedder::{Embedder, HashEmbedder};
use medrecall::medkg::{synthetic_kg, Entity, KnowledgeGraph};
use medrecall::metrics::{self, MetricReport};
use medrecall::model::base::BaseModel;
use medrecall::model::generate::DecodeConfig;
use medrecall::model::{random_input, Model, ModelConfig, ModelInput};
use medrecall::pipeline::Corpus;
use medrecall::recall::{build_recall_target, speaker_token, RecallConfig};
use medrecall::retriever::{softmax_nll, train_retriever, RetrievalExample, RetrievalPool, Retriever, RetrieverConfig};
use medrecall::rng::rng_for;
use medrecall::text::{tokenize, BOS, EOS, SEP, SPECIAL_TOKENS};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "gate normalization", gate_normalization),
        (3, "graph construction oracle", graph_oracle),
        (4, "recall supervision oracle", recall_oracle),
        (5, "retrieval", retrieval),
        (6, "overfit memorization", overfit_memorization),
        (7, "metric oracles", metric_oracles),
        (8, "ablation harness", ablation_harness),
        (9, "phase contract", phase_contract),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {status}: {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

/// A run rooted in a fresh temporary directory with its corpus synthesized.
fn synth_run(seed: u64, dialogues: usize, edit: impl FnOnce(&mut RunConfig)) -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let mut cfg = RunConfig { seed: Some(seed), ..RunConfig::default() };
    cfg.paths = PathsConfig::under(root, root.join("data/corpus.jsonl"), root.join("data/kg.jsonl"));
    cfg.data.synth_dialogues = dialogues;
    edit(&mut cfg);
    cfg.validate().expect("valid run config");
    cli::synth(&cfg).expect("synth");
    (dir, cfg)
}

// ---- 1 --------------------------------------------------------------------

const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_ENTRIES: usize = 16;

fn param_group(name: &str) -> &'static str {
    if name.starts_with("retriever.") {
        "retriever encoders"
    } else if name.starts_with("ctx_enc") {
        "context encoder"
    } else if name.starts_with("know_enc") || name == "know_null" {
        "knowledge encoder"
    } else if name.starts_with("rgat") || name.starts_with("vertex_init") || name == "speaker" {
        "graph encoder"
    } else if name.starts_with("recall.") {
        "recall-score bilinear"
    } else if name.contains(".gate.") {
        "fusion gates"
    } else if name.starts_with("dec.") {
        "decoder"
    } else if name.starts_with("out.") {
        "output head"
    } else {
        "token embeddings"
    }
}

#[derive(Default)]
struct GroupStats {
    tensors: usize,
    live: usize,
    worst: f64,
    worst_name: String,
}

/// Per-tensor relative error `|a - n| / max(|a|, |n|)` over sampled entries,
/// with `n` from central differences. Tensors whose gradient norms both sit
/// below ten times the difference quotient's rounding noise count as zero.
fn compare_gradients(
    ps: &mut ParamStore<f64>,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
    analytic: BTreeMap<usize, Vec<f64>>,
    rng: &mut ChaCha8Rng,
    groups: &mut BTreeMap<&'static str, GroupStats>,
) {
    let noise = f64::EPSILON * loss(ps).abs().max(1.0) / GRAD_STEP * (GRAD_ENTRIES as f64).sqrt();
    let floor = 10.0 * noise;
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id).to_string();
        let n = ps.get(id).len();
        let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
        for k in index::sample(rng, n, n.min(GRAD_ENTRIES)) {
            let a = analytic.get(&id.index()).map_or(0.0, |g| g[k]);
            let orig = ps.get(id).data[k];
            ps.get_mut(id).data[k] = orig + GRAD_STEP;
            let up = loss(ps);
            ps.get_mut(id).data[k] = orig - GRAD_STEP;
            let down = loss(ps);
            ps.get_mut(id).data[k] = orig;
            let num = (up - down) / (2.0 * GRAD_STEP);
            diff += (a - num) * (a - num);
            an += a * a;
            nu += num * num;
        }
        let scale = an.sqrt().max(nu.sqrt());
        let rel = if scale < floor { 0.0 } else { diff.sqrt() / scale };
        let st = groups.entry(param_group(&name)).or_default();
        st.tensors += 1;
        st.live += usize::from(scale >= floor);
        if rel >= st.worst {
            st.worst = rel;
            st.worst_name = name;
        }
    }
}

fn gradient_integrity() -> Outcome {
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        d_vertex: 16,
        d_speaker: 4,
        n_rgat_layers: 2,
        vocab_size: 50,
        max_history_len: 64,
        max_knowledge_len: 12,
        max_recall_len: 8,
        max_response_len: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::<f64>::new();
    let model = Model::new(cfg.clone(), &mut ps, &mut rng).map_err(err)?;
    let m = 6;
    let inp = loop {
        let inp = random_input(&cfg, m, &mut rng);
        let knowledge_edge = (0..m * m).any(|k| k / m != k % m && inp.adjacency[1][k]);
        if !inp.knowledge.is_empty() && !inp.recall.is_empty() && !inp.response.is_empty() && knowledge_edge {
            break inp;
        }
    };
    let model_loss = |ps: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let l = model.loss(&mut g, ps, &inp);
        g.scalar(l.total)
    };
    let mut g = Graph::new();
    let l = model.loss(&mut g, &ps, &inp);
    let grads = g.backward(l.total).into_param_grads().into_iter().map(|(id, t)| (id.index(), t.data)).collect();
    let mut groups = BTreeMap::new();
    compare_gradients(&mut ps, &model_loss, grads, &mut rng, &mut groups);

    let rc = RetrieverConfig { d_model: 16, n_layers: 2, n_heads: 2, max_len: 24, ..RetrieverConfig::default() };
    let mut rps = ParamStore::<f64>::new();
    let retriever = Retriever::new(&mut rps, 50, &rc, &mut rng);
    let entity = |rng: &mut ChaCha8Rng| (0..rng.random_range(1..=3)).map(|_| rng.random_range(7..50)).collect::<Vec<_>>();
    let ex = RetrievalExample {
        history: (0..12).map(|_| rng.random_range(7..50)).collect(),
        positives: (0..2).map(|_| entity(&mut rng)).collect(),
        negatives: (0..8).map(|_| entity(&mut rng)).collect(),
    };
    let retriever_loss = |ps: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let l = retriever.loss(&mut g, ps, &ex).expect("has positives");
        g.scalar(l)
    };
    let mut g = Graph::new();
    let l = retriever.loss(&mut g, &rps, &ex).expect("has positives");
    let grads = g.backward(l).into_param_grads().into_iter().map(|(id, t)| (id.index(), t.data)).collect();
    compare_gradients(&mut rps, &retriever_loss, grads, &mut rng, &mut groups);

    let worst = groups.values().map(|s| s.worst).fold(0.0, f64::max);
    let summary: Vec<String> =
        groups.iter().map(|(g, s)| format!("{g} {}/{} live, max {:.1e}", s.live, s.tensors, s.worst)).collect();
    let detail = format!("max relative error {worst:.2e} (< {GRAD_TOL:e}); {}", summary.join("; "));
    for (g, s) in &groups {
        ensure!(s.worst < GRAD_TOL, "{g}: {} has relative error {:.2e}; {detail}", s.worst_name, s.worst);
        ensure!(s.live > 0, "{g}: no tensor received a gradient; {detail}");
    }
    ensure!(groups.len() == 9, "expected 9 parameter groups; {detail}");
    Ok(detail)
}

// ---- 2 --------------------------------------------------------------------

fn gate_normalization() -> Outcome {
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        d_vertex: 16,
        vocab_size: 40,
        max_history_len: 64,
        max_knowledge_len: 12,
        max_recall_len: 8,
        max_response_len: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::<f32>::new();
    let model = Model::new(cfg.clone(), &mut ps, &mut rng).map_err(err)?;
    let (mut steps, mut worst, mut lo, mut hi) = (0usize, 0.0f64, 1.0f64, 0.0f64);
    while steps < 1000 {
        let inp = random_input(&cfg, rng.random_range(1..=6), &mut rng);
        let mut g = Graph::inference();
        let (_, out, _, _) = model.forward(&mut g, &ps, &inp);
        steps += g.shape(out.logits).0;
        for w in &out.gates {
            let t = g.value(*w);
            let vals = t.to_f64_vec();
            for row in vals.chunks(t.cols) {
                ensure!(row.len() == 3, "gate matrix has {} columns", row.len());
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                lo = row.iter().copied().fold(lo, f64::min);
                hi = row.iter().copied().fold(hi, f64::max);
            }
        }
    }
    let detail = format!("{steps} decoder steps, max |sum - 1| {worst:.1e} (<= 1e-6), gates in [{lo:.4}, {hi:.4}]");
    ensure!(worst <= 1e-6 && lo > 0.0 && hi < 1.0, "{detail}");
    Ok(detail)
}

// ---- 3 --------------------------------------------------------------------

/// Greedy longest-first scan over every entity name; ties go to the smaller name.
fn scan_mentions(tokens: &[String], names: &[(Vec<String>, String)]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match names.iter().find(|(toks, _)| tokens[i..].starts_with(toks)) {
            Some((toks, name)) => {
                if !out.contains(name) {
                    out.push(name.clone());
                }
                i += toks.len();
            }
            None => i += 1,
        }
    }
    out
}

fn sorted_names(kg: &KnowledgeGraph) -> Vec<(Vec<String>, String)> {
    let mut names: Vec<(Vec<String>, String)> = kg.entity_names().map(|n| (tokenize(n), n.to_string())).collect();
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
    names
}

fn oracle_entities(u: &Utterance, names: &[(Vec<String>, String)], source: MentionSource) -> Vec<String> {
    match (&u.entities, source) {
        (Some(gold), MentionSource::GoldThenMatch) => {
            let mut out: Vec<String> = Vec::new();
            for m in gold {
                if !out.contains(&m.surface) {
                    out.push(m.surface.clone());
                }
            }
            out
        }
        _ => scan_mentions(&u.tokens(), names),
    }
}

fn graph_oracle() -> Outcome {
    let kg = synthetic_kg(3, 60, 100);
    let dialogues = generate_synthetic(3, 200, &kg).map_err(err)?;
    let names = sorted_names(&kg);
    let (mut graphs, mut knowledge_edges, mut temporal_edges) = (0, 0, 0);
    for source in [MentionSource::GoldThenMatch, MentionSource::Match] {
        for d in &dialogues {
            let h = &d.utterances;
            let graph = build_graph(h, &kg, source);
            let ents: Vec<Vec<String>> = h.iter().map(|u| oracle_entities(u, &names, source)).collect();
            let mut want: BTreeSet<Edge> = BTreeSet::new();
            for i in 0..h.len() {
                for j in i + 1..h.len() {
                    if j == i + 1 {
                        want.insert(Edge { src: i, dst: j, kind: EdgeKind::Temporal, label: None });
                    }
                    let label = kg
                        .relations()
                        .filter(|r| {
                            ents[i].iter().any(|a| ents[j].iter().any(|b| {
                                (&r.head == a && &r.tail == b) || (&r.head == b && &r.tail == a)
                            }))
                        })
                        .map(|r| r.rel.clone())
                        .min();
                    if let Some(label) = label {
                        want.insert(Edge { src: i, dst: j, kind: EdgeKind::Knowledge, label: Some(label) });
                    }
                }
            }
            let got: BTreeSet<Edge> = graph.edges.iter().cloned().collect();
            ensure!(got.len() == graph.edges.len(), "{}: duplicate edges", d.id);
            ensure!(got == want, "{} ({source:?}): edges differ from the pairwise oracle", d.id);
            let temporal: Vec<(usize, usize)> =
                graph.edges.iter().filter(|e| e.kind == EdgeKind::Temporal).map(|e| (e.src, e.dst)).collect();
            let path: Vec<(usize, usize)> = (1..h.len()).map(|j| (j - 1, j)).collect();
            ensure!(temporal == path, "{}: temporal edges are not the path", d.id);
            for (i, e) in ents.iter().enumerate() {
                let a: BTreeSet<&String> = e.iter().collect();
                let b: BTreeSet<&String> = graph.entities[i].iter().collect();
                ensure!(a == b, "{} vertex {i}: entity sets differ", d.id);
            }
            graphs += 1;
            knowledge_edges += graph.knowledge_edges().count();
            temporal_edges += temporal.len();
        }
    }
    ensure!(knowledge_edges > 0, "no knowledge edges at all; the check is vacuous");
    Ok(format!("{graphs} graphs (gold and matched mentions), {temporal_edges} temporal and {knowledge_edges} knowledge edges, all equal"))
}

// ---- 4 --------------------------------------------------------------------

/// Round of each utterance: a patient run opens a round, the doctor run right
/// after it closes it, and any other doctor run stands alone.
fn oracle_rounds(h: &[Utterance]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut round: Option<usize> = None;
    let mut open = false;
    let mut i = 0;
    while i < h.len() {
        let mut j = i;
        while j < h.len() && h[j].speaker == h[i].speaker {
            j += 1;
        }
        if h[i].speaker == Speaker::Doctor && open {
            open = false;
        } else {
            round = Some(round.map_or(0, |r| r + 1));
            open = h[i].speaker == Speaker::Patient;
        }
        out.extend(std::iter::repeat_n(round.unwrap_or(0), j - i));
        i = j;
    }
    out
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn recall_oracle() -> Outcome {
    let kg = synthetic_kg(4, 60, 100);
    let samples: Vec<_> = expand_samples(&generate_synthetic(4, 40, &kg).map_err(err)?).into_iter().take(100).collect();
    ensure!(samples.len() == 100, "only {} samples", samples.len());
    let embedder = HashEmbedder::new(32);
    let window = 6;
    let mut windowed = 0;
    for k in [2, 3] {
        let rc = RecallConfig { k, window_rounds: window, speaker_tags: true };
        for s in &samples {
            let got = build_recall_target(&s.history, &s.target, &embedder, &rc).map_err(err)?;
            let again = build_recall_target(&s.history, &s.target, &embedder, &rc).map_err(err)?;
            ensure!(got == again, "{}: two runs differ", s.id);
            let y = embedder.embed(&s.target.tokens()).map_err(err)?.0;
            let scores: Vec<f64> =
                s.history.iter().map(|u| embedder.embed(&u.tokens()).map(|e| cos(&e.0, &y))).collect::<Result<_, _>>().map_err(err)?;
            for (a, b) in scores.iter().zip(&got.scores) {
                ensure!((a - b).abs() < 1e-12, "{}: score {b} differs from {a}", s.id);
            }
            let rounds = oracle_rounds(&s.history);
            let last = *rounds.last().expect("non-empty history");
            let first = (last + 1).saturating_sub(window);
            windowed += usize::from(first > 0);
            let mut order: Vec<usize> = (0..s.history.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(b.cmp(&a)));
            let want: Vec<usize> = order.into_iter().filter(|&i| rounds[i] >= first).take(k).collect();
            ensure!(got.selected_indices == want, "{} (k={k}): selected {:?}, oracle {want:?}", s.id, got.selected_indices);
            let labels: Vec<u8> = (0..s.history.len()).map(|i| u8::from(want.contains(&i))).collect();
            ensure!(got.labels == labels, "{}: labels differ", s.id);
            let seq: Vec<String> = want
                .iter()
                .flat_map(|&i| std::iter::once(speaker_token(s.history[i].speaker).to_string()).chain(s.history[i].tokens()))
                .collect();
            ensure!(got.sequence == seq, "{}: recall sequence differs", s.id);
        }
    }
    ensure!(windowed > 0, "no history exceeded the window; the check is vacuous");
    Ok(format!("100 samples x k in {{2, 3}} equal the sort-and-filter oracle and are deterministic ({} cut by the window)", windowed / 2))
}

// ---- 5 --------------------------------------------------------------------

const TOPICS: usize = 8;
const TOPIC_BASE: usize = SPECIAL_TOKENS.len();
const ENTITY_BASE: usize = TOPIC_BASE + TOPICS;
const NOISE_BASE: usize = ENTITY_BASE + 32;
const TASK_VOCAB: usize = NOISE_BASE + 40;

/// Entities `4t..4t+4` are relevant to topic `t`; the history carries the
/// topic token among noise.
fn topic_pool(rng: &mut ChaCha8Rng) -> (usize, RetrievalPool) {
    let t = rng.random_range(0..TOPICS);
    let mut history: Vec<usize> = (0..7).map(|_| rng.random_range(NOISE_BASE..TASK_VOCAB)).collect();
    history.push(TOPIC_BASE + t);
    history.shuffle(rng);
    let (pos, other): (Vec<usize>, Vec<usize>) = (0..32).partition(|e| e / 4 == t);
    let ids = |v: Vec<usize>| v.into_iter().map(|e| vec![ENTITY_BASE + e]).collect();
    (t, RetrievalPool { history, positives: ids(pos), others: ids(other) })
}

fn retrieval() -> Outcome {
    let rc = RetrieverConfig {
        n_negatives: 8,
        k_retrieve: 1,
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_len: 16,
        lr_max: 3e-3,
        warmup_steps: 50,
        max_steps: 600,
        batch_size: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pools: Vec<RetrievalPool> = (0..256).map(|_| topic_pool(&mut rng).1).collect();
    let mut ps = ParamStore::<f32>::new();
    let model = Retriever::new(&mut ps, TASK_VOCAB, &rc, &mut rng);
    let trace = train_retriever(&model, &mut ps, &pools, &rc, &mut rng).map_err(err)?;
    ensure!(trace.len() as u64 <= 2000, "{} steps", trace.len());
    let ps64 = ps.cast::<f64>();
    let candidates: Vec<(String, Vec<usize>)> = (0..32).map(|e| (format!("e{e:02}"), vec![ENTITY_BASE + e])).collect();
    let mut held = ChaCha8Rng::seed_from_u64(55);
    let n_eval = 400;
    let mut hits = 0;
    for _ in 0..n_eval {
        let (t, pool) = topic_pool(&mut held);
        let top = model.retrieve_topk(&ps64, &pool.history, &candidates, 1);
        let e: usize = top.entities[0][1..].parse().expect("entity name");
        hits += usize::from(e / 4 == t);
    }
    let recall1 = hits as f64 / n_eval as f64;

    let mut flat = ps64.clone();
    let ids: Vec<_> = flat.ids().collect();
    for id in ids {
        flat.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let (_, pool) = topic_pool(&mut held);
    let ex = pool.example(8, &mut held);
    let mut g = Graph::inference();
    let l = model.loss(&mut g, &flat, &ex).expect("has positives");
    let uniform = g.scalar(l);
    let ln9 = 9f64.ln();
    let plain = softmax_nll(0.0, &[0.0; 8]);
    let detail = format!(
        "{} steps, held-out recall@1 {recall1:.4} (>= 0.95), uniform loss {uniform:.12} vs ln 9 {ln9:.12}",
        trace.len()
    );
    ensure!(recall1 >= 0.95, "{detail}");
    ensure!((uniform - ln9).abs() < 1e-9 && (plain - ln9).abs() < 1e-9, "{detail}");
    Ok(detail)
}

// ---- 6 --------------------------------------------------------------------

const OVERFIT_STEPS: u64 = 3000;

fn overfit_memorization() -> Outcome {
    let (_dir, cfg) = synth_run(11, 32, |c| {
        c.data.dev_fraction = 0.0;
        c.data.test_fraction = 0.0;
        c.model = ModelConfig {
            d_model: 32,
            d_ff: 64,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            d_vertex: 32,
            d_speaker: 8,
            max_history_len: 96,
            max_knowledge_len: 16,
            max_recall_len: 40,
            max_response_len: 24,
            ..ModelConfig::default()
        };
        c.retriever.max_steps = 100;
        c.retriever.d_model = 16;
        c.retriever.k_retrieve = 3;
        c.training.max_steps = OVERFIT_STEPS;
        c.training.warmup_steps = 200;
        c.training.lr_max = 3e-3;
        c.training.batch_size = 8;
        c.decode = DecodeConfig::greedy(40, 24);
    });
    cli::build_recall(&cfg).map_err(err)?;
    cli::retriever(&cfg).map_err(err)?;
    let t = Instant::now();
    let summary = cli::train_generator(&cfg).map_err(err)?;
    let train_secs = t.elapsed().as_secs_f64();
    let (model, ps, vocab) = cli::load_generator(&cfg).map_err(err)?;
    let corpus = Corpus::load(&cfg).map_err(err)?;
    let (samples, inputs) = cli::inputs_for(&cfg, &corpus, &vocab, &model.cfg, Split::Train, 0).map_err(err)?;
    let mut verbatim = 0;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (s, inp) in samples.iter().zip(&inputs) {
        let gen = model.generate(&ps, inp, &cfg.decode, &mut rng_for(1, "greedy")).map_err(err)?;
        verbatim += usize::from(gen.response == inp.response);
        cands.push(vocab.decode(&gen.response));
        refs.push(s.target.text.clone());
    }
    let frac = verbatim as f64 / inputs.len() as f64;
    let bleu1 = metrics::bleu(&cands, &refs, 1);
    let detail = format!(
        "{} samples, {} steps in {train_secs:.0}s, token accuracy {:.4} (>= 0.95), verbatim {frac:.4} (>= 0.90), BLEU-1 {bleu1:.4} (>= 0.9)",
        inputs.len(),
        summary.steps,
        summary.token_accuracy
    );
    ensure!(summary.steps <= OVERFIT_STEPS, "{detail}");
    ensure!(summary.token_accuracy >= 0.95 && frac >= 0.90 && bleu1 >= 0.9, "{detail}");
    Ok(detail)
}

// ---- 7 --------------------------------------------------------------------

const FIXTURE: [(&str, &str); 20] = [
    ("you may have gastritis and should take omeprazole", "this looks like gastritis so take omeprazole twice a day"),
    ("do you have a fever", "do you have a fever or cough"),
    ("a blood test will help", "please get a blood test and an endoscopy"),
    ("take ibuprofen for the headache", "ibuprofen can ease a severe headache"),
    ("is the pain mild", "is the stomach ache mild or severe"),
    ("it could be acid reflux", "acid reflux is likely given the acid taste"),
    ("rest and drink water", "rest well and drink plenty of water"),
    ("influenza often starts with fever", "influenza usually begins with a high fever and cough"),
    ("how long", "how long has this lasted"),
    ("avoid spicy food", "avoid spicy food and alcohol"),
    ("the endoscopy was normal", "your endoscopy looks normal"),
    ("take omeprazole before meals", "take omeprazole before breakfast"),
    ("any cough at night", "do you cough at night"),
    ("a mild fever is common", "a mild fever is common with influenza"),
    ("see a doctor", "please see a doctor soon"),
    ("ok", "ok thank you"),
    ("the headache may come from stress", "stress can cause a headache"),
    ("no", "yes"),
    ("get a blood test for gastritis", "a blood test can rule out gastritis"),
    ("the stomach ache is severe", "the stomach ache is severe"),
];

const LEXICON: [(&str, &str); 15] = [
    ("fever", "Symptom"),
    ("cough", "Symptom"),
    ("stomach ache", "Symptom"),
    ("headache", "Symptom"),
    ("mild", "Attribute"),
    ("severe", "Attribute"),
    ("stomach", "Attribute"),
    ("acid", "Attribute"),
    ("gastritis", "Disease"),
    ("influenza", "Disease"),
    ("acid reflux", "Disease"),
    ("blood test", "Test"),
    ("endoscopy", "Test"),
    ("omeprazole", "Medicine"),
    ("ibuprofen", "Medicine"),
];

// NLTK sentence_bleu, smoothing method7, uniform weights, each sentence
// capped at 1, averaged over the fixture.
const NLTK_BLEU: [(usize, f64); 3] = [(1, 0.520427584885844), (2, 0.43562872914160466), (4, 0.29298576638848717)];
const FROZEN_DISTINCT2: f64 = 0.9384615384615385;
const FROZEN_F1: f64 = 0.8333333333333333;
const FROZEN_F1_BY_CATEGORY: [(&str, f64); 5] =
    [("D", 0.888888888888889), ("S", 0.8235294117647058), ("A", 0.6666666666666666), ("T", 0.8571428571428571), ("M", 1.0)];

fn fixture_lexicon() -> KnowledgeGraph {
    let entities = LEXICON.iter().map(|(n, c)| Entity { name: n.to_string(), category: Some(c.to_string()) });
    KnowledgeGraph::from_parts(entities, Vec::new(), true).expect("valid lexicon")
}

fn oracle_distinct2(texts: &[String]) -> f64 {
    let bigrams: Vec<(String, String)> = texts
        .iter()
        .flat_map(|t| {
            let w: Vec<String> = t.split_whitespace().map(str::to_string).collect();
            (1..w.len()).map(move |i| (w[i - 1].clone(), w[i].clone())).collect::<Vec<_>>()
        })
        .collect();
    let unique: HashSet<&(String, String)> = bigrams.iter().collect();
    unique.len() as f64 / bigrams.len() as f64
}

fn oracle_f1(cands: &[String], refs: &[String], category: Option<&str>) -> Option<f64> {
    let cat: BTreeMap<&str, &str> = LEXICON.iter().copied().collect();
    let lex = fixture_lexicon();
    let names = sorted_names(&lex);
    let keep = |t: &str| -> HashSet<String> {
        let toks: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        let code = |n: &str| Category::ALL.iter().find(|c| c.as_str() == cat[n]).map(|c| c.short());
        scan_mentions(&toks, &names).into_iter().filter(|n| category.is_none() || code(n) == category).collect()
    };
    let (mut hit, mut pred, mut gold) = (0usize, 0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let (p, g) = (keep(c), keep(r));
        hit += p.intersection(&g).count();
        pred += p.len();
        gold += g.len();
    }
    if pred + gold == 0 {
        return None;
    }
    let p = if pred == 0 { 0.0 } else { hit as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { hit as f64 / gold as f64 };
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Outcome {
    let tol = 1e-9;
    let lex = fixture_lexicon();
    let cands: Vec<String> = FIXTURE.iter().map(|p| p.0.to_string()).collect();
    let refs: Vec<String> = FIXTURE.iter().map(|p| p.1.to_string()).collect();
    let report = MetricReport::compute(&cands, &refs, &lex);
    for (n, want) in NLTK_BLEU {
        let got = [report.bleu1, report.bleu2, 0.0, report.bleu4][n - 1];
        ensure!((got - want).abs() <= tol, "BLEU-{n} {got} vs reference {want}");
    }
    let d2 = oracle_distinct2(&cands);
    ensure!((report.distinct2 - d2).abs() <= tol && (d2 - FROZEN_DISTINCT2).abs() <= tol, "distinct-2 {} vs {d2}", report.distinct2);
    ensure!(close(report.f1, oracle_f1(&cands, &refs, None), tol) && close(report.f1, Some(FROZEN_F1), tol), "F1 {:?}", report.f1);
    for (code, frozen) in FROZEN_F1_BY_CATEGORY {
        let got = report.f1_by_category[code];
        let want = oracle_f1(&cands, &refs, Some(code));
        ensure!(close(got, want, tol) && close(got, Some(frozen), tol), "F1[{code}] {got:?} vs {want:?}");
    }

    let same: Vec<String> = refs.iter().filter(|r| r.split_whitespace().count() >= 4).cloned().collect();
    let ident = MetricReport::compute(&same, &same, &lex);
    for (n, b) in [(1, ident.bleu1), (2, ident.bleu2), (4, ident.bleu4)] {
        ensure!((b - 1.0).abs() <= tol, "identical corpus BLEU-{n} = {b}");
    }
    let mut supported = 0;
    for c in Category::ALL {
        let support = oracle_f1(&same, &same, Some(c.short())).is_some();
        let got = ident.f1_by_category[c.short()];
        ensure!(if support { close(got, Some(1.0), tol) } else { got.is_none() }, "identical corpus F1[{}] = {got:?}", c.short());
        supported += usize::from(support);
    }
    Ok(format!(
        "BLEU-1/2/4 {:.6}/{:.6}/{:.6}, D-2 {:.6}, F1 {:.6} match within {tol:e}; identity corpus of {} pairs gives BLEU 1 and F1 1 in {supported} categories",
        report.bleu1,
        report.bleu2,
        report.bleu4,
        report.distinct2,
        report.f1.unwrap_or(f64::NAN),
        same.len()
    ))
}

// ---- 8 --------------------------------------------------------------------

fn tiny_run(seed: u64, dialogues: usize) -> (tempfile::TempDir, RunConfig) {
    synth_run(seed, dialogues, |c| {
        c.model = ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_vertex: 16,
            d_speaker: 4,
            max_history_len: 64,
            max_knowledge_len: 16,
            max_recall_len: 16,
            max_response_len: 16,
            ..ModelConfig::default()
        };
        c.retriever.d_model = 16;
        c.retriever.max_steps = 20;
        c.training.max_steps = 20;
        c.training.warmup_steps = 5;
        c.data.max_eval_samples = 12;
        c.decode = DecodeConfig { beam: 2, top_k: 4, max_recall_len: 16, max_response_len: 16 };
    })
}

fn ablation_harness() -> Outcome {
    let (_dir, cfg) = tiny_run(8, 24);
    cli::build_recall(&cfg).map_err(err)?;
    cli::retriever(&cfg).map_err(err)?;
    let results = cli::ablate(&cfg).map_err(err)?;
    let csv = std::fs::read_to_string(cfg.paths.ablation_csv()).map_err(err)?;
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    let variants: Vec<&str> = lines.iter().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let want: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
    ensure!(results.len() == 5 && variants == want, "ablation table rows {variants:?}");

    let sub = cli::ablation_config(&cfg, Ablation::KdgeReg);
    let (model, ps, vocab) = cli::load_generator(&sub).map_err(err)?;
    let corpus = Corpus::load(&sub).map_err(err)?;
    let (_, inputs) = cli::inputs_for(&sub, &corpus, &vocab, &model.cfg, Split::Train, 10).map_err(err)?;
    let base = BaseModel::sharing(&model);
    for (i, inp) in inputs.iter().enumerate() {
        let mut ids = vec![BOS];
        ids.extend(&inp.response[..i.min(inp.response.len())]);
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &ps, inp);
        let mem = model.memory(&mut g, &ps, &enc);
        let out = model.decode(&mut g, &ps, &mem, &ids, None, enc.sep);
        let mut gb = Graph::inference();
        let lb = base.logits(&mut gb, &ps, &inp.history, &inp.knowledge, &ids);
        ensure!(g.value(out.logits) == gb.value(lb), "{}: logits differ from the base model at prefix length {}", inp.id, ids.len());
    }
    ensure!(inputs.len() == 10, "only {} prefixes", inputs.len());

    let rows = |a: Ablation| read_jsonl::<PredictionRow>(&cli::ablation_config(&cfg, a).paths.predictions()).map_err(err);
    let no_reg = rows(Ablation::Reg)?;
    ensure!(!no_reg.is_empty(), "no -REG predictions");
    for r in &no_reg {
        ensure!(r.recall.is_empty() && !cli::has_separator(&r.sequence), "{}: -REG output has recall text or a separator", r.sample_id);
    }
    let full = rows(Ablation::None)?;
    ensure!(full.iter().all(|r| cli::has_separator(&r.sequence)), "full model output lacks a separator");
    Ok(format!(
        "5 variants {want:?}; -kdge-reg equals the base model on 10 prefixes exactly; {} -REG outputs carry no recall or separator",
        no_reg.len()
    ))
}

// ---- 9 --------------------------------------------------------------------

fn phase_contract() -> Outcome {
    let base = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_heads: 2,
        d_vertex: 16,
        vocab_size: 30,
        max_history_len: 64,
        max_knowledge_len: 12,
        max_recall_len: 6,
        max_response_len: 6,
        ..ModelConfig::default()
    };
    let dc = DecodeConfig { beam: 3, top_k: 8, max_recall_len: 6, max_response_len: 6 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut with_reg, mut without, mut natural_sep, mut eos_end) = (0, 0, 0, 0);
    for i in 0..500 {
        let use_reg = i % 2 == 0;
        let cfg = ModelConfig { use_reg, use_kdge: rng.random_bool(0.7), use_knowledge: rng.random_bool(0.7), ..base.clone() };
        let mut ps = ParamStore::<f32>::new();
        let model = Model::new(cfg.clone(), &mut ps, &mut ChaCha8Rng::seed_from_u64(i / 50)).map_err(err)?;
        let inp: ModelInput = random_input(&cfg, rng.random_range(1..=6), &mut rng);
        let gen = model.generate(&ps, &inp, &dc, &mut rng).map_err(err)?;
        let seps = gen.sequence.iter().filter(|&&t| t == SEP).count();
        ensure!(seps == usize::from(use_reg), "generation {i}: {seps} separators with REG {}", if use_reg { "on" } else { "off" });
        ensure!(gen.response.len() <= dc.max_response_len, "generation {i}: response of {} tokens", gen.response.len());
        ensure!(gen.recall.len() <= dc.max_recall_len, "generation {i}: recall of {} tokens", gen.recall.len());
        let eos = gen.sequence.iter().filter(|&&t| t == EOS).count();
        ensure!(eos <= 1 && (eos == 0 || gen.sequence.last() == Some(&EOS)), "generation {i}: misplaced EOS");
        if use_reg {
            with_reg += 1;
            natural_sep += usize::from(gen.recall.len() < dc.max_recall_len);
        } else {
            without += 1;
        }
        eos_end += eos;
    }
    Ok(format!(
        "{with_reg} REG-on outputs with one separator ({natural_sep} before the recall limit), {without} REG-off outputs with none, {eos_end} ended by EOS, responses <= {}",
        dc.max_response_len
    ))
}
