//! Command-line surface: each subcommand reads its inputs from the configured
//! paths, writes its artifacts atomically and reports a one-line summary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{atomic_write, read_jsonl, require, write_csv, write_jsonl, Provenance};
use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, Overrides, RunConfig, Split};
use crate::corpus::{expand_samples, generate_synthetic, write_dialogues, Sample};
use crate::dialograph::build_graph;
use crate::error::{Error, Result};
use crate::medkg::synthetic_kg;
use crate::metrics::{entity_lexicon, MetricReport};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::pipeline::{build_inputs, candidates, make_embedder, recall_rows, retrieval_pool, Corpus, RecallRow};
use crate::recall::RecallTarget;
use crate::retriever::{cache_map, history_ids, train_retriever, CacheRow, RetrievedKnowledge, Retriever};
use crate::rng::{derive_seed, rng_for};
use crate::text::{detokenize, Vocab, SPECIAL_TOKENS};
use crate::training::{token_accuracy, train, TraceRow, TrainState};
use crate::autograd::ParamStore;

#[derive(Parser, Debug)]
#[command(name = "medrecall", version = env!("CARGO_PKG_VERSION"), about = "Recall-enhanced medical dialogue generation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub ablation: Option<Ablation>,
    /// Root for cache, checkpoint and output directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write a synthetic knowledge graph and dialogue corpus to the configured paths.
    Synth,
    /// Dump the dialogue graph of every sample.
    BuildGraph,
    /// Compute recall supervision for every sample.
    BuildRecall,
    /// Train the entity retriever and cache top-k entities for every sample.
    TrainRetriever,
    /// Train the generator.
    Train,
    /// Decode the evaluation split.
    Generate,
    /// Score predictions against references.
    Evaluate,
    /// Train, generate and evaluate every ablation and tabulate the results.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::BuildGraph => "build-graph",
            Command::BuildRecall => "build-recall",
            Command::TrainRetriever => "train-retriever",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ov = Overrides { seed: cli.seed, ablation: cli.ablation, out: cli.out.clone() };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| Error::Argument("no command given; see --help".into()))?;
    let summary = execute(command, &cfg)?;
    println!("{summary}");
    Ok(())
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Synth => synth(cfg),
        Command::BuildGraph => build_graphs(cfg),
        Command::BuildRecall => build_recall(cfg),
        Command::TrainRetriever => retriever(cfg),
        Command::Train => train_generator(cfg).map(|s| s.to_string()),
        Command::Generate => generate(cfg).map(|n| format!("generate: {n} predictions -> {}", cfg.paths.predictions().display())),
        Command::Evaluate => evaluate(cfg).map(|r| format!("evaluate: {}", serde_json::to_string(&r).expect("report serializes"))),
        Command::Ablate => ablate(cfg).map(|rows| format!("ablate: {} rows -> {}", rows.len(), cfg.paths.ablation_csv().display())),
    }
}

fn provenance(command: &str, cfg: &RunConfig) -> Provenance {
    Provenance::new(command, cfg.to_value())
}

fn provenance_line(p: &Provenance) -> Vec<u8> {
    let mut line = serde_json::to_vec(&json!({ "_provenance": p })).expect("provenance serializes");
    line.push(b'\n');
    line
}

pub fn synth(cfg: &RunConfig) -> Result<String> {
    let d = &cfg.data;
    let kg = synthetic_kg(derive_seed(cfg.seed(), "synth.kg"), d.synth_entities, d.synth_triples);
    let dialogues = generate_synthetic(derive_seed(cfg.seed(), "synth.corpus"), d.synth_dialogues, &kg)?;
    let p = provenance("synth", cfg);
    let mut kg_bytes = provenance_line(&p);
    kg.write_jsonl(&mut kg_bytes).expect("write to vec");
    atomic_write(&cfg.paths.kg, &kg_bytes)?;
    let mut corpus_bytes = provenance_line(&p);
    write_dialogues(&mut corpus_bytes, &dialogues).expect("write to vec");
    atomic_write(&cfg.paths.corpus, &corpus_bytes)?;
    Ok(format!(
        "synth: {} entities, {} triples, {} dialogues -> {}",
        kg.num_entities(),
        kg.num_relations(),
        dialogues.len(),
        cfg.paths.corpus.display()
    ))
}

fn all_samples(corpus: &Corpus) -> Vec<Sample> {
    [Split::Train, Split::Dev, Split::Test].iter().flat_map(|&s| expand_samples(corpus.dialogues(s))).collect()
}

pub fn build_graphs(cfg: &RunConfig) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let rows: Vec<serde_json::Value> = all_samples(&corpus)
        .iter()
        .map(|s| build_graph(&s.history, &corpus.kg, cfg.data.mention_source).to_json(&s.id))
        .collect();
    write_jsonl(&cfg.paths.graphs(), &provenance("build-graph", cfg), &rows)?;
    Ok(format!("build-graph: {} graphs -> {}", rows.len(), cfg.paths.graphs().display()))
}

pub fn build_recall(cfg: &RunConfig) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let embedder = make_embedder(&cfg.embedder, &corpus.vocab(), cfg.seed())?;
    let rows = recall_rows(&all_samples(&corpus), embedder.as_ref(), &cfg.recall)?;
    write_jsonl(&cfg.paths.recall(), &provenance("build-recall", cfg), &rows)?;
    Ok(format!("build-recall: {} targets -> {}", rows.len(), cfg.paths.recall().display()))
}

pub fn retriever(cfg: &RunConfig) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let vocab = corpus.vocab();
    let rc = &cfg.retriever;
    let source = cfg.data.mention_source;
    let max_hist = rc.max_len - 1;
    let pools: Vec<_> = corpus
        .samples(Split::Train, cfg.data.max_train_samples)
        .iter()
        .map(|s| retrieval_pool(s, &corpus.kg, &vocab, source, max_hist))
        .collect();
    let mut ps = ParamStore::<f32>::new();
    let model = Retriever::new(&mut ps, vocab.len(), rc, &mut rng_for(cfg.seed(), "retriever.init"));
    let trace = train_retriever(&model, &mut ps, &pools, rc, &mut rng_for(cfg.seed(), "retriever.train"))?;
    let prov = provenance("train-retriever", cfg);
    Checkpoint::new("retriever", rc, prov.config.clone(), vocab.tokens().to_vec(), ps.clone())
        .save(&cfg.paths.retriever_checkpoint())?;
    let rows: Vec<Vec<String>> =
        trace.iter().map(|t| vec![t.step.to_string(), format!("{:.9}", t.loss), format!("{:.9e}", t.lr)]).collect();
    write_csv(&cfg.paths.retriever_trace(), &prov, &["step", "loss", "lr"], &rows)?;
    let ps64 = ps.cast::<f64>();
    let cache: Vec<CacheRow> = all_samples(&corpus)
        .par_iter()
        .map(|s| {
            let hist = history_ids(&s.history, &vocab, max_hist);
            let got = model.retrieve_topk(&ps64, &hist, &candidates(s, &corpus.kg, &vocab, source), rc.k_retrieve);
            CacheRow { sample_id: s.id.clone(), entities: got.entities, scores: got.scores }
        })
        .collect();
    write_jsonl(&cfg.paths.retrieval(), &prov, &cache)?;
    let last = trace.last().map_or(f64::NAN, |t| t.loss);
    Ok(format!("train-retriever: {} steps, final loss {last:.4}, {} cache rows", trace.len(), cache.len()))
}

/// Model configuration for the run's vocabulary, ablation applied.
pub fn generator_config(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut m = cfg.effective_model();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    } else if m.vocab_size != vocab.len() {
        return Err(Error::Config(format!("model.vocab_size {} differs from the vocabulary size {}", m.vocab_size, vocab.len())));
    }
    m.validate()?;
    Ok(m)
}

fn load_recall(cfg: &RunConfig) -> Result<BTreeMap<String, RecallTarget>> {
    let path = cfg.paths.recall();
    require(&path, "recall cache not found; run `medrecall build-recall` first")?;
    let rows: Vec<RecallRow> = read_jsonl(&path)?;
    Ok(rows.into_iter().map(|r| (r.sample_id, r.target)).collect())
}

fn load_retrieval(cfg: &RunConfig, model: &ModelConfig) -> Result<BTreeMap<String, RetrievedKnowledge>> {
    if !model.use_knowledge {
        return Ok(BTreeMap::new());
    }
    let path = cfg.paths.retrieval();
    require(&path, "retrieval cache not found; run `medrecall train-retriever` first")?;
    Ok(cache_map(read_jsonl(&path)?))
}

/// Samples of `split` and their encoded inputs from the caches.
pub fn inputs_for(cfg: &RunConfig, corpus: &Corpus, vocab: &Vocab, model: &ModelConfig, split: Split, cap: usize) -> Result<(Vec<Sample>, Vec<ModelInput>)> {
    let recall = load_recall(cfg)?;
    let retrieval = load_retrieval(cfg, model)?;
    let samples = corpus.samples(split, cap);
    let inputs = build_inputs(&samples, &recall, &retrieval, &corpus.kg, vocab, model, cfg.data.mention_source)?;
    Ok((samples, inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub token_accuracy: f64,
    pub samples: usize,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train: {} steps on {} samples, final loss {:.4}, token accuracy {:.4}",
            self.steps, self.samples, self.final_loss, self.token_accuracy
        )
    }
}

pub fn train_generator(cfg: &RunConfig) -> Result<TrainSummary> {
    let corpus = Corpus::load(cfg)?;
    let vocab = corpus.vocab();
    let mcfg = generator_config(cfg, &vocab)?;
    let (_, inputs) = inputs_for(cfg, &corpus, &vocab, &mcfg, Split::Train, cfg.data.max_train_samples)?;
    let mut ps = ParamStore::<f32>::new();
    let model = Model::new(mcfg.clone(), &mut ps, &mut rng_for(cfg.seed(), "model.init"))?;
    let mut state = TrainState::new(&ps, rng_for(cfg.seed(), "train"));
    let prov = provenance("train", cfg);
    let every = cfg.training.checkpoint_every;
    let snapshot = |ps: &ParamStore<f32>, st: &TrainState<f32>| {
        Checkpoint::new("generator", &mcfg, prov.config.clone(), vocab.tokens().to_vec(), ps.clone()).with_state(st)
    };
    let mut on_step = |row: &TraceRow, ps: &ParamStore<f32>, st: &TrainState<f32>| -> Result<()> {
        if every > 0 && row.step % every == 0 {
            snapshot(ps, st).save(&cfg.paths.checkpoints.join(format!("model-step{}.ckpt", row.step)))?;
        }
        Ok(())
    };
    let trace = train(&model, &mut ps, &mut state, &inputs, &cfg.training, &mut on_step)?;
    snapshot(&ps, &state).save(&cfg.paths.model_checkpoint())?;
    let rows: Vec<Vec<String>> = trace.iter().map(TraceRow::csv_row).collect();
    write_csv(&cfg.paths.loss_trace(), &prov, &TraceRow::CSV_HEADER, &rows)?;
    Ok(TrainSummary {
        steps: state.step,
        final_loss: trace.last().map_or(f64::NAN, |t| t.total),
        token_accuracy: token_accuracy(&model, &ps, &inputs),
        samples: inputs.len(),
    })
}

/// Rebuilds the generator from its checkpoint under this run's flags.
pub fn load_generator(cfg: &RunConfig) -> Result<(Model, ParamStore<f32>, Vocab)> {
    let path = cfg.paths.model_checkpoint();
    require(&path, "generator checkpoint not found; run `medrecall train` first")?;
    let ck = Checkpoint::load(&path)?;
    let stored = ck.generator_config()?;
    let vocab = Vocab::from_tokens(ck.vocab.clone());
    let mut mcfg = cfg.effective_model();
    mcfg.vocab_size = vocab.len();
    if mcfg.max_recall_len != stored.max_recall_len || mcfg.max_response_len != stored.max_response_len {
        return Err(Error::Config("decoder length limits differ from the checkpoint".into()));
    }
    let mut ps = ParamStore::<f32>::new();
    let model = Model::new(mcfg, &mut ps, &mut rng_for(cfg.seed(), "model.init"))?;
    ck.load_into(&mut ps)?;
    Ok((model, ps, vocab))
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    /// Recall tokens, speaker tags included.
    pub recall: String,
    pub response: String,
    pub reference: String,
    /// Every emitted token, separator included.
    pub sequence: String,
    pub score: f64,
}

fn render(vocab: &Vocab, ids: &[usize]) -> String {
    let toks: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect();
    detokenize(&toks)
}

pub fn generate(cfg: &RunConfig) -> Result<usize> {
    let (model, ps, vocab) = load_generator(cfg)?;
    let corpus = Corpus::load(cfg)?;
    let (samples, inputs) = inputs_for(cfg, &corpus, &vocab, &model.cfg, cfg.data.eval_split, cfg.data.max_eval_samples)?;
    let rows: Vec<PredictionRow> = samples
        .par_iter()
        .zip(&inputs)
        .map(|(s, inp)| {
            let mut rng = rng_for(cfg.seed(), &format!("decode/{}", s.id));
            let gen = model.generate(&ps, inp, &cfg.decode, &mut rng)?;
            Ok(PredictionRow {
                sample_id: s.id.clone(),
                recall: render(&vocab, &gen.recall),
                response: vocab.decode(&gen.response),
                reference: s.target.text.clone(),
                sequence: render(&vocab, &gen.sequence),
                score: gen.score,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&cfg.paths.predictions(), &provenance("generate", cfg), &rows)?;
    Ok(rows.len())
}

pub fn evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let path = cfg.paths.predictions();
    require(&path, "predictions not found; run `medrecall generate` first")?;
    let rows: Vec<PredictionRow> = read_jsonl(&path)?;
    let corpus = Corpus::load(cfg)?;
    let dialogues: Vec<_> = corpus.all().cloned().collect();
    let lexicon = entity_lexicon(&corpus.kg, &dialogues);
    let cands: Vec<String> = rows.iter().map(|r| r.response.clone()).collect();
    let refs: Vec<String> = rows.iter().map(|r| r.reference.clone()).collect();
    let report = MetricReport::compute(&cands, &refs, &lexicon);
    let prov = provenance("evaluate", cfg);
    let doc = json!({ "_provenance": prov, "metrics": report });
    atomic_write(&cfg.paths.metrics_json(), serde_json::to_string_pretty(&doc).expect("serializes").as_bytes())?;
    write_csv(&cfg.paths.metrics_csv(), &prov, &MetricReport::CSV_HEADER, &[report.csv_row()])?;
    Ok(report)
}

/// Per-variant run paths: shared caches, separate checkpoints and outputs.
pub fn ablation_config(cfg: &RunConfig, a: Ablation) -> RunConfig {
    let mut sub = cfg.clone();
    sub.ablation = a;
    sub.paths.checkpoints = cfg.paths.checkpoints.join(a.slug());
    sub.paths.outputs = cfg.paths.outputs.join(a.slug());
    sub
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<(Ablation, MetricReport)>> {
    let mut results = Vec::new();
    for a in Ablation::ALL {
        let sub = ablation_config(cfg, a);
        train_generator(&sub)?;
        generate(&sub)?;
        results.push((a, evaluate(&sub)?));
    }
    let mut header = vec!["variant"];
    header.extend(MetricReport::CSV_HEADER);
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(a, r)| std::iter::once(a.name().to_string()).chain(r.csv_row()).collect())
        .collect();
    write_csv(&cfg.paths.ablation_csv(), &provenance("ablate", cfg), &header, &rows)?;
    Ok(results)
}

/// True when `sequence` contains the separator token.
pub fn has_separator(sequence: &str) -> bool {
    sequence.contains(SPECIAL_TOKENS[crate::text::SEP])
}
