//! Answers a new dialogue history with a trained generator (and retriever,
//! when the run uses knowledge).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::require;
use crate::autograd::ParamStore;
use crate::checkpoint::Checkpoint;
use crate::cli::load_generator;
use crate::config::RunConfig;
use crate::corpus::{Sample, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::medkg::KnowledgeGraph;
use crate::model::Model;
use crate::pipeline::{build_input, candidates};
use crate::recall::RecallTarget;
use crate::retriever::{history_ids, Retriever, RetrieverConfig};
use crate::rng::derive_seed;
use crate::text::{detokenize, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub recall: String,
    pub response: String,
    pub knowledge: Vec<String>,
    pub score: f64,
}

pub struct Responder {
    cfg: RunConfig,
    model: Model,
    params: ParamStore<f32>,
    vocab: Vocab,
    kg: KnowledgeGraph,
    retriever: Option<(Retriever, RetrieverConfig, ParamStore<f64>)>,
}

fn load_retriever(cfg: &RunConfig, vocab: &Vocab) -> Result<(Retriever, RetrieverConfig, ParamStore<f64>)> {
    let path = cfg.paths.retriever_checkpoint();
    require(&path, "retriever checkpoint not found; run `medrecall train-retriever` first")?;
    let ck = Checkpoint::load(&path)?;
    let rc: RetrieverConfig = ck.config("retriever")?;
    if ck.vocab != vocab.tokens() {
        return Err(Error::Checkpoint("retriever and generator vocabularies differ".into()));
    }
    let mut ps = ParamStore::<f32>::new();
    let model = Retriever::new(&mut ps, vocab.len(), &rc, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_into(&mut ps)?;
    Ok((model, rc, ps.cast()))
}

impl Responder {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (model, params, vocab) = load_generator(cfg)?;
        require(&cfg.paths.kg, "knowledge graph not found; run `medrecall synth` or set paths.kg")?;
        let kg = KnowledgeGraph::load_jsonl(&cfg.paths.kg, false)?;
        let retriever = if model.cfg.use_knowledge { Some(load_retriever(cfg, &vocab)?) } else { None };
        Ok(Responder { cfg: cfg.clone(), model, params, vocab, kg, retriever })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Decodes the next doctor turn. `nonce` selects the sampling stream.
    pub fn respond(&self, history: &[Utterance], nonce: u64) -> Result<Reply> {
        if history.is_empty() {
            return Err(Error::Argument("history must contain at least one utterance".into()));
        }
        let source = self.cfg.data.mention_source;
        let sample = Sample { id: "query".into(), history: history.to_vec(), target: Utterance::new(Speaker::Doctor, "") };
        let knowledge = self.retriever.as_ref().map(|(r, rc, ps)| {
            let hist = history_ids(history, &self.vocab, rc.max_len - 1);
            r.retrieve_topk(ps, &hist, &candidates(&sample, &self.kg, &self.vocab, source), rc.k_retrieve)
        });
        let no_recall = RecallTarget {
            selected_indices: Vec::new(),
            labels: vec![0; history.len()],
            sequence: Vec::new(),
            scores: vec![0.0; history.len()],
        };
        let inp = build_input(&sample, &no_recall, knowledge.as_ref(), &self.kg, &self.vocab, &self.model.cfg, source)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed(), &format!("respond/{nonce}")));
        let gen = self.model.generate(&self.params, &inp, &self.cfg.decode, &mut rng)?;
        let toks: Vec<&str> = gen.recall.iter().map(|&i| self.vocab.token(i)).collect();
        Ok(Reply {
            recall: detokenize(&toks),
            response: self.vocab.decode(&gen.response),
            knowledge: knowledge.map(|k| k.entities).unwrap_or_default(),
            score: gen.score,
        })
    }
}

/// Parses `patient:`/`doctor:` prefixed lines into utterances.
pub fn parse_turns<S: AsRef<str>>(lines: &[S]) -> Result<Vec<Utterance>> {
    lines
        .iter()
        .map(|l| {
            let l = l.as_ref();
            let (who, text) = l.split_once(':').ok_or_else(|| Error::Argument(format!("turn {l:?} lacks a speaker prefix")))?;
            let speaker = match who.trim() {
                "patient" => Speaker::Patient,
                "doctor" => Speaker::Doctor,
                other => return Err(Error::Argument(format!("unknown speaker {other:?}"))),
            };
            Ok(Utterance::new(speaker, text.trim()))
        })
        .collect()
}
