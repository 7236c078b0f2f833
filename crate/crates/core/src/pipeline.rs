//! Turns corpus, knowledge graph and cached side products into model inputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::require;
use crate::config::{RunConfig, Split};
use crate::corpus::{expand_samples, load_dialogues, split_dialogues, Dialogue, Sample, Utterance};
use crate::dialograph::{build_graph, utterance_entities, MentionSource, RelationType};
use crate::embedder::{Embedder, EmbedderKind, EmbedderSpec, HashEmbedder, TransformerEmbedder};
use crate::error::{Error, Result};
use crate::medkg::KnowledgeGraph;
use crate::model::{ModelConfig, ModelInput};
use crate::recall::{build_recall_target, speaker_token, RecallConfig, RecallTarget};
use crate::retriever::{candidate_set, history_ids, knowledge_sequence, RetrievalPool, RetrievedKnowledge};
use crate::rng::derive_seed;
use crate::text::Vocab;

pub struct Corpus {
    pub kg: KnowledgeGraph,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        require(&p.corpus, "dialogue corpus not found; run `medrecall synth` or set paths.corpus")?;
        require(&p.kg, "knowledge graph not found; run `medrecall synth` or set paths.kg")?;
        let dialogues = load_dialogues(&p.corpus)?;
        let kg = KnowledgeGraph::load_jsonl(&p.kg, false)?;
        Ok(Self::split(dialogues, kg, cfg))
    }

    pub fn split(dialogues: Vec<Dialogue>, kg: KnowledgeGraph, cfg: &RunConfig) -> Self {
        let seed = derive_seed(cfg.seed(), "split");
        let (train, dev, test) = split_dialogues(&dialogues, cfg.data.dev_fraction, cfg.data.test_fraction, seed);
        Corpus { kg, train, dev, test }
    }

    pub fn dialogues(&self, split: Split) -> &[Dialogue] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Vocabulary from training text and KG entity names.
    pub fn vocab(&self) -> Vocab {
        let texts = self.train.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()));
        Vocab::build(texts.chain(self.kg.entity_names()))
    }

    pub fn samples(&self, split: Split, cap: usize) -> Vec<Sample> {
        let mut s = expand_samples(self.dialogues(split));
        if cap > 0 {
            s.truncate(cap);
        }
        s
    }
}

pub fn make_embedder(spec: &EmbedderSpec, vocab: &Vocab, seed: u64) -> Result<Box<dyn Embedder>> {
    spec.validate()?;
    Ok(match spec.kind {
        EmbedderKind::HashDeterministic => Box::new(HashEmbedder::new(spec.d_emb)),
        EmbedderKind::TinyTransformerPooled => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "embedder"));
            let heads = if spec.d_emb % 2 == 0 { 2 } else { 1 };
            Box::new(TransformerEmbedder::new(spec.clone(), vocab.clone(), heads, 1, 256, &mut rng)?)
        }
    })
}

/// One line of the recall cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub sample_id: String,
    #[serde(flatten)]
    pub target: RecallTarget,
}

pub fn recall_rows(samples: &[Sample], embedder: &dyn Embedder, cfg: &RecallConfig) -> Result<Vec<RecallRow>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(RecallRow { sample_id: s.id.clone(), target: build_recall_target(&s.history, &s.target, embedder, cfg)? })
        })
        .collect()
}

/// Most recent utterances whose tagged tokens fit in `max_tokens`, as an offset
/// into `history`. Always keeps at least the last utterance.
pub fn history_window(history: &[Utterance], max_tokens: usize) -> usize {
    let mut used = 0;
    for (i, u) in history.iter().enumerate().rev() {
        used += 1 + u.tokens().len();
        if used > max_tokens {
            return (i + 1).min(history.len() - 1);
        }
    }
    0
}

fn clip(mut ids: Vec<usize>, max: usize) -> Vec<usize> {
    ids.truncate(max);
    ids
}

/// Encodes one sample. The history keeps whole recent utterances; an
/// utterance longer than the budget on its own is cut at the end.
pub fn build_input(
    sample: &Sample,
    recall: &RecallTarget,
    knowledge: Option<&RetrievedKnowledge>,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    cfg: &ModelConfig,
    source: MentionSource,
) -> Result<ModelInput> {
    if recall.labels.len() != sample.history.len() {
        return Err(Error::Validation(format!("recall cache row for {} does not match its history", sample.id)));
    }
    let off = history_window(&sample.history, cfg.max_history_len);
    let kept = &sample.history[off..];
    let mut history = Vec::new();
    let mut spans = Vec::new();
    for u in kept {
        let start = history.len();
        history.push(vocab.id(speaker_token(u.speaker)));
        history.extend(u.tokens().iter().map(|t| vocab.id(t)));
        history.truncate(cfg.max_history_len);
        spans.push(start..history.len());
    }
    let graph = build_graph(kept, kg, source);
    let adjacency = [RelationType::Temporal, RelationType::Knowledge, RelationType::SelfLoop].map(|r| graph.adjacency(r));
    let knowledge = match (cfg.use_knowledge, knowledge) {
        (true, Some(k)) => knowledge_sequence(&k.entities).iter().map(|t| vocab.id(t)).collect(),
        _ => Vec::new(),
    };
    Ok(ModelInput {
        id: sample.id.clone(),
        history,
        spans,
        speakers: kept.iter().map(|u| u.speaker.index()).collect(),
        adjacency,
        knowledge: clip(knowledge, cfg.max_knowledge_len),
        recall: clip(recall.sequence.iter().map(|t| vocab.id(t)).collect(), cfg.max_recall_len),
        recall_labels: recall.labels[off..].iter().map(|&l| l as f64).collect(),
        response: clip(sample.target.tokens().iter().map(|t| vocab.id(t)).collect(), cfg.max_response_len),
    })
}

/// Inputs for every sample, looking up recall and retrieval rows by id.
pub fn build_inputs(
    samples: &[Sample],
    recall: &BTreeMap<String, RecallTarget>,
    retrieval: &BTreeMap<String, RetrievedKnowledge>,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    cfg: &ModelConfig,
    source: MentionSource,
) -> Result<Vec<ModelInput>> {
    samples
        .iter()
        .map(|s| {
            let r = recall
                .get(&s.id)
                .ok_or_else(|| Error::Validation(format!("no recall cache row for sample {}", s.id)))?;
            build_input(s, r, retrieval.get(&s.id), kg, vocab, cfg, source)
        })
        .collect()
}

/// Candidate entities for a sample with their token ids.
pub fn candidates(sample: &Sample, kg: &KnowledgeGraph, vocab: &Vocab, source: MentionSource) -> Vec<(String, Vec<usize>)> {
    candidate_set(&sample.history, kg, source).into_iter().map(|e| {
        let ids = vocab.encode(&e);
        (e, ids)
    }).collect()
}

/// Retrieval training pool: positives are candidates mentioned in the target.
pub fn retrieval_pool(
    sample: &Sample,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    source: MentionSource,
    max_history: usize,
) -> RetrievalPool {
    let gold: BTreeSet<String> = utterance_entities(&sample.target, kg, source).into_iter().collect();
    let (pos, other): (Vec<_>, Vec<_>) = candidates(sample, kg, vocab, source).into_iter().partition(|(e, _)| gold.contains(e));
    RetrievalPool {
        history: history_ids(&sample.history, vocab, max_history),
        positives: pos.into_iter().map(|(_, ids)| ids).collect(),
        others: other.into_iter().map(|(_, ids)| ids).collect(),
    }
}
