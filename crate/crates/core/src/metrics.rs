//! Sentence BLEU with smoothing method 7, DISTINCT-2 and entity F1.
//!
//! BLEU follows the NLTK definition: modified n-gram precisions, method 4
//! smoothing for zero counts followed by method 5 averaging with the
//! neighboring orders, and the usual brevity penalty. Sentence scores are
//! clamped to 1 and averaged over the corpus.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{Category, Dialogue};
use crate::medkg::{Entity, KnowledgeGraph, Relation};
use crate::text::tokenize;

const METHOD4_K: f64 = 5.0;

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and the (at least 1) number of candidate n-grams.
pub fn modified_precision<S: AsRef<str>>(reference: &[S], candidate: &[S], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
    let total: usize = cand.values().sum();
    (matched, total.max(1))
}

pub fn brevity_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Smoothed sentence BLEU with uniform weights over orders `1..=n`, before clamping.
pub fn sentence_bleu_raw<S: AsRef<str>>(reference: &[S], candidate: &[S], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    let counts: Vec<(usize, usize)> = (1..=n).map(|k| modified_precision(reference, candidate, k)).collect();
    if counts[0].0 == 0 {
        return 0.0;
    }
    let hyp_len = candidate.len();
    let mut p: Vec<f64> = counts.iter().map(|&(a, b)| a as f64 / b as f64).collect();
    // method 4
    let mut inc = 1;
    for (pi, &(num, den)) in p.iter_mut().zip(&counts) {
        if num == 0 && hyp_len > 1 {
            *pi = 1.0 / (2f64.powi(inc) * METHOD4_K / (hyp_len as f64).ln()) / den as f64;
            inc += 1;
        }
    }
    // method 5
    let (n5, d5) = modified_precision(reference, candidate, 5);
    let mut next: Vec<f64> = p[1..].to_vec();
    next.push(n5 as f64 / d5 as f64);
    let mut prev = p[0] + 1.0;
    for i in 0..p.len() {
        p[i] = (prev + p[i] + next[i]) / 3.0;
        prev = p[i];
    }
    let w = 1.0 / n as f64;
    let s: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| w * x.ln()).sum();
    brevity_penalty(reference.len(), hyp_len) * s.exp()
}

pub fn sentence_bleu<S: AsRef<str>>(reference: &[S], candidate: &[S], n: usize) -> f64 {
    sentence_bleu_raw(reference, candidate, n).min(1.0)
}

/// Order-independent sum: sorts before adding.
fn stable_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// Mean clamped sentence BLEU-n over paired texts; 0 for an empty corpus.
pub fn bleu(candidates: &[String], references: &[String], n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "paired lists");
    if candidates.is_empty() {
        return 0.0;
    }
    let scores = candidates.iter().zip(references).map(|(c, r)| sentence_bleu(&tokenize(r), &tokenize(c), n)).collect();
    stable_sum(scores) / candidates.len() as f64
}

/// Unique bigrams over total bigrams across all candidates; 0 with no bigrams.
pub fn distinct2(candidates: &[String]) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        let toks = tokenize(c);
        for w in toks.windows(2) {
            seen.insert((w[0].clone(), w[1].clone()));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Micro-averaged set-overlap counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EntityCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityCounts {
    pub fn add_pair(&mut self, predicted: &HashSet<String>, gold: &HashSet<String>) {
        self.matched += predicted.intersection(gold).count();
        self.predicted += predicted.len();
        self.gold += gold.len();
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.matched as f64 / self.gold as f64
        }
    }

    /// `None` when neither side has any entity.
    pub fn f1(&self) -> Option<f64> {
        if self.predicted == 0 && self.gold == 0 {
            return None;
        }
        let (p, r) = (self.precision(), self.recall());
        Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
    }
}

/// Entity mention with its category, when known.
pub type Mention = (String, Option<Category>);

/// Longest-match recognizer over KG entities plus every annotated surface in
/// `dialogues`, so that both sides of a comparison are read the same way.
pub fn entity_lexicon(kg: &KnowledgeGraph, dialogues: &[Dialogue]) -> KnowledgeGraph {
    let mut entities: BTreeMap<String, Option<String>> = kg.entities().map(|e| (e.name, e.category)).collect();
    for u in dialogues.iter().flat_map(|d| &d.utterances) {
        for m in u.entities.iter().flatten() {
            let cat = entities.entry(m.surface.clone()).or_default();
            if cat.is_none() {
                *cat = Some(m.category.as_str().to_string());
            }
        }
    }
    let entities = entities
        .into_iter()
        .filter(|(name, _)| !tokenize(name).is_empty())
        .map(|(name, category)| Entity { name, category });
    KnowledgeGraph::from_parts(entities, Vec::<Relation>::new(), false).expect("entity-only graph is valid")
}

pub fn extract_entities(text: &str, lexicon: &KnowledgeGraph) -> Vec<Mention> {
    let mut seen = HashSet::new();
    lexicon
        .match_text(text)
        .into_iter()
        .filter(|m| seen.insert(m.name.clone()))
        .map(|m| {
            let cat = lexicon.category(&m.name).and_then(|c| c.parse().ok());
            (m.name, cat)
        })
        .collect()
}

/// Micro counts over pairs of mention lists, optionally restricted to one category.
pub fn entity_counts(pairs: &[(Vec<Mention>, Vec<Mention>)], category: Option<Category>) -> EntityCounts {
    let keep = |ms: &[Mention]| -> HashSet<String> {
        ms.iter().filter(|(_, c)| category.is_none() || *c == category).map(|(n, _)| n.clone()).collect()
    };
    let mut counts = EntityCounts::default();
    for (p, g) in pairs {
        counts.add_pair(&keep(p), &keep(g));
    }
    counts
}

pub fn entity_f1(pairs: &[(Vec<Mention>, Vec<Mention>)], category: Option<Category>) -> Option<f64> {
    entity_counts(pairs, category).f1()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub distinct2: f64,
    pub f1: Option<f64>,
    /// Keyed by the one-letter category code (D, S, A, T, M).
    pub f1_by_category: BTreeMap<String, Option<f64>>,
    pub entity_counts: EntityCounts,
    pub n_predictions: usize,
    pub n_references: usize,
}

impl MetricReport {
    pub fn compute(candidates: &[String], references: &[String], lexicon: &KnowledgeGraph) -> Self {
        let pairs: Vec<(Vec<Mention>, Vec<Mention>)> = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| (extract_entities(c, lexicon), extract_entities(r, lexicon)))
            .collect();
        let counts = entity_counts(&pairs, None);
        MetricReport {
            bleu1: bleu(candidates, references, 1),
            bleu2: bleu(candidates, references, 2),
            bleu4: bleu(candidates, references, 4),
            distinct2: distinct2(candidates),
            f1: counts.f1(),
            f1_by_category: Category::ALL.iter().map(|&c| (c.short().to_string(), entity_f1(&pairs, Some(c)))).collect(),
            entity_counts: counts,
            n_predictions: candidates.len(),
            n_references: references.len(),
        }
    }

    pub const CSV_HEADER: [&'static str; 10] =
        ["bleu1", "bleu2", "bleu4", "distinct2", "f1", "f1_D", "f1_S", "f1_A", "f1_T", "f1_M"];

    /// Flat row matching [`Self::CSV_HEADER`]; absent scores are empty fields.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        let mut row = vec![
            format!("{:.6}", self.bleu1),
            format!("{:.6}", self.bleu2),
            format!("{:.6}", self.bleu4),
            format!("{:.6}", self.distinct2),
            opt(self.f1),
        ];
        row.extend(Category::ALL.iter().map(|c| opt(self.f1_by_category[c.short()])));
        row
    }
}
