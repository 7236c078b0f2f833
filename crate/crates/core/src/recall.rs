//! Distant recall supervision: score history utterances against the gold
//! response and pick the top `k` inside a recency window of rounds.

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Utterance};
use crate::embedder::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::text::{DOCTOR, PATIENT, SPECIAL_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    pub k: usize,
    pub window_rounds: usize,
    /// Prefix each recalled utterance with its speaker token.
    pub speaker_tags: bool,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig { k: 3, window_rounds: 6, speaker_tags: true }
    }
}

impl RecallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.window_rounds == 0 {
            return Err(Error::Config("recall k and window_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTarget {
    /// Selected utterance indices in generation order.
    pub selected_indices: Vec<usize>,
    pub labels: Vec<u8>,
    /// Token sequence of the selected utterances, concatenated.
    pub sequence: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn speaker_token(s: Speaker) -> &'static str {
    match s {
        Speaker::Patient => SPECIAL_TOKENS[PATIENT],
        Speaker::Doctor => SPECIAL_TOKENS[DOCTOR],
    }
}

pub fn score_utterances(history: &[Utterance], target: &Utterance, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Argument("cannot score an empty history".into()));
    }
    let y = embedder.embed(&target.tokens())?;
    history.iter().map(|u| cosine(&embedder.embed(&u.tokens())?, &y)).collect()
}

/// Round index of each utterance. A round is a patient run followed by the
/// doctor run after it; a run with no partner forms a round on its own.
pub fn round_ids(history: &[Utterance]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(history.len());
    let mut round = 0usize;
    let mut round_has_doctor = true;
    for (i, u) in history.iter().enumerate() {
        let run_start = i == 0 || history[i - 1].speaker != u.speaker;
        if run_start && i > 0 && (u.speaker == Speaker::Patient || round_has_doctor) {
            round += 1;
        }
        if run_start {
            round_has_doctor = u.speaker == Speaker::Doctor;
        }
        ids.push(round);
    }
    ids
}

/// Indices inside the last `window_rounds` rounds.
pub fn eligible_indices(history: &[Utterance], window_rounds: usize) -> Vec<usize> {
    let rounds = round_ids(history);
    let n_rounds = rounds.last().map_or(0, |r| r + 1);
    let first = n_rounds.saturating_sub(window_rounds);
    (0..history.len()).filter(|&i| rounds[i] >= first).collect()
}

/// Top-`k` by score among eligible indices; ties go to the later utterance.
pub fn select_top(scores: &[f64], eligible: &[usize], k: usize) -> Vec<usize> {
    let mut order = eligible.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order.truncate(k);
    order
}

pub fn recall_sequence(history: &[Utterance], selected: &[usize], speaker_tags: bool) -> Vec<String> {
    let mut seq = Vec::new();
    for &i in selected {
        if speaker_tags {
            seq.push(speaker_token(history[i].speaker).to_string());
        }
        seq.extend(history[i].tokens());
    }
    seq
}

pub fn build_recall_target(
    history: &[Utterance],
    target: &Utterance,
    embedder: &dyn Embedder,
    config: &RecallConfig,
) -> Result<RecallTarget> {
    config.validate()?;
    let scores = score_utterances(history, target, embedder)?;
    let selected = select_top(&scores, &eligible_indices(history, config.window_rounds), config.k);
    let mut labels = vec![0u8; history.len()];
    for &i in &selected {
        labels[i] = 1;
    }
    let sequence = recall_sequence(history, &selected, config.speaker_tags);
    Ok(RecallTarget { selected_indices: selected, labels, sequence, scores })
}
