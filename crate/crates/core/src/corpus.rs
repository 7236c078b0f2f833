//! Dialogue data model, JSONL ingestion, next-doctor-turn sample expansion and
//! the deterministic synthetic corpus used for desk-scale runs.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medkg::KnowledgeGraph;
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

impl Speaker {
    pub fn index(self) -> usize {
        match self {
            Speaker::Patient => 0,
            Speaker::Doctor => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::Patient => Speaker::Doctor,
            Speaker::Doctor => Speaker::Patient,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Disease,
    Symptom,
    Attribute,
    Test,
    Medicine,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Disease, Category::Symptom, Category::Attribute, Category::Test, Category::Medicine];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Disease => "Disease",
            Category::Symptom => "Symptom",
            Category::Attribute => "Attribute",
            Category::Test => "Test",
            Category::Medicine => "Medicine",
        }
    }

    /// Short column suffix used in metric tables (F1-D, F1-S, ...).
    pub fn short(self) -> &'static str {
        &self.as_str()[..1]
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown entity category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<EntityMention>>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance { speaker, text: text.into(), entities: None }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens().is_empty() {
            return Err(Error::Validation("utterance text is empty".into()));
        }
        for e in self.entities.iter().flatten() {
            if !self.text.contains(&e.surface) {
                return Err(Error::Validation(format!("entity {:?} does not occur in {:?}", e.surface, self.text)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::Validation(format!("dialogue {} has fewer than 2 utterances", self.id)));
        }
        self.utterances.iter().try_for_each(Utterance::validate)
    }
}

/// A history prefix and the doctor turn that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub history: Vec<Utterance>,
    pub target: Utterance,
}

// Lets the loader distinguish an unknown category from malformed JSON.
#[derive(Deserialize)]
struct RawMention {
    surface: String,
    category: String,
}

#[derive(Deserialize)]
struct RawUtterance {
    speaker: Speaker,
    text: String,
    #[serde(default)]
    entities: Option<Vec<RawMention>>,
}

#[derive(Deserialize)]
struct RawDialogue {
    id: String,
    utterances: Vec<RawUtterance>,
}

fn parse_dialogue(line: &str, path: &Path, lineno: usize) -> Result<Dialogue> {
    let raw: RawDialogue = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message: e.to_string(),
    })?;
    let mut utterances = Vec::with_capacity(raw.utterances.len());
    for u in raw.utterances {
        let entities = match u.entities {
            None => None,
            Some(ms) => Some(
                ms.into_iter()
                    .map(|m| Ok(EntityMention { category: m.category.parse()?, surface: m.surface }))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        utterances.push(Utterance { speaker: u.speaker, text: u.text, entities });
    }
    let d = Dialogue { id: raw.id, utterances };
    d.validate().map_err(|e| Error::Validation(format!("{}:{lineno}: {e}", path.display())))?;
    Ok(d)
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.trim_start().starts_with("{\"_provenance\"") {
            continue;
        }
        out.push(parse_dialogue(&line, path, i + 1)?);
    }
    Ok(out)
}

pub fn write_dialogues(w: &mut impl Write, dialogues: &[Dialogue]) -> std::io::Result<()> {
    for d in dialogues {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

/// One sample per doctor utterance that has at least one predecessor.
pub fn expand_samples(dialogues: &[Dialogue]) -> Vec<Sample> {
    let mut out = Vec::new();
    for d in dialogues {
        for (i, u) in d.utterances.iter().enumerate().skip(1) {
            if u.speaker == Speaker::Doctor {
                out.push(Sample {
                    id: format!("{}#{i}", d.id),
                    history: d.utterances[..i].to_vec(),
                    target: u.clone(),
                });
            }
        }
    }
    out
}

/// Deterministic shuffle-and-cut into train / dev / test.
pub fn split_dialogues(
    dialogues: &[Dialogue],
    dev_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>) {
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = dialogues.len() as f64;
    let n_test = (n * test_fraction).round() as usize;
    let n_dev = ((n * dev_fraction).round() as usize).min(dialogues.len() - n_test);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| dialogues[i].clone()).collect::<Vec<_>>()
    };
    let test = pick(&order[..n_test]);
    let dev = pick(&order[n_test..n_test + n_dev]);
    let train = pick(&order[n_test + n_dev..]);
    (train, dev, test)
}

const PATIENT_ONE: [&str; 6] = [
    "i have {} since yesterday",
    "my {} is getting worse",
    "i also feel {}",
    "is it {}",
    "yes i took {}",
    "no {} so far",
];
const PATIENT_TWO: [&str; 2] = ["i have {} and {}", "{} started after {}"];
const PATIENT_NONE: [&str; 3] = ["hello doctor", "not really", "what should i do"];
const DOCTOR_ONE: [&str; 6] = [
    "do you have {}",
    "it may be {}",
    "please take {}",
    "you should check {}",
    "how long have you had {}",
    "any {} after meals",
];
const DOCTOR_TWO: [&str; 2] = ["{} often comes with {}", "take {} for the {}"];
const DOCTOR_NONE: [&str; 2] = ["hello how can i help", "please describe it"];

fn fill(template: &str, surfaces: &[&str]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or(""));
    for (p, s) in parts.zip(surfaces) {
        out.push_str(s);
        out.push_str(p);
    }
    out
}

/// `n` dialogues of 4–24 alternating utterances that mention KG entities,
/// preferring neighbors of entities already mentioned so that knowledge
/// edges and retrieval targets carry signal. Pure in `(seed, n, kg)`.
pub fn generate_synthetic(seed: u64, n: usize, kg: &KnowledgeGraph) -> Result<Vec<Dialogue>> {
    let pool: Vec<(String, Category)> = kg
        .entities()
        .filter_map(|e| e.category.as_deref().and_then(|c| c.parse().ok()).map(|c| (e.name, c)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Argument("synthetic generation needs a knowledge graph with categorized entities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for d in 0..n {
        let len = rng.random_range(4..=24);
        let mut mentioned: Vec<String> = Vec::new();
        let mut speaker = Speaker::Patient;
        let mut utterances = Vec::with_capacity(len);
        for _ in 0..len {
            let k = match rng.random_range(0..10) {
                0 => 0,
                1 | 2 => 2,
                _ => 1,
            };
            let mut picked: Vec<(String, Category)> = Vec::new();
            while picked.len() < k {
                let from_neighbors: Vec<&str> = mentioned
                    .iter()
                    .flat_map(|m| kg.neighbors(m).map(|(nb, _)| nb))
                    .filter(|nb| pool.iter().any(|(p, _)| p == nb))
                    .collect();
                let name = if !from_neighbors.is_empty() && rng.random_bool(0.7) {
                    from_neighbors.choose(&mut rng).unwrap().to_string()
                } else {
                    pool.choose(&mut rng).unwrap().0.clone()
                };
                if picked.iter().any(|(p, _)| *p == name) {
                    if pool.len() <= k {
                        break;
                    }
                    continue;
                }
                let cat = pool.iter().find(|(p, _)| *p == name).unwrap().1;
                picked.push((name, cat));
            }
            let templates: &[&str] = match (speaker, picked.len()) {
                (Speaker::Patient, 0) => &PATIENT_NONE,
                (Speaker::Patient, 1) => &PATIENT_ONE,
                (Speaker::Patient, _) => &PATIENT_TWO,
                (Speaker::Doctor, 0) => &DOCTOR_NONE,
                (Speaker::Doctor, 1) => &DOCTOR_ONE,
                (Speaker::Doctor, _) => &DOCTOR_TWO,
            };
            let surfaces: Vec<&str> = picked.iter().map(|(s, _)| s.as_str()).collect();
            let text = fill(templates.choose(&mut rng).unwrap(), &surfaces);
            let entities =
                picked.iter().map(|(s, c)| EntityMention { surface: s.clone(), category: *c }).collect::<Vec<_>>();
            mentioned.extend(picked.into_iter().map(|(s, _)| s));
            utterances.push(Utterance { speaker, text, entities: Some(entities) });
            speaker = speaker.other();
        }
        out.push(Dialogue { id: format!("syn-{seed}-{d}"), utterances });
    }
    Ok(out)
}
