//! Medical knowledge graph: entity store, string matching over token
//! sequences, pairwise relation lookup and one-hop sub-graph extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub head: String,
    pub rel: String,
    pub tail: String,
}

/// A mention of a KG entity inside a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityMatch {
    pub name: String,
    pub span: Range<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Option<String>>,
    relations: BTreeSet<Relation>,
    // undirected: name -> {(neighbor, rel)}
    adjacency: BTreeMap<String, BTreeSet<(String, String)>>,
    // first token -> (token sequence, name), longest first then by name
    surfaces: HashMap<String, Vec<(Vec<String>, String)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KgLine {
    Triple { head: String, rel: String, tail: String },
    Entity { entity: String, #[serde(default, skip_serializing_if = "Option::is_none")] category: Option<String> },
}

impl KnowledgeGraph {
    /// Builds a graph. In strict mode a triple naming an unknown entity is an
    /// error; otherwise the entity is created without a category.
    pub fn from_parts(
        entities: impl IntoIterator<Item = Entity>,
        relations: impl IntoIterator<Item = Relation>,
        strict: bool,
    ) -> Result<Self> {
        let mut kg = KnowledgeGraph::default();
        for e in entities {
            kg.add_entity(e)?;
        }
        for r in relations {
            for name in [&r.head, &r.tail] {
                if !kg.entities.contains_key(name) {
                    if strict {
                        return Err(Error::Validation(format!("triple references unknown entity {name:?}")));
                    }
                    kg.add_entity(Entity { name: name.clone(), category: None })?;
                }
            }
            kg.add_relation(r);
        }
        Ok(kg)
    }

    fn add_entity(&mut self, e: Entity) -> Result<()> {
        let toks = tokenize(&e.name);
        if toks.is_empty() {
            return Err(Error::Validation("entity name is empty".into()));
        }
        if self.entities.contains_key(&e.name) {
            return Err(Error::Validation(format!("duplicate entity {:?}", e.name)));
        }
        let bucket = self.surfaces.entry(toks[0].clone()).or_default();
        bucket.push((toks, e.name.clone()));
        bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        self.entities.insert(e.name, e.category);
        Ok(())
    }

    fn add_relation(&mut self, r: Relation) {
        if self.relations.contains(&r) {
            return;
        }
        self.adjacency.entry(r.head.clone()).or_default().insert((r.tail.clone(), r.rel.clone()));
        self.adjacency.entry(r.tail.clone()).or_default().insert((r.head.clone(), r.rel.clone()));
        self.relations.insert(r);
    }

    pub fn load_jsonl(path: &Path, strict: bool) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.trim_start().starts_with("{\"_provenance\"") {
                continue;
            }
            let parsed: KgLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                KgLine::Entity { entity, category } => entities.push(Entity { name: entity, category }),
                KgLine::Triple { head, rel, tail } => relations.push(Relation { head, rel, tail }),
            }
        }
        Self::from_parts(entities, relations, strict)
    }

    /// Entity lines sorted by name, then triples sorted by (head, rel, tail).
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (name, category) in &self.entities {
            let line = KgLine::Entity { entity: name.clone(), category: category.clone() };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        for r in &self.relations {
            let line = KgLine::Triple { head: r.head.clone(), rel: r.rel.clone(), tail: r.tail.clone() };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entities.contains_key(name)
    }

    pub fn category(&self, name: &str) -> Option<&str> {
        self.entities.get(name).and_then(|c| c.as_deref())
    }

    pub fn entities(&self) -> impl Iterator<Item = Entity> + '_ {
        self.entities.iter().map(|(n, c)| Entity { name: n.clone(), category: c.clone() })
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter()
    }

    /// Undirected neighbors of `name` with the connecting relation label.
    pub fn neighbors(&self, name: &str) -> impl Iterator<Item = (&str, &str)> {
        self.adjacency.get(name).into_iter().flatten().map(|(n, r)| (n.as_str(), r.as_str()))
    }

    /// Greedy left-to-right, longest-match-first entity mentions. Equal-length
    /// candidates resolve to the lexicographically smallest name.
    pub fn match_entities<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<EntityMatch> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.surfaces.get(tokens[i].as_ref()).and_then(|cands| {
                cands.iter().find(|(seq, _)| {
                    i + seq.len() <= tokens.len() && seq.iter().zip(&tokens[i..]).all(|(a, b)| a == b.as_ref())
                })
            });
            match hit {
                Some((seq, name)) => {
                    out.push(EntityMatch { name: name.clone(), span: i..i + seq.len() });
                    i += seq.len();
                }
                None => i += 1,
            }
        }
        out
    }

    /// Convenience wrapper tokenizing `text` first.
    pub fn match_text(&self, text: &str) -> Vec<EntityMatch> {
        self.match_entities(&tokenize(text))
    }

    /// Relation label between `a` and `b` in either direction; the
    /// lexicographically smallest label when several exist.
    pub fn relation_between(&self, a: &str, b: &str) -> Option<&str> {
        self.adjacency
            .get(a)?
            .range((b.to_string(), String::new())..)
            .take_while(|(n, _)| n == b)
            .map(|(_, r)| r.as_str())
            .next()
    }

    /// Centers present in the graph, all their neighbors, and every relation
    /// incident to a center.
    pub fn one_hop_subgraph<S: AsRef<str>>(&self, centers: &[S]) -> KnowledgeGraph {
        let centers: BTreeSet<&str> = centers.iter().map(|c| c.as_ref()).filter(|c| self.contains(c)).collect();
        let mut names: BTreeSet<&str> = centers.clone();
        for c in &centers {
            names.extend(self.neighbors(c).map(|(n, _)| n));
        }
        let entities = names.iter().map(|n| Entity { name: n.to_string(), category: self.entities[*n].clone() });
        let relations = self
            .relations
            .iter()
            .filter(|r| centers.contains(r.head.as_str()) || centers.contains(r.tail.as_str()))
            .cloned();
        Self::from_parts(entities, relations, true).expect("sub-graph of a valid graph is valid")
    }
}

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "ru", "ta", "ne", "so", "vi", "pe", "zu", "da", "ko", "ri", "ma", "te", "xu"];

pub const CATEGORIES: [&str; 5] = ["Disease", "Symptom", "Attribute", "Test", "Medicine"];

const RELATIONS: [&str; 5] = ["symptom", "treatment", "examination", "complication", "attribute"];

/// Deterministic random KG with pseudo-word entity names (some two words long)
/// and `n_triples` distinct triples between distinct entities.
pub fn synthetic_kg(seed: u64, n_entities: usize, n_triples: usize) -> KnowledgeGraph {
    assert!(n_entities >= 2, "need at least two entities");
    let max_pairs = n_entities * (n_entities - 1) * RELATIONS.len();
    assert!(n_triples <= max_pairs, "too many triples requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = BTreeSet::new();
    let mut entities = Vec::new();
    while entities.len() < n_entities {
        let word = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(2..=3);
            (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect::<String>()
        };
        let mut name = word(&mut rng);
        if rng.random_bool(0.2) {
            name = format!("{name} {}", word(&mut rng));
        }
        if names.insert(name.clone()) {
            let category = CATEGORIES[entities.len() % CATEGORIES.len()].to_string();
            entities.push(Entity { name, category: Some(category) });
        }
    }
    let mut triples = BTreeSet::new();
    while triples.len() < n_triples {
        let h = rng.random_range(0..n_entities);
        let t = rng.random_range(0..n_entities);
        if h == t {
            continue;
        }
        let rel = RELATIONS.choose(&mut rng).unwrap();
        triples.insert(Relation {
            head: entities[h].name.clone(),
            rel: rel.to_string(),
            tail: entities[t].name.clone(),
        });
    }
    KnowledgeGraph::from_parts(entities, triples, true).expect("synthetic graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(n: &str) -> Entity {
        Entity { name: n.into(), category: None }
    }

    fn rel(h: &str, r: &str, t: &str) -> Relation {
        Relation { head: h.into(), rel: r.into(), tail: t.into() }
    }

    #[test]
    fn no_surface_means_no_match() {
        let kg = KnowledgeGraph::from_parts([ent("胃炎")], [], true).unwrap();
        assert!(kg.match_text("今天天气很好").is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let kg = KnowledgeGraph::from_parts([ent("胃炎"), ent("慢性胃炎")], [], true).unwrap();
        let m = kg.match_text("我有慢性胃炎");
        assert_eq!(m, vec![EntityMatch { name: "慢性胃炎".into(), span: 2..6 }]);
    }

    #[test]
    fn relation_lookup_is_undirected() {
        let kg = KnowledgeGraph::from_parts(
            [ent("enteritis"), ent("tenesmus")],
            [rel("enteritis", "symptom", "tenesmus")],
            true,
        )
        .unwrap();
        assert_eq!(kg.relation_between("tenesmus", "enteritis"), Some("symptom"));
        assert_eq!(kg.relation_between("enteritis", "tenesmus"), Some("symptom"));
        assert_eq!(kg.relation_between("enteritis", "enteritis"), None);
    }

    #[test]
    fn multiple_labels_pick_smallest() {
        let kg = KnowledgeGraph::from_parts(
            [ent("a"), ent("b")],
            [rel("a", "zeta", "b"), rel("b", "alpha", "a")],
            true,
        )
        .unwrap();
        assert_eq!(kg.relation_between("a", "b"), Some("alpha"));
    }

    #[test]
    fn star_subgraph() {
        let kg = KnowledgeGraph::from_parts(
            ["c", "l1", "l2", "l3", "l4", "x"].map(ent),
            [rel("c", "r", "l1"), rel("l2", "r", "c"), rel("c", "r", "l3"), rel("c", "r", "l4"), rel("l1", "r", "x")],
            true,
        )
        .unwrap();
        let sub = kg.one_hop_subgraph(&["c"]);
        assert_eq!(sub.num_entities(), 5);
        assert_eq!(sub.num_relations(), 4);
        assert!(kg.one_hop_subgraph::<&str>(&[]).is_empty());
    }

    #[test]
    fn strict_mode_rejects_unknown_entities() {
        assert!(KnowledgeGraph::from_parts([ent("a")], [rel("a", "r", "b")], true).is_err());
        let kg = KnowledgeGraph::from_parts([ent("a")], [rel("a", "r", "b")], false).unwrap();
        assert!(kg.contains("b"));
        assert_eq!(kg.category("b"), None);
    }

    #[test]
    fn synthetic_kg_is_deterministic_and_sized() {
        let a = synthetic_kg(3, 40, 100);
        assert_eq!(a, synthetic_kg(3, 40, 100));
        assert_eq!(a.num_entities(), 40);
        assert_eq!(a.num_relations(), 100);
    }
}
