//! Knowledge-aware dialogue graph: one vertex per utterance, temporal edges
//! between neighbors and knowledge edges between utterances whose entities are
//! related in the KG.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Speaker, Utterance};
use crate::medkg::KnowledgeGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Temporal,
    Knowledge,
}

/// Relation types seen by the graph encoder, including implicit self-loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationType {
    Temporal,
    Knowledge,
    SelfLoop,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [RelationType::Temporal, RelationType::Knowledge, RelationType::SelfLoop];

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Temporal => "temporal",
            RelationType::Knowledge => "knowledge",
            RelationType::SelfLoop => "self",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueGraph {
    pub num_vertices: usize,
    /// Undirected edges stored once with `src < dst`; temporal edges first.
    pub edges: Vec<Edge>,
    pub speakers: Vec<Speaker>,
    pub entities: Vec<Vec<String>>,
}

/// Where vertex entity mentions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionSource {
    /// Gold annotations when the utterance has them, string matching otherwise.
    #[default]
    GoldThenMatch,
    /// Always string-match against the KG.
    Match,
}

pub fn utterance_entities(u: &Utterance, kg: &KnowledgeGraph, source: MentionSource) -> Vec<String> {
    let mut names: Vec<String> = match (&u.entities, source) {
        (Some(gold), MentionSource::GoldThenMatch) => gold.iter().map(|m| m.surface.clone()).collect(),
        _ => kg.match_text(&u.text).into_iter().map(|m| m.name).collect(),
    };
    let mut seen = std::collections::HashSet::new();
    names.retain(|n| seen.insert(n.clone()));
    names
}

/// Smallest relation label between any entity of `a` and any entity of `b`.
fn pair_label(a: &[String], b: &[String], kg: &KnowledgeGraph) -> Option<String> {
    a.iter().flat_map(|x| b.iter().filter_map(move |y| kg.relation_between(x, y))).min().map(str::to_string)
}

pub fn build_graph(history: &[Utterance], kg: &KnowledgeGraph, source: MentionSource) -> DialogueGraph {
    let m = history.len();
    let entities: Vec<Vec<String>> = history.iter().map(|u| utterance_entities(u, kg, source)).collect();
    let mut edges: Vec<Edge> =
        (0..m.saturating_sub(1)).map(|i| Edge { src: i, dst: i + 1, kind: EdgeKind::Temporal, label: None }).collect();
    for i in 0..m {
        for j in i + 1..m {
            if let Some(label) = pair_label(&entities[i], &entities[j], kg) {
                edges.push(Edge { src: i, dst: j, kind: EdgeKind::Knowledge, label: Some(label) });
            }
        }
    }
    DialogueGraph { num_vertices: m, edges, speakers: history.iter().map(|u| u.speaker).collect(), entities }
}

impl DialogueGraph {
    /// Dense symmetric adjacency for one relation type, row-major `M×M`.
    pub fn adjacency(&self, rel: RelationType) -> Vec<bool> {
        let m = self.num_vertices;
        let mut adj = vec![false; m * m];
        match rel {
            RelationType::SelfLoop => (0..m).for_each(|i| adj[i * m + i] = true),
            RelationType::Temporal | RelationType::Knowledge => {
                let kind = if rel == RelationType::Temporal { EdgeKind::Temporal } else { EdgeKind::Knowledge };
                for e in self.edges.iter().filter(|e| e.kind == kind) {
                    adj[e.src * m + e.dst] = true;
                    adj[e.dst * m + e.src] = true;
                }
            }
        }
        adj
    }

    pub fn knowledge_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Knowledge)
    }

    /// One line of the `build-graph` dump.
    pub fn to_json(&self, id: &str) -> serde_json::Value {
        let edges: Vec<serde_json::Value> =
            self.edges.iter().map(|e| json!([e.src, e.dst, e.kind, e.label])).collect();
        json!({ "id": id, "M": self.num_vertices, "edges": edges })
    }
}
