//! In-memory triple store.
//!
//! A [`KnowledgeGraph`] is an immutable, deduplicated set of triples with
//! head and tail adjacency indices and an optional display-label map. Reads
//! go through a [`GraphView`], which hides a chosen subset of triples so that
//! an incomplete graph can be simulated without copying the base graph.
//!
//! Every set-returning read is ordered lexicographically by
//! `(head, relation, tail)` so prompts and traces are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: conflicting label for {id}: {existing:?} vs {new:?}")]
    ConflictingLabel {
        line: usize,
        id: String,
        existing: String,
        new: String,
    },
    #[error("invalid entity id {0:?}")]
    InvalidId(String),
    #[error("invalid relation {0:?}")]
    InvalidRelation(String),
    #[error("i/o error reading graph: {0}")]
    Io(#[from] std::io::Error),
}

/// Identifier of a graph node: a machine id (`m.` / `g.` prefix) or a
/// label-derived surrogate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Result<Self, GraphError> {
        let id = id.into();
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(GraphError::InvalidId(id));
        }
        Ok(EntityId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Machine identifiers start with `m.` or `g.`; everything else is a
    /// label surrogate.
    pub fn is_machine_id(&self) -> bool {
        self.0.starts_with("m.") || self.0.starts_with("g.")
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EntityId::new(s).map_err(serde::de::Error::custom)
    }
}

/// A literal value, kept as its raw surface token (`"text"@en`, `1.83`,
/// `2012-01-01`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Literal(String);

impl Literal {
    pub fn raw(&self) -> &str {
        &self.0
    }

    /// The lexical form without surrounding quotes, language tag or datatype.
    pub fn lexical(&self) -> &str {
        let s = self.0.as_str();
        if let Some(rest) = s.strip_prefix('"') {
            if let Some(end) = rest.rfind('"') {
                return &rest[..end];
            }
        }
        s
    }

    /// Language tag of a quoted literal (`"chat"@fr` → `fr`).
    pub fn lang(&self) -> Option<&str> {
        let s = self.0.as_str();
        if !s.starts_with('"') {
            return None;
        }
        let end = s.rfind('"')?;
        s[end + 1..].strip_prefix('@').filter(|t| !t.is_empty())
    }
}

/// Whether a tail token denotes a literal: double-quoted, numeric, or an
/// ISO-8601 date (optionally with a time part).
pub fn looks_like_literal(token: &str) -> bool {
    if token.len() >= 2 && token.starts_with('"') && token[1..].contains('"') {
        return true;
    }
    if token.parse::<f64>().is_ok() && token.chars().any(|c| c.is_ascii_digit()) {
        return true;
    }
    is_iso_date(token)
}

fn is_iso_date(token: &str) -> bool {
    let b = token.as_bytes();
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    // YYYY, YYYY-MM, YYYY-MM-DD, optional THH:MM[:SS][...]
    match b.len() {
        4 => digits(0..4),
        7 => digits(0..4) && b[4] == b'-' && digits(5..7),
        n if n >= 10 => {
            digits(0..4)
                && b[4] == b'-'
                && digits(5..7)
                && b[7] == b'-'
                && digits(8..10)
                && (n == 10 || b[10] == b'T')
        }
        _ => false,
    }
}

/// Tail position of a triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Entity(EntityId),
    Literal(Literal),
}

impl Term {
    /// Classify a raw token. Literal detection follows [`looks_like_literal`].
    pub fn parse(token: &str) -> Result<Self, GraphError> {
        if looks_like_literal(token) {
            if token.contains(['\t', '\n', '\r']) {
                return Err(GraphError::InvalidId(token.to_string()));
            }
            Ok(Term::Literal(Literal(token.to_string())))
        } else {
            EntityId::new(token).map(Term::Entity)
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Term::Entity(e) => e.as_str(),
            Term::Literal(l) => l.raw(),
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Term::Literal(_))
    }

    pub fn as_entity(&self) -> Option<&EntityId> {
        match self {
            Term::Entity(e) => Some(e),
            Term::Literal(_) => None,
        }
    }
}

impl From<EntityId> for Term {
    fn from(e: EntityId) -> Self {
        Term::Entity(e)
    }
}

impl Ord for Term {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_str()
            .cmp(other.as_str())
            .then_with(|| self.is_literal().cmp(&other.is_literal()))
    }
}

impl PartialOrd for Term {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Term::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn validate_relation(relation: &str) -> Result<(), GraphError> {
    if relation.is_empty() || relation.chars().any(char::is_whitespace) {
        return Err(GraphError::InvalidRelation(relation.to_string()));
    }
    Ok(())
}

/// A `(head, relation, tail)` fact. Serialized as a 3-element string array.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: String,
    pub tail: Term,
}

impl Triple {
    pub fn new(head: EntityId, relation: impl Into<String>, tail: Term) -> Result<Self, GraphError> {
        let relation = relation.into();
        validate_relation(&relation)?;
        Ok(Triple {
            head,
            relation,
            tail,
        })
    }

    /// Build from raw tokens, classifying the tail.
    pub fn parse(head: &str, relation: &str, tail: &str) -> Result<Self, GraphError> {
        Triple::new(EntityId::new(head)?, relation, Term::parse(tail)?)
    }

    /// Whether `e` is the head or (entity) tail.
    pub fn touches(&self, e: &EntityId) -> bool {
        &self.head == e || self.tail.as_entity() == Some(e)
    }

    /// The endpoint opposite `e`, if `e` is an endpoint.
    pub fn other_end(&self, e: &EntityId) -> Option<Term> {
        if &self.head == e {
            Some(self.tail.clone())
        } else if self.tail.as_entity() == Some(e) {
            Some(Term::Entity(self.head.clone()))
        } else {
            None
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

impl Serialize for Triple {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.head.as_str(), self.relation.as_str(), self.tail.as_str()].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Triple {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [h, r, t] = <[String; 3]>::deserialize(d)?;
        Triple::parse(&h, &r, &t).map_err(serde::de::Error::custom)
    }
}

/// Edge direction relative to the queried entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Out,
    In,
}

/// Immutable triple set with adjacency indices. Triples are stored sorted;
/// the indices hold positions into that vector.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    labels: BTreeMap<EntityId, String>,
    out_index: BTreeMap<EntityId, Vec<usize>>,
    in_index: BTreeMap<EntityId, Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn new(
        triples: impl IntoIterator<Item = Triple>,
        labels: BTreeMap<EntityId, String>,
    ) -> Self {
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        let triples: Vec<Triple> = set.into_iter().collect();
        let mut out_index: BTreeMap<EntityId, Vec<usize>> = BTreeMap::new();
        let mut in_index: BTreeMap<EntityId, Vec<usize>> = BTreeMap::new();
        for (i, t) in triples.iter().enumerate() {
            out_index.entry(t.head.clone()).or_default().push(i);
            if let Term::Entity(tail) = &t.tail {
                in_index.entry(tail.clone()).or_default().push(i);
            }
        }
        KnowledgeGraph {
            triples,
            labels,
            out_index,
            in_index,
        }
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        Self::new(triples, BTreeMap::new())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text)
    }

    /// Parse the TSV graph format: `head\trelation\ttail` triple lines,
    /// `@label\tid\tlabel` label lines, `#` comments and blank lines.
    pub fn parse_tsv(text: &str) -> Result<Self, GraphError> {
        let mut triples = Vec::new();
        let mut labels: BTreeMap<EntityId, String> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.strip_suffix('\r').unwrap_or(raw);
            if content.trim().is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split('\t').collect();
            let malformed = |message: String| GraphError::Malformed { line, message };
            if fields.len() != 3 {
                return Err(malformed(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(malformed("empty field".to_string()));
            }
            if fields[0] == "@label" {
                let id = EntityId::new(fields[1]).map_err(|e| malformed(e.to_string()))?;
                let label = fields[2].to_string();
                match labels.get(&id) {
                    Some(existing) if existing != &label => {
                        return Err(GraphError::ConflictingLabel {
                            line,
                            id: id.to_string(),
                            existing: existing.clone(),
                            new: label,
                        })
                    }
                    _ => {
                        labels.insert(id, label);
                    }
                }
                continue;
            }
            let t = Triple::parse(fields[0], fields[1], fields[2])
                .map_err(|e| malformed(e.to_string()))?;
            triples.push(t);
        }
        Ok(Self::new(triples, labels))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// All triples in lexicographic order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.binary_search(t).is_ok()
    }

    pub fn labels(&self) -> &BTreeMap<EntityId, String> {
        &self.labels
    }

    pub fn label(&self, e: &EntityId) -> Option<&str> {
        self.labels.get(e).map(String::as_str)
    }

    /// Display text for an entity: its label, or the raw id.
    pub fn display<'a>(&'a self, e: &'a EntityId) -> &'a str {
        self.label(e).unwrap_or(e.as_str())
    }

    pub fn out_triples(&self, e: &EntityId) -> impl Iterator<Item = &Triple> {
        self.out_index
            .get(e)
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    pub fn in_triples(&self, e: &EntityId) -> impl Iterator<Item = &Triple> {
        self.in_index
            .get(e)
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    /// Entities that occur as a head or entity tail, or carry a label.
    pub fn entities(&self) -> BTreeSet<&EntityId> {
        self.out_index
            .keys()
            .chain(self.in_index.keys())
            .chain(self.labels.keys())
            .collect()
    }

    /// A view with nothing removed.
    pub fn view(&self) -> GraphView<'_> {
        GraphView {
            base: self,
            removed: HashSet::new(),
        }
    }

    /// A view hiding `removed`. Triples not in the graph are ignored, so the
    /// removed set is always a subset of the base.
    pub fn without<'a>(&self, removed: impl IntoIterator<Item = &'a Triple>) -> GraphView<'_> {
        let removed = removed
            .into_iter()
            .filter(|t| self.contains(t))
            .cloned()
            .collect();
        GraphView {
            base: self,
            removed,
        }
    }

    #[cfg(test)]
    pub(crate) fn index_snapshot(
        &self,
    ) -> (
        BTreeMap<EntityId, Vec<usize>>,
        BTreeMap<EntityId, Vec<usize>>,
    ) {
        (self.out_index.clone(), self.in_index.clone())
    }
}

/// Read-only window onto a [`KnowledgeGraph`] with some triples hidden.
#[derive(Debug, Clone)]
pub struct GraphView<'g> {
    base: &'g KnowledgeGraph,
    removed: HashSet<Triple>,
}

impl<'g> GraphView<'g> {
    pub fn base(&self) -> &'g KnowledgeGraph {
        self.base
    }

    pub fn removed(&self) -> &HashSet<Triple> {
        &self.removed
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.base.contains(t) && !self.removed.contains(t)
    }

    fn visible(&self, t: &Triple) -> bool {
        !self.removed.contains(t)
    }

    /// Visible triples in lexicographic order.
    pub fn triples(&self) -> impl Iterator<Item = &'g Triple> + '_ {
        self.base.triples.iter().filter(|t| self.visible(t))
    }

    pub fn out_triples(&self, e: &EntityId) -> impl Iterator<Item = &'g Triple> + '_ {
        let base = self.base;
        base.out_index
            .get(e)
            .into_iter()
            .flatten()
            .map(move |&i| &base.triples[i])
            .filter(|t| self.visible(t))
    }

    pub fn in_triples(&self, e: &EntityId) -> impl Iterator<Item = &'g Triple> + '_ {
        let base = self.base;
        base.in_index
            .get(e)
            .into_iter()
            .flatten()
            .map(move |&i| &base.triples[i])
            .filter(|t| self.visible(t))
    }

    /// Visible triples incident to `e`, deduplicated and sorted.
    pub fn incident(&self, e: &EntityId) -> Vec<&'g Triple> {
        let set: BTreeSet<&Triple> = self.out_triples(e).chain(self.in_triples(e)).collect();
        set.into_iter().collect()
    }

    /// Relations linked to `e` with their direction. Unknown entities yield
    /// an empty set.
    pub fn relations_of(&self, e: &EntityId) -> BTreeSet<(String, Direction)> {
        self.out_triples(e)
            .map(|t| (t.relation.clone(), Direction::Out))
            .chain(self.in_triples(e).map(|t| (t.relation.clone(), Direction::In)))
            .collect()
    }

    /// Visible triples incident to `e` (either direction) whose relation is
    /// in `rels`.
    pub fn neighbors(&self, e: &EntityId, rels: &BTreeSet<String>) -> BTreeSet<Triple> {
        self.out_triples(e)
            .chain(self.in_triples(e))
            .filter(|t| rels.contains(&t.relation))
            .cloned()
            .collect()
    }

    /// Number of incident triples. A self-loop counts once per direction.
    pub fn degree(&self, e: &EntityId) -> usize {
        self.out_triples(e).count() + self.in_triples(e).count()
    }

    /// Distinct nodes adjacent to `e`.
    pub fn neighbor_count(&self, e: &EntityId) -> usize {
        self.out_triples(e)
            .map(|t| t.tail.clone())
            .chain(self.in_triples(e).map(|t| Term::Entity(t.head.clone())))
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Compound-value-type node: a machine id with no display label.
    pub fn is_cvt(&self, e: &EntityId) -> bool {
        e.is_machine_id() && self.base.label(e).is_none()
    }

    /// Whether `e` is mentioned by any visible triple or has a label.
    pub fn knows(&self, e: &EntityId) -> bool {
        self.base.labels.contains_key(e) || self.degree(e) > 0
    }

    pub fn label(&self, e: &EntityId) -> Option<&'g str> {
        self.base.label(e)
    }

    /// Entities whose display text equals `text`, sorted by id.
    pub fn entities_with_label(&self, text: &str) -> Vec<EntityId> {
        self.base
            .entities()
            .into_iter()
            .filter(|e| self.base.display(e) == text && self.knows(e))
            .cloned()
            .collect()
    }
}
