//! BM25 ranking over short texts: verbalized triples and entity labels.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, GraphView, KnowledgeGraph, Term, Triple};

/// Anything that can name an entity.
pub trait Labels {
    fn label_of(&self, e: &EntityId) -> Option<&str>;
}

impl Labels for KnowledgeGraph {
    fn label_of(&self, e: &EntityId) -> Option<&str> {
        self.label(e)
    }
}

impl Labels for GraphView<'_> {
    fn label_of(&self, e: &EntityId) -> Option<&str> {
        self.label(e)
    }
}

impl Labels for BTreeMap<EntityId, String> {
    fn label_of(&self, e: &EntityId) -> Option<&str> {
        self.get(e).map(String::as_str)
    }
}

pub fn term_text<'a>(t: &'a Term, labels: &'a impl Labels) -> &'a str {
    match t {
        Term::Entity(e) => labels.label_of(e).unwrap_or(e.as_str()),
        Term::Literal(l) => l.lexical(),
    }
}

/// Last dotted segment of a relation with underscores shown as spaces.
pub fn relation_text(relation: &str) -> String {
    relation.rsplit('.').next().unwrap_or(relation).replace('_', " ")
}

pub fn verbalize(t: &Triple, labels: &impl Labels) -> String {
    format!(
        "{}, {}, {}",
        labels.label_of(&t.head).unwrap_or(t.head.as_str()),
        relation_text(&t.relation),
        term_text(&t.tail, labels)
    )
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Vec<String>>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Corpus {
    pub fn new<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::from_tokens(texts.into_iter().map(|t| tokenize(t.as_ref())))
    }

    pub fn from_tokens(docs: impl IntoIterator<Item = Vec<String>>) -> Self {
        let docs: Vec<Vec<String>> = docs.into_iter().collect();
        let mut df = HashMap::new();
        for d in &docs {
            let mut seen: Vec<&String> = d.iter().collect();
            seen.sort();
            seen.dedup();
            for tok in seen {
                *df.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        let total: usize = docs.iter().map(Vec::len).sum();
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Corpus { docs, df, avgdl }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, i: usize) -> &[String] {
        &self.docs[i]
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn idf(&self, token: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df(token) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    /// Score of document `i` for already tokenized query terms. Repeated
    /// query terms contribute once per occurrence.
    pub fn score(&self, query: &[String], i: usize, params: Bm25Params) -> f64 {
        let doc = &self.docs[i];
        let dl = doc.len() as f64;
        query
            .iter()
            .map(|q| {
                let tf = doc.iter().filter(|t| *t == q).count() as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let norm = params.k1 * (1.0 - params.b + params.b * dl / self.avgdl);
                self.idf(q) * tf * (params.k1 + 1.0) / (tf + norm)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    /// Position in the corpus.
    pub doc: usize,
    pub score: f64,
}

/// Top `k` documents by score, ties in corpus order.
pub fn bm25_rank(query: &str, corpus: &Corpus, k: usize, params: Bm25Params) -> Vec<Ranked> {
    let q = tokenize(query);
    let mut ranked: Vec<Ranked> = (0..corpus.len())
        .map(|doc| Ranked {
            doc,
            score: corpus.score(&q, doc, params),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.cmp(&b.doc)));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: EntityId,
    pub label: String,
    /// Most frequent incident relations, standing in for entity types.
    pub types: Vec<String>,
}

/// Label corpus over the entities visible in a graph view.
pub struct LabelIndex<'v, 'g> {
    view: &'v GraphView<'g>,
    entities: Vec<EntityId>,
    corpus: Corpus,
    params: Bm25Params,
}

fn normalized(s: &str) -> String {
    tokenize(s).join(" ")
}

impl<'v, 'g> LabelIndex<'v, 'g> {
    pub fn build(view: &'v GraphView<'g>, params: Bm25Params) -> Self {
        let base = view.base();
        let entities: Vec<EntityId> = base
            .entities()
            .into_iter()
            .filter(|e| view.knows(e))
            .cloned()
            .collect();
        let corpus = Corpus::new(entities.iter().map(|e| base.display(e)));
        LabelIndex {
            view,
            entities,
            corpus,
            params,
        }
    }

    fn candidate(&self, i: usize) -> Candidate {
        let e = &self.entities[i];
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for t in self.view.incident(e) {
            *freq.entry(t.relation.as_str()).or_default() += 1;
        }
        let mut rels: Vec<(&str, usize)> = freq.into_iter().collect();
        rels.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Candidate {
            id: e.clone(),
            label: self.view.base().display(e).to_string(),
            types: rels.into_iter().take(3).map(|(r, _)| r.to_string()).collect(),
        }
    }

    /// Entities whose label matches `label` exactly (after tokenization)
    /// first, then the rest by BM25. Entities sharing no token with `label` are
    /// omitted; overlap counts even where the idf clamps the score to zero.
    pub fn candidates(&self, label: &str, k: usize) -> Vec<Candidate> {
        let want = normalized(label);
        let q = tokenize(label);
        let mut exact = Vec::new();
        let mut scored = Vec::new();
        for i in 0..self.corpus.len() {
            if !want.is_empty() && self.corpus.doc(i).join(" ") == want {
                exact.push(i);
            } else if q.iter().any(|t| self.corpus.doc(i).contains(t)) {
                let score = self.corpus.score(&q, i, self.params);
                scored.push(Ranked { doc: i, score });
            }
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.cmp(&b.doc)));
        exact
            .into_iter()
            .chain(scored.into_iter().map(|r| r.doc))
            .take(k)
            .map(|i| self.candidate(i))
            .collect()
    }
}

pub fn candidate_entities(label: &str, view: &GraphView<'_>, k: usize) -> Vec<Candidate> {
    LabelIndex::build(view, Bm25Params::default()).candidates(label, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight from the formula, no shared code with `Corpus`.
    fn naive(query: &str, docs: &[&str], k1: f64, b: f64) -> Vec<f64> {
        let toks: Vec<Vec<String>> = docs
            .iter()
            .map(|d| {
                d.to_lowercase()
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .collect();
        let n = docs.len() as f64;
        let avg = toks.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
        let qs: Vec<String> = query
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        toks.iter()
            .map(|d| {
                let mut s = 0.0;
                for q in &qs {
                    let df = toks.iter().filter(|x| x.contains(q)).count() as f64;
                    let idf = f64::max(0.0, ((n - df + 0.5) / (df + 0.5)).ln());
                    let tf = d.iter().filter(|x| *x == q).count() as f64;
                    if tf > 0.0 {
                        s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avg));
                    }
                }
                s
            })
            .collect()
    }

    const APPLE: [&str; 3] = [
        "Apple Inc, headquarter, Cupertino",
        "Cupertino, located in, California",
        "Cupertino, adjoin, Palo Alto",
    ];

    #[test]
    fn verbalize_cases() {
        let g = KnowledgeGraph::parse_tsv(
            "m.apple\tbusiness.company.headquarter\tm.cup\n\
             @label\tm.apple\tApple Inc\n@label\tm.cup\tCupertino\n",
        )
        .unwrap();
        assert_eq!(verbalize(&g.triples()[0], &g), "Apple Inc, headquarter, Cupertino");
        let bare = Triple::parse("A", "r", "B").unwrap();
        assert_eq!(verbalize(&bare, &g), "A, r, B");
        let tz = Triple::parse("Cupertino", "location.location.time_zones", "PST").unwrap();
        assert_eq!(verbalize(&tz, &g), "Cupertino, time zones, PST");
        let lit = Triple::parse("m.x", "people.person.height", "\"1.83\"").unwrap();
        assert_eq!(verbalize(&lit, &g), "m.x, height, 1.83");
    }

    #[test]
    fn apple_matches_naive() {
        let c = Corpus::new(APPLE);
        let p = Bm25Params::default();
        let ranked = bm25_rank("timezone Cupertino", &c, 3, p);
        let want = naive("timezone Cupertino", &APPLE, 1.2, 0.75);
        for r in &ranked {
            assert!((r.score - want[r.doc]).abs() < 1e-9);
        }
        // "cupertino" occurs in every doc, so its idf clamps to zero.
        assert!(ranked.iter().all(|r| r.score == 0.0));
        assert_eq!(ranked.iter().map(|r| r.doc).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn rank_edges() {
        let c = Corpus::new(APPLE);
        assert!(bm25_rank("palo", &c, 0, Bm25Params::default()).is_empty());
        let none = bm25_rank("zebra", &c, 2, Bm25Params::default());
        assert_eq!(none.iter().map(|r| (r.doc, r.score)).collect::<Vec<_>>(), [(0, 0.0), (1, 0.0)]);
        let hit = bm25_rank("palo alto", &c, 1, Bm25Params::default());
        assert_eq!(hit[0].doc, 2);
        assert!(bm25_rank("x", &Corpus::default(), 3, Bm25Params::default()).is_empty());
    }

    #[test]
    fn candidates_exact_first() {
        let g = KnowledgeGraph::parse_tsv(
            "m.qc\tlocation.location.contains\tm.qcity\n\
             m.qcity\tlocation.location.containedby\tm.qc\n\
             m.pst\ttime.time_zone.locations\tm.qcity\n\
             @label\tm.qc\tQuebec\n@label\tm.qcity\tQuebec City\n@label\tm.pst\tPacific Standard Time\n",
        )
        .unwrap();
        let v = g.view();
        let c = candidate_entities("Quebec", &v, 5);
        assert_eq!(c.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["Quebec", "Quebec City"]);
        assert_eq!(
            c[1].types,
            ["location.location.containedby", "location.location.contains", "time.time_zone.locations"]
        );
        assert_eq!(candidate_entities("Pacific Standard Time", &v, 1)[0].id.as_str(), "m.pst");
        let empty = KnowledgeGraph::default();
        assert!(candidate_entities("Quebec", &empty.view(), 3).is_empty());
    }

    fn arb_docs() -> impl Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..8, 1..8), 1..50)
    }

    fn text(d: &[u8]) -> String {
        d.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn matches_naive_scorer(docs in arb_docs(), q in prop::collection::vec(0u8..10, 1..4)) {
            let texts: Vec<String> = docs.iter().map(|d| text(d)).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let query = text(&q);
            let c = Corpus::new(&texts);
            let want = naive(&query, &refs, 1.2, 0.75);
            let ranked = bm25_rank(&query, &c, texts.len(), Bm25Params::default());
            prop_assert_eq!(ranked.len(), texts.len());
            for r in &ranked {
                prop_assert!((r.score - want[r.doc]).abs() < 1e-9);
            }
            for w in ranked.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc < w[1].doc));
            }
        }

        /// With df fixed (the doc already contains the token), one more
        /// occurrence never lowers the doc's score for that token.
        #[test]
        fn extra_occurrence_never_hurts(docs in arb_docs(), pick in any::<prop::sample::Index>()) {
            let i = pick.index(docs.len());
            let tok = docs[i][0];
            let query = format!("w{tok}");
            let before = Corpus::new(docs.iter().map(|d| text(d)));
            let mut grown = docs.clone();
            grown[i].push(tok);
            let after = Corpus::new(grown.iter().map(|d| text(d)));
            let q = tokenize(&query);
            prop_assert_eq!(before.df(&q[0]), after.df(&q[0]));
            let s0 = before.score(&q, i, Bm25Params::default());
            let s1 = after.score(&q, i, Bm25Params::default());
            prop_assert!(s1 >= s0 - 1e-12, "{} < {}", s1, s0);
        }
    }
}
