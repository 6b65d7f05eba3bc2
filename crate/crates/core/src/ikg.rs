//! Incomplete-graph benchmark construction.
//!
//! For each sample the gold query is executed against the complete graph and
//! the instantiated, non-literal triples become the sample's *crucial*
//! triples. Each crucial triple receives one uniform draw `r ∈ (0, 1]` from a
//! per-sample random stream; it is dropped at level `p` iff `r ≤ p`. Because
//! the draws are shared across levels, the drop set at a lower level is always
//! contained in the drop set at a higher one.
//!
//! Every other triple joining the endpoints of a dropped triple (in either
//! direction) is removed as well. Samples whose topic entity ends up with no
//! incident triple are excluded and counted.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::BenchmarkSample;
use crate::kg::{GraphView, KnowledgeGraph, Term, Triple};
use crate::query::{bindings_to_triples, evaluate, filter_property_triples, parse_query, QueryError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropList {
    pub sample_id: String,
    pub drop_prob: f64,
    pub seed: u64,
    pub dropped: Vec<Triple>,
    pub expanded: Vec<Triple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl DropList {
    /// Every triple this list hides.
    pub fn removed(&self) -> impl Iterator<Item = &Triple> {
        self.dropped.iter().chain(&self.expanded)
    }

    pub fn edges_removed(&self) -> usize {
        self.dropped.len() + self.expanded.len()
    }

    pub fn view<'g>(&self, g: &'g KnowledgeGraph) -> GraphView<'g> {
        g.without(self.removed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkgStats {
    pub drop_prob: f64,
    pub total_samples: usize,
    pub retained_samples: usize,
    pub mean_dropped_per_question: f64,
    pub median_topic_neighbor_count: usize,
    pub isolated_topic_samples: usize,
    pub skipped_unparseable: usize,
}

impl fmt::Display for IkgStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("drop probability", format!("{:.2}", self.drop_prob)),
            ("samples (total)", self.total_samples.to_string()),
            ("samples (retained)", self.retained_samples.to_string()),
            ("mean edges deleted / question", format!("{:.1}", self.mean_dropped_per_question)),
            ("median topic neighbor count", self.median_topic_neighbor_count.to_string()),
            ("isolated topic samples", self.isolated_topic_samples.to_string()),
            ("skipped (unparseable query)", self.skipped_unparseable.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<32}{v:>10}")?;
        }
        Ok(())
    }
}

/// Triples instantiated by the sample's gold query on `g`, minus literal
/// property values. Order follows the query's bindings.
pub fn crucial_triples(
    sample: &BenchmarkSample,
    g: &KnowledgeGraph,
) -> Result<Vec<Triple>, QueryError> {
    let q = parse_query(&sample.gold_query)?;
    let bindings = evaluate(&q, &g.view());
    Ok(filter_property_triples(&bindings_to_triples(&q, &bindings)))
}

/// Random stream for one sample, derived from the dataset seed and sample id
/// only, so results do not depend on processing order.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"kgqa/drop-stream/v1");
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// One draw in `(0, 1]` per crucial triple, in order.
pub fn drop_draws(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| 1.0 - rng.random::<f64>()).collect()
}

/// Keep each crucial triple independently with probability `p`.
pub fn sample_drops(crucial: &[Triple], p: f64, rng: &mut impl Rng) -> Vec<Triple> {
    let draws = drop_draws(crucial.len(), rng);
    select_drops(crucial, &draws, p)
}

fn select_drops(crucial: &[Triple], draws: &[f64], p: f64) -> Vec<Triple> {
    crucial
        .iter()
        .zip(draws)
        .filter(|(_, &r)| r <= p)
        .map(|(t, _)| t.clone())
        .collect()
}

/// Every other triple of `g` joining the unordered endpoint pair of a
/// dropped triple, sorted.
pub fn expand_drops(dropped: &[Triple], g: &KnowledgeGraph) -> Vec<Triple> {
    let dropped_set: HashSet<&Triple> = dropped.iter().collect();
    let mut out = BTreeSet::new();
    for d in dropped {
        for t in g.out_triples(&d.head) {
            if t.tail == d.tail && !dropped_set.contains(t) {
                out.insert(t.clone());
            }
        }
        if let Term::Entity(tail) = &d.tail {
            for t in g.out_triples(tail) {
                if t.tail.as_entity() == Some(&d.head) && !dropped_set.contains(t) {
                    out.insert(t.clone());
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Per-sample outcome of the construction, before levels are applied.
#[derive(Debug, Clone)]
struct Prepared {
    id: String,
    crucial: Vec<Triple>,
    draws: Vec<f64>,
}

fn prepare(
    dataset: &[BenchmarkSample],
    g: &KnowledgeGraph,
    seed: u64,
) -> (Vec<Result<Prepared, String>>, usize) {
    let mut prepared: Vec<Result<Prepared, String>> = dataset
        .par_iter()
        .map(|s| match crucial_triples(s, g) {
            Ok(crucial) => {
                let mut rng = sample_rng(seed, &s.id);
                let draws = drop_draws(crucial.len(), &mut rng);
                Ok(Prepared {
                    id: s.id.clone(),
                    crucial,
                    draws,
                })
            }
            Err(e) => {
                tracing::warn!(sample = %s.id, error = %e, "skipping sample with unsupported gold query");
                Err(s.id.clone())
            }
        })
        .collect();
    prepared.sort_by(|a, b| {
        let key = |r: &Result<Prepared, String>| match r {
            Ok(p) => p.id.clone(),
            Err(id) => id.clone(),
        };
        key(a).cmp(&key(b))
    });
    let skipped = prepared.iter().filter(|p| p.is_err()).count();
    (prepared, skipped)
}

fn topic_isolated(sample: &BenchmarkSample, view: &GraphView<'_>) -> bool {
    sample.topic_entities.keys().any(|e| view.degree(e) == 0)
}

/// Build one incomplete-graph level. Returned drop lists are sorted by
/// sample id and cover only retained samples.
pub fn build_ikg(
    dataset: &[BenchmarkSample],
    g: &KnowledgeGraph,
    p: f64,
    seed: u64,
) -> (Vec<DropList>, IkgStats) {
    build_ikg_levels(dataset, g, &[p], seed).pop().expect("one level requested")
}

/// Build several levels from a single set of draws per crucial triple.
pub fn build_ikg_levels(
    dataset: &[BenchmarkSample],
    g: &KnowledgeGraph,
    levels: &[f64],
    seed: u64,
) -> Vec<(Vec<DropList>, IkgStats)> {
    let (prepared, _) = prepare(dataset, g, seed);
    let by_id: BTreeMap<&str, &BenchmarkSample> =
        dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    levels
        .iter()
        .map(|&p| {
            let lists: Vec<DropList> = prepared
                .par_iter()
                .filter_map(|r| r.as_ref().ok())
                .filter_map(|prep| {
                    let dropped = select_drops(&prep.crucial, &prep.draws, p);
                    let expanded = expand_drops(&dropped, g);
                    let list = DropList {
                        sample_id: prep.id.clone(),
                        drop_prob: p,
                        seed,
                        dropped,
                        expanded,
                        config_digest: None,
                    };
                    let sample = by_id[prep.id.as_str()];
                    (!topic_isolated(sample, &list.view(g))).then_some(list)
                })
                .collect();
            let mut stats = compute_stats(&lists, dataset, g);
            stats.drop_prob = p;
            (lists, stats)
        })
        .collect()
}

/// Lower median; zero for an empty slice.
pub fn lower_median(values: &mut [usize]) -> usize {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

/// Statistics over the retained samples (those with a drop list).
///
/// Samples whose gold query does not parse count as skipped; parseable
/// samples without a drop list count as isolated.
pub fn compute_stats(
    droplists: &[DropList],
    dataset: &[BenchmarkSample],
    g: &KnowledgeGraph,
) -> IkgStats {
    let lists: BTreeMap<&str, &DropList> =
        droplists.iter().map(|d| (d.sample_id.as_str(), d)).collect();
    let mut skipped = 0;
    let mut isolated = 0;
    let mut removed_counts = Vec::new();
    let mut neighbor_counts = Vec::new();
    for s in dataset {
        match lists.get(s.id.as_str()) {
            Some(d) => {
                removed_counts.push(d.edges_removed());
                let view = d.view(g);
                let neighbors: BTreeSet<Term> = s
                    .topic_entities
                    .keys()
                    .flat_map(|e| {
                        view.incident(e)
                            .into_iter()
                            .filter_map(move |t| t.other_end(e))
                    })
                    .collect();
                neighbor_counts.push(neighbors.len());
            }
            None if parse_query(&s.gold_query).is_err() => skipped += 1,
            None => isolated += 1,
        }
    }
    let retained = removed_counts.len();
    let mean = if retained == 0 {
        0.0
    } else {
        removed_counts.iter().sum::<usize>() as f64 / retained as f64
    };
    IkgStats {
        drop_prob: droplists.first().map_or(0.0, |d| d.drop_prob),
        total_samples: dataset.len(),
        retained_samples: retained,
        mean_dropped_per_question: mean,
        median_topic_neighbor_count: lower_median(&mut neighbor_counts),
        isolated_topic_samples: isolated,
        skipped_unparseable: skipped,
    }
}

/// Deterministic subset of `n` samples chosen with `seed`, returned in id
/// order.
pub fn subsample(dataset: &[BenchmarkSample], n: usize, seed: u64) -> Vec<BenchmarkSample> {
    let mut ids: Vec<&BenchmarkSample> = dataset.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(n);
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    ids.into_iter().cloned().collect()
}
