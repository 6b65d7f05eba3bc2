//! Benchmark runs and Hits@1 scoring.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentResult, Termination};
use crate::dataset::{Answer, BenchmarkSample};
use crate::ikg::DropList;
use crate::kg::KnowledgeGraph;
use crate::llm::Gateway;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot merge reports scored with different modes ({0} and {1})")]
    MixedModes(HitsMode, HitsMode),
    #[error("no reports to merge")]
    Empty,
    #[error("drop list for unknown sample {0:?}")]
    UnknownSample(String),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitsMode {
    /// Any predicted answer may match.
    #[default]
    AnyMatch,
    /// Only the first predicted answer counts.
    Strict,
}

impl fmt::Display for HitsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HitsMode::AnyMatch => "any_match",
            HitsMode::Strict => "strict",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: HitsMode,
    pub use_aliases: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: HitsMode::AnyMatch,
            use_aliases: true,
        }
    }
}

/// Lowercase, trim, collapse whitespace, and drop a leading "the ".
pub fn normalize_answer(s: &str) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    match joined.strip_prefix("the ") {
        Some(rest) => rest.to_string(),
        None => joined,
    }
}

pub fn hits_at_1(pred: &[String], gold: &[Answer], cfg: EvalConfig) -> u8 {
    let golds: Vec<String> = gold
        .iter()
        .flat_map(|a| {
            std::iter::once(&a.label).chain(a.aliases.iter().filter(|_| cfg.use_aliases))
        })
        .map(|s| normalize_answer(s))
        .collect();
    let considered = match cfg.mode {
        HitsMode::AnyMatch => pred,
        HitsMode::Strict => &pred[..pred.len().min(1)],
    };
    let hit = considered.iter().any(|p| {
        let p = normalize_answer(p);
        p != "unknown" && !p.is_empty() && golds.contains(&p)
    });
    u8::from(hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "drop_prob", rename_all = "snake_case")]
pub enum KgLevel {
    Complete,
    Incomplete(f64),
}

impl KgLevel {
    /// Drop lists built at p = 0 leave the graph complete.
    pub fn from_drop_prob(p: f64) -> Self {
        if p == 0.0 {
            KgLevel::Complete
        } else {
            KgLevel::Incomplete(p)
        }
    }

    fn order(&self) -> f64 {
        match self {
            KgLevel::Complete => 0.0,
            KgLevel::Incomplete(p) => *p,
        }
    }
}

impl fmt::Display for KgLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KgLevel::Complete => f.write_str("CKG"),
            KgLevel::Incomplete(p) => write!(f, "IKG-{}%", (p * 100.0).round()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub hit: u8,
    pub termination: Termination,
    pub steps: usize,
    pub generate_action_used: bool,
    /// Free-form error class, filled in by hand when auditing misses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub hits: usize,
    pub hits_at_1: f64,
    pub generate_count: usize,
    pub generate_ratio: f64,
    /// Hits@1 among samples that used Generate; absent when none did.
    pub hits_given_generate: Option<f64>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl Aggregates {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let hits = records.iter().filter(|r| r.hit == 1).count();
        let gen: Vec<&SampleRecord> = records.iter().filter(|r| r.generate_action_used).collect();
        let gen_hits = gen.iter().filter(|r| r.hit == 1).count();
        Aggregates {
            samples: records.len(),
            hits,
            hits_at_1: pct(hits, records.len()),
            generate_count: gen.len(),
            generate_ratio: pct(gen.len(), records.len()),
            hits_given_generate: (!gen.is_empty()).then(|| pct(gen_hits, gen.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    /// Row name in merged tables, e.g. a model or method name.
    pub label: String,
    pub kg_level: KgLevel,
    pub mode: HitsMode,
    pub use_aliases: bool,
    pub seed: u64,
    pub config_digest: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub records: Vec<SampleRecord>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_records(&self.records) == self.aggregates
    }

    /// One-row table in the merged layout.
    pub fn to_table(&self) -> String {
        merge_table(std::slice::from_ref(self)).expect("one report always merges")
    }
}

/// One line of the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub seed: u64,
    pub config_digest: String,
    pub kg_level: KgLevel,
    #[serde(flatten)]
    pub result: AgentResult,
}

/// Hex SHA-256 of the canonical JSON form of a config value.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let v = serde_json::to_value(config).expect("config serializes");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Hex SHA-256 of raw bytes, used to pin input files in run digests.
pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunSpec<'a> {
    pub label: &'a str,
    pub seed: u64,
    pub config_digest: &'a str,
    pub agent: &'a AgentConfig,
    pub eval: EvalConfig,
    pub parallelism: usize,
}

/// Answer every retained sample and score it. With drop lists, only samples
/// that have one are run, each on its own view; otherwise every sample runs
/// on the complete graph. Output order is by sample id regardless of
/// parallelism.
pub fn run_benchmark(
    dataset: &[BenchmarkSample],
    graph: &KnowledgeGraph,
    droplists: Option<&[DropList]>,
    gateway: &Gateway,
    spec: &RunSpec<'_>,
) -> Result<(RunReport, Vec<TraceRecord>), EvalError> {
    let by_id: BTreeMap<&str, &BenchmarkSample> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    let (level, jobs): (KgLevel, Vec<(&BenchmarkSample, Option<&DropList>)>) = match droplists {
        None => (KgLevel::Complete, by_id.values().map(|s| (*s, None)).collect()),
        Some(lists) => {
            let p = lists.first().map_or(0.0, |d| d.drop_prob);
            let mut jobs = Vec::new();
            for d in lists {
                let s = by_id
                    .get(d.sample_id.as_str())
                    .ok_or_else(|| EvalError::UnknownSample(d.sample_id.clone()))?;
                jobs.push((*s, Some(d)));
            }
            jobs.sort_by(|a, b| a.0.id.cmp(&b.0.id));
            (KgLevel::from_drop_prob(p), jobs)
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let agent = Agent::new(gateway, spec.agent);
    let results: Vec<(SampleRecord, TraceRecord)> = pool.install(|| {
        jobs.par_iter()
            .map(|(sample, drops)| {
                let view = match drops {
                    Some(d) => d.view(graph),
                    None => graph.view(),
                };
                let result = agent.answer(&sample.question, &sample.topic_entities, &view);
                if let Termination::Error { error, message } = &result.termination {
                    tracing::warn!(sample = %sample.id, error, message, "agent run failed");
                }
                let record = SampleRecord {
                    id: sample.id.clone(),
                    predicted: result.answers.clone(),
                    gold: sample.answers.iter().map(|a| a.label.clone()).collect(),
                    hit: hits_at_1(&result.answers, &sample.answers, spec.eval),
                    termination: result.termination.clone(),
                    steps: result.steps.len(),
                    generate_action_used: result.used_generate(),
                    error_class: None,
                };
                let trace = TraceRecord {
                    id: sample.id.clone(),
                    seed: spec.seed,
                    config_digest: spec.config_digest.to_string(),
                    kg_level: level,
                    result,
                };
                (record, trace)
            })
            .collect()
    });
    let (records, traces): (Vec<SampleRecord>, Vec<TraceRecord>) = results.into_iter().unzip();
    let report = RunReport {
        header: ReportHeader {
            label: spec.label.to_string(),
            kg_level: level,
            mode: spec.eval.mode,
            use_aliases: spec.eval.use_aliases,
            seed: spec.seed,
            config_digest: spec.config_digest.to_string(),
            backend: gateway.backend_id(),
        },
        aggregates: Aggregates::from_records(&records),
        records,
    };
    Ok((report, traces))
}

/// Hits@1 table with one row per label and one column per graph level.
pub fn merge_table(reports: &[RunReport]) -> Result<String, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    if let Some(other) = reports.iter().find(|r| r.header.mode != first.header.mode) {
        return Err(EvalError::MixedModes(first.header.mode, other.header.mode));
    }
    let mut levels: Vec<KgLevel> = Vec::new();
    let mut rows: Vec<&str> = Vec::new();
    for r in reports {
        if !levels.contains(&r.header.kg_level) {
            levels.push(r.header.kg_level);
        }
        if !rows.contains(&r.header.label.as_str()) {
            rows.push(&r.header.label);
        }
    }
    levels.sort_by(|a, b| a.order().total_cmp(&b.order()));
    let mut cells: BTreeMap<(&str, String), f64> = BTreeMap::new();
    for r in reports {
        cells.insert((&r.header.label, r.header.kg_level.to_string()), r.aggregates.hits_at_1);
    }
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Method");
    for l in &levels {
        out.push_str(&format!("  {:>8}", l.to_string()));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{row:<width$}"));
        for l in &levels {
            match cells.get(&(row, l.to_string())) {
                Some(v) => out.push_str(&format!("  {v:>8.1}")),
                None => out.push_str(&format!("  {:>8}", "-")),
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("Hits@1 (%), mode {}\n", first.header.mode));
    Ok(out)
}
