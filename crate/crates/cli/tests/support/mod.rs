//! Fixture locations, walkthrough scripts, the synthetic benchmark, and a
//! rule-based backend that plays the agent's model on synthetic questions.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, OnceLock};

use regex::Regex;

use kgqa::agent::{check_trace, Agent, AgentConfig, AgentResult};
use kgqa::dataset::{Answer, BenchmarkSample};
use kgqa::ikg::DropList;
use kgqa::kg::{EntityId, KnowledgeGraph};
use kgqa::llm::{Completion, Gateway, LlmBackend, LlmError, LlmRequest, PromptSet, Script, SequenceBackend, TemplateName};

use TemplateName::{FilterRelations as F, GenerateTriples as G, GogInstruction as Gog, LinkEntity as L, VerifyTriples as V};

pub const SEED: u64 = 42;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(rel: &str) -> PathBuf {
    fixtures().join(rel)
}

pub fn kgqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgqa"))
        .args(args)
        .output()
        .expect("kgqa binary runs")
}

pub fn kgqa_ok(args: &[&str]) -> Output {
    let out = kgqa(args);
    assert!(
        out.status.success(),
        "kgqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Scripted model turns for the Apple walkthrough on the complete graph.
pub fn apple_ckg_queue() -> Vec<(TemplateName, &'static str)> {
    vec![
        (Gog, "Thought 1: I need to find out where is the Apple's headquarters.\nAction 1: Search[Apple Inc]"),
        (F, "[business.company.headquarter]"),
        (Gog, "Thought 2: Apple's headquarters is in Cupertino, so I need to find out what Cupertino is related to.\nAction 2: Search[Cupertino]"),
        (F, "[location.location.located_in, location.location.adjoin]"),
        (Gog, "Thought 3: Cupertino is located in California and adjoins Palo Alto, but I still need the timezone of Cupertino.\nAction 3: Search[Cupertino]"),
        (F, "[location.location.timezone]"),
        (Gog, "Thought 4: Cupertino is in the Pacific Standard Time zone.\nAction 4: Finish[Pacific Standard Time]"),
    ]
}

/// The same walkthrough when the timezone triple is missing.
pub fn apple_ikg_queue() -> Vec<(TemplateName, &'static str)> {
    vec![
        (Gog, "Thought 1: I need to find out where is the Apple's headquarters.\nAction 1: Search[Apple Inc]"),
        (F, "[business.company.headquarter]"),
        (Gog, "Thought 2: Apple's headquarters is in Cupertino, so I need to find out what Cupertino is related to.\nAction 2: Search[Cupertino]"),
        (F, "[location.location.located_in, location.location.adjoin]"),
        (Gog, "Thought 3: Cupertino is located in California and adjoins Palo Alto, but there is no timezone for Cupertino, so I will generate it.\nAction 3: Generate[What is the timezone of Cupertino]"),
        (G, "(Cupertino, location.location.timezone, Pacific Standard Time)"),
        (G, "(Cupertino, location.location.timezone, Pacific Standard Time)\n(Palo Alto, location.location.timezone, Pacific Standard Time)"),
        (G, "(Cupertino, timezone, Pacific Time Zone)"),
        (V, "[(Cupertino, location.location.timezone, Pacific Standard Time)]"),
        (L, "[m.pst]"),
        (Gog, "Thought 4: Cupertino is in the Pacific Standard Time zone.\nAction 4: Finish[Pacific Standard Time]"),
    ]
}

pub fn appalachian_queue() -> Vec<(TemplateName, &'static str)> {
    vec![
        (Gog, "Thought 1: I need to find where the Appalachian Mountains are located.\nAction 1: Search[Appalachian Mountains]"),
        (F, "[location.location.contains, geography.mountain.mountain_range]"),
        (Gog, "Thought 2: The graph only lists peaks of the range, not where it runs, so I will generate that knowledge.\nAction 2: Generate[where do the Appalachian Mountains run]"),
        (G, "(Appalachian Mountains, geographical_feature.contains_location, Blue Ridge Mountains)\n(Appalachian Mountains, geographical_feature.start_location, Alabama)"),
        (G, "(Appalachian Mountains, location.location.containedby, North America)\n(Appalachian Mountains, geographical_feature.start_location, Alabama)"),
        (G, "(Appalachian Mountains, location.location.containedby, North America)"),
        (V, "[(Appalachian Mountains, geographical_feature.start_location, Alabama), (Appalachian Mountains, location.location.containedby, North America)]"),
        (L, "[m.alabama]"),
        (L, "[m.north_america]"),
        (Gog, "Thought 3: The Appalachian Mountains start in Alabama and lie in North America.\nAction 3: Finish[Alabama | North America]"),
    ]
}

/// Run one question against a queue and return the result plus the script
/// recorded from its exchanges.
pub fn record(
    g: &KnowledgeGraph,
    sample: &BenchmarkSample,
    drops: Option<&DropList>,
    queue: Vec<(TemplateName, &str)>,
) -> (AgentResult, Script) {
    let backend = Arc::new(SequenceBackend::new(queue));
    let gw = Gateway::new(PromptSet::default(), backend.clone());
    let view = match drops {
        Some(d) => d.view(g),
        None => g.view(),
    };
    let cfg = AgentConfig::default();
    let result = Agent::new(&gw, &cfg).answer(&sample.question, &sample.topic_entities, &view);
    check_trace(&result, &view).expect("trace is grounded");
    assert_eq!(backend.remaining(), 0, "queue not fully consumed: {:#?}", result.termination);
    let script = Script::from_exchanges(&result.exchanges);
    (result, script)
}

pub const SYNTHETIC_SIZE: usize = 30;

/// Hops on the gold path of synthetic sample `i`; also its crucial-triple
/// count, since every hop binds exactly one edge.
pub fn synthetic_hops(i: usize) -> usize {
    1 + i % 3
}

struct SynPath {
    ids: Vec<String>,
    labels: Vec<String>,
}

fn synthetic_path(i: usize) -> SynPath {
    let hops = synthetic_hops(i);
    let mut ids = vec![format!("m.syn{i}_topic")];
    let mut labels = vec![format!("Topic {i}")];
    for j in 1..hops {
        ids.push(format!("m.syn{i}_n{j}"));
        labels.push(format!("Node {i}-{j}"));
    }
    ids.push(format!("m.syn{i}_answer"));
    labels.push(format!("Answer {i}"));
    SynPath { ids, labels }
}

/// Graph of 30 chains. Each topic also has two decoy neighbors, and every
/// fourth sample has a parallel edge next to its first hop.
pub fn synthetic_graph_tsv() -> String {
    let mut out = String::from("# Synthetic chains for benchmark tests.\n");
    let mut labels = Vec::new();
    for i in 0..SYNTHETIC_SIZE {
        let p = synthetic_path(i);
        for j in 1..p.ids.len() {
            out.push_str(&format!("{}\tsyn.path.hop{j}\t{}\n", p.ids[j - 1], p.ids[j]));
        }
        if i % 4 == 0 {
            out.push_str(&format!("{}\tsyn.path.shortcut\t{}\n", p.ids[0], p.ids[1]));
        }
        for k in 0..2 {
            let d = format!("m.syn{i}_decoy{k}");
            out.push_str(&format!("{}\tsyn.misc.related\t{d}\n", p.ids[0]));
            labels.push((d, format!("Decoy {i}-{k}")));
        }
        out.push_str(&format!("{}\tsyn.misc.year\t{}\n", p.ids[0], 1900 + i));
        labels.extend(p.ids.into_iter().zip(p.labels));
    }
    for (id, label) in labels {
        out.push_str(&format!("@label\t{id}\t{label}\n"));
    }
    out
}

pub fn synthetic_question(i: usize) -> String {
    format!("Which entity is reached from Topic {i} by following its path to the end?")
}

pub fn synthetic_dataset() -> Vec<BenchmarkSample> {
    (0..SYNTHETIC_SIZE)
        .map(|i| {
            let p = synthetic_path(i);
            let n = p.ids.len();
            let var = |j: usize| if j == n - 1 { "?x".to_string() } else { format!("?y{j}") };
            let mut body = String::new();
            for j in 1..n {
                let s = if j == 1 { format!("ns:{}", p.ids[0]) } else { var(j - 1) };
                body.push_str(&format!("  {s} ns:syn.path.hop{j} {} .\n", var(j)));
            }
            BenchmarkSample {
                id: format!("syn-{i:02}"),
                question: synthetic_question(i),
                topic_entities: BTreeMap::from([(EntityId::new(&p.ids[0]).unwrap(), p.labels[0].clone())]),
                answers: vec![Answer {
                    id: Some(p.ids[n - 1].clone()),
                    label: p.labels[n - 1].clone(),
                    aliases: vec![],
                }],
                gold_query: format!("PREFIX ns: <http://rdf.freebase.com/ns/>\nSELECT DISTINCT ?x WHERE {{\n{body}}}"),
            }
        })
        .collect()
}

pub fn synthetic_dataset_jsonl() -> String {
    synthetic_dataset()
        .iter()
        .map(|s| serde_json::to_string(s).unwrap() + "\n")
        .collect()
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).unwrap())
}

/// Answers synthetic questions the way a careful model would: walk the
/// path with Search, generate a hop when the graph lacks it, and finish
/// once the end of the path has been observed.
pub struct PathPolicy {
    paths: HashMap<String, Vec<String>>,
    /// (label, hop) → next label.
    next: HashMap<(String, usize), String>,
    /// label → hop it leaves by.
    position: HashMap<String, usize>,
}

impl Default for PathPolicy {
    fn default() -> Self {
        let mut paths = HashMap::new();
        let mut next = HashMap::new();
        let mut position = HashMap::new();
        for i in 0..SYNTHETIC_SIZE {
            let p = synthetic_path(i);
            for j in 1..p.labels.len() {
                next.insert((p.labels[j - 1].clone(), j), p.labels[j].clone());
                position.insert(p.labels[j - 1].clone(), j);
            }
            paths.insert(synthetic_question(i), p.labels);
        }
        PathPolicy { paths, next, position }
    }
}

impl PathPolicy {
    fn step(&self, slots: &BTreeMap<String, String>) -> String {
        static SEARCH: OnceLock<Regex> = OnceLock::new();
        static GENERATE: OnceLock<Regex> = OnceLock::new();
        let path = &self.paths[&slots["Question"]];
        let history = slots.get("History").map_or("", String::as_str);
        let step = &slots["Step"];
        let mut seen = BTreeSet::new();
        for line in history.lines() {
            if line.starts_with("Thought ") || line.starts_with("Action ") {
                continue;
            }
            let body = line.split_once(": ").filter(|(h, _)| h.starts_with("Observation ")).map_or(line, |(_, b)| b);
            seen.extend(body.split(", ").map(str::to_string));
        }
        let searched: BTreeSet<&str> = re(&SEARCH, r"Action \d+: Search\[([^\]]*)\]")
            .captures_iter(history)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let generated: BTreeSet<&str> = re(&GENERATE, r"Action \d+: Generate\[([^\]]*)\]")
            .captures_iter(history)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let end = path.last().unwrap();
        let action = if seen.contains(end) {
            format!("Finish[{end}]")
        } else {
            let f = (0..path.len()).rev().find(|&j| j == 0 || seen.contains(&path[j])).unwrap();
            let ask = format!("what is the hop{} of {}", f + 1, path[f]);
            if !searched.contains(path[f].as_str()) {
                format!("Search[{}]", path[f])
            } else if !generated.contains(ask.as_str()) {
                format!("Generate[{ask}]")
            } else {
                "Finish[unknown]".to_string()
            }
        };
        format!("Thought {step}: I follow the path one hop at a time.\nAction {step}: {action}")
    }

    fn filter(&self, slots: &BTreeMap<String, String>) -> String {
        let wanted = self.position.get(&slots["Entity"]).map(|j| format!("syn.path.hop{j}"));
        match wanted {
            Some(r) if slots["List of Relations"].contains(&r) => format!("[{r}]"),
            _ => "[]".into(),
        }
    }

    fn generate(&self, slots: &BTreeMap<String, String>) -> String {
        static ASK: OnceLock<Regex> = OnceLock::new();
        let Some(c) = re(&ASK, r"hop(\d+) of (.+)$").captures(&slots["Thought"]) else {
            return "no idea".into();
        };
        let hop: usize = c[1].parse().unwrap();
        match self.next.get(&(c[2].to_string(), hop)) {
            Some(tail) => format!("({}, syn.path.hop{hop}, {tail})", &c[2]),
            None => "no idea".into(),
        }
    }

    fn verify(&self, slots: &BTreeMap<String, String>) -> String {
        static GROUP: OnceLock<Regex> = OnceLock::new();
        let groups: Vec<&str> = re(&GROUP, r"\([^()\n]*\)")
            .find_iter(&slots["Generated triples"])
            .map(|m| m.as_str())
            .collect();
        format!("[{}]", groups.join(", "))
    }

    fn link(&self, slots: &BTreeMap<String, String>) -> String {
        static CAND: OnceLock<Regex> = OnceLock::new();
        let mention = &slots["Mention"];
        re(&CAND, r"(?m)^\d+\. (\S+): (.*) \(types:")
            .captures_iter(&slots["Candidates"])
            .find(|c| &c[2] == mention)
            .map_or_else(|| "[none]".into(), |c| format!("[{}]", &c[1]))
    }
}

impl LlmBackend for PathPolicy {
    fn id(&self) -> String {
        "path-policy".into()
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let s = &req.slots;
        let text = match req.template {
            Gog => self.step(s),
            F => self.filter(s),
            G => self.generate(s),
            V => self.verify(s),
            L => self.link(s),
        };
        Ok(Completion::text(text))
    }
}
