use std::sync::Arc;

use super::*;
use crate::kg::KnowledgeGraph;
use crate::llm::{PromptSet, SequenceBackend};

use TemplateName::{FilterRelations as F, GenerateTriples as G, GogInstruction as Gog, LinkEntity as L, VerifyTriples as V};

const APPLE: &str = "\
m.apple\tbusiness.company.founder\tm.jobs
m.apple\tbusiness.company.headquarter\tm.cupertino
m.apple\tbusiness.company.ceo\tm.cook
m.cupertino\tlocation.location.located_in\tm.california
m.cupertino\tlocation.location.adjoin\tm.paloalto
m.cupertino\tlocation.location.timezone\tm.pst
@label\tm.apple\tApple Inc
@label\tm.jobs\tSteve Jobs
@label\tm.cook\tTim Cook
@label\tm.cupertino\tCupertino
@label\tm.california\tCalifornia
@label\tm.paloalto\tPalo Alto
@label\tm.pst\tPacific Standard Time
";

const QUESTION: &str = "What is the timezone of the area where Apple headquarters is located?";

fn e(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

fn tr(h: &str, r: &str, t: &str) -> Triple {
    Triple::parse(h, r, t).unwrap()
}

fn topics(pairs: &[(&str, &str)]) -> BTreeMap<EntityId, String> {
    pairs.iter().map(|(id, l)| (e(id), l.to_string())).collect()
}

fn run_with(
    g: &KnowledgeGraph,
    removed: &[Triple],
    topic: &BTreeMap<EntityId, String>,
    queue: Vec<(TemplateName, &str)>,
    cfg: &AgentConfig,
) -> (AgentResult, Arc<SequenceBackend>) {
    let backend = Arc::new(SequenceBackend::new(queue));
    let gw = Gateway::new(PromptSet::default(), backend.clone());
    let view = g.without(removed);
    let result = Agent::new(&gw, cfg).answer(QUESTION, topic, &view);
    check_trace(&result, &view).unwrap();
    (result, backend)
}

fn observed(r: &AgentResult, step: usize) -> Vec<Triple> {
    r.steps[step].observation.iter().map(|o| o.triple.clone()).collect()
}

#[test]
fn complete_graph_walkthrough() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let queue = vec![
        (Gog, "Thought 1: I need to find out where is the Apple's headquarters.\nAction 1: Search[Apple Inc]"),
        (F, "[business.company.headquarter]"),
        (Gog, "Thought 2: Apple's headquarters is in Cupertino, so I need to find where Cupertino is.\nAction 2: Search[Cupertino]"),
        (F, "[location.location.located_in, location.location.adjoin]"),
        (Gog, "Thought 3: I still need the timezone of Cupertino.\nAction 3: Search[Cupertino]"),
        (F, "[location.location.timezone]"),
        (Gog, "Thought 4: Cupertino is in the Pacific Standard Time zone.\nAction 4: Finish[Pacific Standard Time]"),
    ];
    let (r, backend) = run_with(&g, &[], &topics(&[("m.apple", "Apple Inc")]), queue, &AgentConfig::default());
    assert_eq!(r.termination, Termination::Finished);
    assert_eq!(r.answers, ["Pacific Standard Time"]);
    assert_eq!(r.steps.len(), 4);
    assert_eq!(observed(&r, 0), [tr("m.apple", "business.company.headquarter", "m.cupertino")]);
    assert_eq!(observed(&r, 2), [tr("m.cupertino", "location.location.timezone", "m.pst")]);
    assert!(!r.used_generate());
    assert_eq!(r.support[0].triples[0].source, Source::Kg);
    assert_eq!(backend.remaining(), 0);
    assert_eq!(r.wall_time_ms, None);
    // The observation reaches the next prompt verbalized.
    let second = &r.exchanges[2].prompt;
    assert!(second.contains("Observation 1: Apple Inc, headquarter, Cupertino\nThought 2:"), "{second}");
}

#[test]
fn generate_fills_the_missing_triple() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let dropped = [tr("m.cupertino", "location.location.timezone", "m.pst")];
    let queue = vec![
        (Gog, "Thought 1: I need to find out where is the Apple's headquarters.\nAction 1: Search[Apple Inc]"),
        (F, "[business.company.headquarter]"),
        (Gog, "Thought 2: I need to find the timezone of Cupertino.\nAction 2: Search[Cupertino]"),
        (F, "[location.location.located_in, location.location.adjoin]"),
        (Gog, "Thought 3: No timezone is given, so I will generate it.\nAction 3: Generate[What is the timezone of Cupertino]"),
        (G, "(Cupertino, location.location.timezone, Pacific Standard Time)"),
        (G, "(Cupertino, timezone, Pacific Standard Time)\n(Cupertino, location.location.population, 60000)"),
        (G, "(Cupertino, location.location.timezone, Pacific Standard Time)"),
        (V, "[(Cupertino, location.location.timezone, Pacific Standard Time)]"),
        (L, "[m.pst]"),
        (Gog, "Thought 4: The timezone is Pacific Standard Time.\nAction 4: Finish[Pacific Standard Time]"),
    ];
    let cfg = AgentConfig {
        choose_k: 2,
        ..Default::default()
    };
    let (r, backend) = run_with(&g, &dropped, &topics(&[("m.apple", "Apple Inc")]), queue, &cfg);
    assert_eq!(r.answers, ["Pacific Standard Time"]);
    assert_eq!(r.steps.iter().filter(|s| matches!(s.action, Action::Generate(_))).count(), 1);
    assert_eq!(observed(&r, 2), dropped);
    assert_eq!(r.steps[2].observation[0].source, Source::Generated);
    assert_eq!(r.generated.len(), 1);
    assert_eq!(r.support[0].triples[0].source, Source::Generated);
    assert_eq!(backend.remaining(), 0);
    // Choosing picks the two Cupertino triples from the latest observation.
    let gen = r.exchanges.iter().find(|x| x.template == G).unwrap();
    assert_eq!(
        gen.slots["Explored Triples"],
        "(Cupertino, adjoin, Palo Alto)\n(Cupertino, located in, California)"
    );
    let verify = r.exchanges.iter().find(|x| x.template == V).unwrap();
    assert_eq!(verify.slots["Generated triples"].lines().count(), 3);
}

#[test]
fn relation_filter_paths() {
    let g = KnowledgeGraph::parse_tsv(
        "m.a\tr.only\tm.b\nm.c\tr.x\tm.d\nm.c\tr.y\tm.e\n@label\tm.a\tA\n@label\tm.c\tC\n",
    )
    .unwrap();
    let cfg = AgentConfig {
        max_steps: 3,
        ..Default::default()
    };
    let queue = vec![
        (Gog, "Action 1: Search[A]"),
        (Gog, "Action 2: Search[C]"),
        (F, "[r.invented]"),
        (Gog, "Action 3: Search[C]"),
        (F, "[]"),
    ];
    let (r, backend) = run_with(&g, &[], &topics(&[("m.a", "A")]), queue, &cfg);
    // Single relation: no filter call; hallucination: fallback; empty list: nothing.
    assert_eq!(observed(&r, 0), [tr("m.a", "r.only", "m.b")]);
    assert_eq!(observed(&r, 1).len(), 2);
    assert!(r.steps[1].log[0].contains("fallback") || r.steps[1].log[0].contains("using first"));
    assert!(observed(&r, 2).is_empty());
    assert_eq!(r.termination, Termination::StepBudget);
    assert!(r.answers.is_empty());
    assert_eq!(backend.remaining(), 0);
}

#[test]
fn unknown_entity_and_empty_generation() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let queue = vec![
        (Gog, "Action 1: Search[Atlantis]"),
        (Gog, "Action 2: Generate[where is Atlantis]"),
        (G, "I am not sure."),
        (G, "nothing"),
        (G, ""),
        (Gog, "Action 3: Finish[Pacific Standard Time]"),
    ];
    let (r, backend) = run_with(&g, &[], &topics(&[("m.apple", "Apple Inc")]), queue, &AgentConfig::default());
    assert_eq!(r.steps[0].notes, ["no such entity: Atlantis"]);
    assert_eq!(r.steps[1].notes, [NO_KNOWLEDGE]);
    assert!(r.exchanges.iter().all(|x| x.template != V));
    assert_eq!(backend.remaining(), 0);
    assert!(r.exchanges[1].prompt.contains("Observation 1: no such entity: Atlantis"));
}

#[test]
fn cvt_answers_are_reprompted_then_stripped() {
    let g = KnowledgeGraph::parse_tsv(
        "m.bp\tpeople.person.education\tm.0h3d7qj\nm.0h3d7qj\teducation.education.institution\tm.belmont\n\
         @label\tm.bp\tBrad Paisley\n@label\tm.belmont\tBelmont University\n",
    )
    .unwrap();
    let queue = vec![
        (Gog, "Action 1: Finish[m.0h3d7qj]"),
        (Gog, "Action 1: Finish[m.0h3d7qj | Belmont University]"),
    ];
    let (r, _) = run_with(&g, &[], &topics(&[("m.bp", "Brad Paisley")]), queue, &AgentConfig::default());
    assert_eq!(r.answers, ["Belmont University"]);
    assert!(r.exchanges[1].slots["Feedback"].contains("m.0h3d7qj"));
    assert!(r.exchanges[1].prompt.contains("CVT nodes"));
    assert!(r.answers.iter().all(|a| !is_cvt_answer(a, &g.view())));
}

#[test]
fn parse_failures_end_the_run() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let queue = vec![(Gog, "I think it is Paris."), (Gog, "Still Paris.")];
    let (r, _) = run_with(&g, &[], &topics(&[("m.apple", "Apple Inc")]), queue, &AgentConfig::default());
    assert!(matches!(&r.termination, Termination::Error { error, .. } if error == "parse_failure"));
    assert_eq!(r.exchanges.len(), 2);
}

#[test]
fn backend_errors_keep_partial_trace() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let queue = vec![(Gog, "Action 1: Search[Apple Inc]"), (F, "[business.company.ceo]")];
    let (r, _) = run_with(&g, &[], &topics(&[("m.apple", "Apple Inc")]), queue, &AgentConfig::default());
    assert!(matches!(&r.termination, Termination::Error { error, .. } if error == "llm"));
    assert_eq!(r.steps.len(), 1);
    assert_eq!(r.exchanges.len(), 2);
}

#[test]
fn rollback_then_exhaustion() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let queue = vec![
        (Gog, "Action 1: Search[Apple Inc]"),
        (F, "[business.company.headquarter]"),
        (Gog, "Thought 2: I cannot tell.\nAction 2: Finish[unknown]"),
        (F, "[location.location.timezone]"),
        (Gog, "Action 3: Finish[unknown]"),
    ];
    let cfg = AgentConfig {
        max_rollbacks: 1,
        ..Default::default()
    };
    let (r, backend) = run_with(&g, &[], &topics(&[("m.apple", "Apple Inc")]), queue, &cfg);
    assert_eq!(r.termination, Termination::RollbackExhausted);
    assert_eq!(r.answers, ["unknown"]);
    assert_eq!(r.rollbacks, 1);
    assert_eq!(
        observed(&r, 1),
        [
            tr("m.apple", "business.company.headquarter", "m.cupertino"),
            tr("m.cupertino", "location.location.timezone", "m.pst"),
        ]
    );
    assert_eq!(backend.remaining(), 0);
}

#[test]
fn linking_and_minting() {
    let g = KnowledgeGraph::parse_tsv(
        "m.mtl\tlocation.location.containedby\tm.canada_region\nm.qc\tlocation.location.contains\tm.qcity\n\
         m.qcity\tlocation.location.containedby\tm.qc\n\
         @label\tm.mtl\tMontreal\n@label\tm.qc\tQuebec\n@label\tm.qcity\tQuebec City\n",
    )
    .unwrap();
    let queue = vec![
        (Gog, "Action 1: Generate[which Canadian province is Montreal in]"),
        (G, "(Montreal, location.located_in, Quebec)\n(Quebec, country_part, Dominion of Elsewhere)"),
        (V, "[(Montreal, location.located_in, Quebec), (Quebec, country_part, Dominion of Elsewhere)]"),
        (L, "[m.qc]"),
        (Gog, "Action 2: Finish[Quebec]"),
    ];
    let cfg = AgentConfig {
        generate_n: 1,
        ..Default::default()
    };
    let (r, backend) = run_with(&g, &[], &topics(&[("m.mtl", "Montreal")]), queue, &cfg);
    assert_eq!(
        observed(&r, 0),
        [
            tr("m.mtl", "location.located_in", "m.qc"),
            tr("m.qc", "country_part", "Dominion of Elsewhere"),
        ]
    );
    let link = r.exchanges.iter().find(|x| x.template == L).unwrap();
    assert!(link.slots["Candidates"].starts_with("1. m.qc: Quebec"));
    assert_eq!(backend.remaining(), 0);
    assert_eq!(r.answers, ["Quebec"]);
}

#[test]
fn result_round_trips_and_repeats() {
    let g = KnowledgeGraph::parse_tsv(APPLE).unwrap();
    let mk = || {
        vec![
            (Gog, "Action 1: Search[Apple Inc]"),
            (F, "[business.company.headquarter]"),
            (Gog, "Action 2: Finish[Cupertino]"),
        ]
    };
    let t = topics(&[("m.apple", "Apple Inc")]);
    let (a, _) = run_with(&g, &[], &t, mk(), &AgentConfig::default());
    let (b, _) = run_with(&g, &[], &t, mk(), &AgentConfig::default());
    let ja = serde_json::to_string(&a).unwrap();
    assert_eq!(ja, serde_json::to_string(&b).unwrap());
    let back: AgentResult = serde_json::from_str(&ja).unwrap();
    assert_eq!(back, a);
}
