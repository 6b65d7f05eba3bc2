//! Thought / Action / Observation loop over a graph view, with an overlay
//! of model-generated triples.

pub mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, GraphView, Term, Triple};
use crate::llm::{DecodingParams, Gateway, LlmError, LlmExchange, Slots, TemplateName};
use crate::retrieval::{bm25_rank, term_text, verbalize, Bm25Params, Corpus, LabelIndex};

pub use parse::{parse_action, Action, ParseError, TextTriple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub max_rollbacks: usize,
    /// Relations kept per searched entity.
    pub relations_top_n: usize,
    /// Observed triples handed to triple generation.
    pub choose_k: usize,
    /// Generation draws per Generate action.
    pub generate_n: usize,
    /// Candidates shown when linking an entity mention.
    pub link_k: usize,
    /// Most triples a rollback re-search may return.
    pub rollback_cap: usize,
    pub decoding: DecodingParams,
    pub bm25: Bm25Params,
    /// Record elapsed time in results. Off for replayed runs so output
    /// bytes stay reproducible.
    pub record_wall_time: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_steps: 8,
            max_rollbacks: 2,
            relations_top_n: 3,
            choose_k: 5,
            generate_n: 3,
            link_k: 5,
            rollback_cap: 50,
            decoding: DecodingParams::default(),
            bm25: Bm25Params::default(),
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Kg,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObservedTriple {
    pub triple: Triple,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTriple {
    pub triple: Triple,
    /// Step whose Generate action produced it.
    pub step: usize,
    /// The model's surface form before linking.
    pub text: TextTriple,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub thought: String,
    pub action: Action,
    pub observation: Vec<ObservedTriple>,
    /// Extra observation lines shown to the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Internal events such as fallbacks; not shown to the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Finished,
    StepBudget,
    RollbackExhausted,
    Error { error: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSupport {
    pub answer: String,
    pub triples: Vec<ObservedTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResult {
    pub answers: Vec<String>,
    pub termination: Termination,
    pub steps: Vec<Step>,
    pub support: Vec<AnswerSupport>,
    pub generated: Vec<GeneratedTriple>,
    pub rollbacks: usize,
    pub exchanges: Vec<LlmExchange>,
    pub wall_time_ms: Option<u64>,
}

impl AgentResult {
    pub fn used_generate(&self) -> bool {
        self.steps.iter().any(|s| matches!(s.action, Action::Generate(_)))
    }
}

/// Every observed triple is either visible in `view` (source `kg`) or was
/// produced by an earlier Generate action (source `generated`).
pub fn check_trace(result: &AgentResult, view: &GraphView<'_>) -> Result<(), String> {
    for step in &result.steps {
        for o in &step.observation {
            let ok = match o.source {
                Source::Kg => view.contains(&o.triple),
                Source::Generated => result
                    .generated
                    .iter()
                    .any(|g| g.triple == o.triple && g.step <= step.index),
            };
            if !ok {
                return Err(format!("step {}: unsupported {:?} triple {}", step.index, o.source, o.triple));
            }
        }
    }
    Ok(())
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Machine id without a label, which names an event node rather than an
/// answer.
pub fn is_cvt_answer(answer: &str, view: &GraphView<'_>) -> bool {
    EntityId::new(answer.trim()).is_ok_and(|e| view.is_cvt(&e))
}

const GOG_STOP: &[&str] = &["\nObservation"];
const NO_KNOWLEDGE: &str = "no new knowledge generated";

pub struct Agent<'a> {
    gateway: &'a Gateway,
    config: &'a AgentConfig,
}

impl<'a> Agent<'a> {
    pub fn new(gateway: &'a Gateway, config: &'a AgentConfig) -> Self {
        Agent { gateway, config }
    }

    pub fn answer(
        &self,
        question: &str,
        topics: &BTreeMap<EntityId, String>,
        view: &GraphView<'_>,
    ) -> AgentResult {
        let started = Instant::now();
        let mut run = Run {
            agent: self,
            question,
            topics,
            view,
            steps: Vec::new(),
            overlay: Vec::new(),
            exchanges: Vec::new(),
            last_targets: Vec::new(),
            selected: BTreeMap::new(),
            rollbacks: 0,
            labels: None,
            log: Vec::new(),
        };
        let (answers, termination) = match run.drive() {
            Ok(done) => done,
            Err(e) => (Vec::new(), error_termination(&e)),
        };
        let support = run.support(&answers);
        AgentResult {
            answers,
            termination,
            support,
            steps: run.steps,
            generated: run.overlay,
            rollbacks: run.rollbacks,
            exchanges: run.exchanges,
            wall_time_ms: self
                .config
                .record_wall_time
                .then(|| started.elapsed().as_millis() as u64),
        }
    }
}

fn error_termination(e: &RunError) -> Termination {
    let error = match e {
        RunError::Parse(_) => "parse_failure",
        RunError::Llm(LlmError::ScriptMiss { .. }) => "script_miss",
        RunError::Llm(LlmError::OverBudget { .. }) => "over_budget",
        RunError::Llm(_) => "llm",
    };
    Termination::Error {
        error: error.into(),
        message: e.to_string(),
    }
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{0}")]
    Parse(ParseError),
}

struct Run<'a, 'v, 'g> {
    agent: &'a Agent<'a>,
    question: &'a str,
    topics: &'a BTreeMap<EntityId, String>,
    view: &'v GraphView<'g>,
    steps: Vec<Step>,
    overlay: Vec<GeneratedTriple>,
    exchanges: Vec<LlmExchange>,
    last_targets: Vec<EntityId>,
    /// Relations chosen for each searched entity, reused on rollback.
    selected: BTreeMap<EntityId, BTreeSet<String>>,
    rollbacks: usize,
    labels: Option<LabelIndex<'v, 'g>>,
    /// Events of the step in progress.
    log: Vec<String>,
}

type Outcome = (Vec<String>, Termination);

fn slots<const N: usize>(pairs: [(&str, String); N]) -> Slots {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl<'a, 'v, 'g> Run<'a, 'v, 'g> {
    fn config(&self) -> &'a AgentConfig {
        self.agent.config
    }

    fn call(&mut self, template: TemplateName, slots: Slots, params: &DecodingParams) -> Result<String, LlmError> {
        let x = self.agent.gateway.call(template, slots, params)?;
        let text = x.completion.clone();
        self.exchanges.push(x);
        Ok(text)
    }

    fn plain(&self) -> DecodingParams {
        self.config().decoding.clone()
    }

    fn display(&self, e: &EntityId) -> String {
        self.view.base().display(e).to_string()
    }

    fn text(&self, t: &Triple) -> String {
        verbalize(t, self.view)
    }

    fn history(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!("Thought {i}: {}\nAction {i}: {}\n", s.thought, s.action, i = s.index));
            let mut lines: Vec<String> = s.observation.iter().map(|o| self.text(&o.triple)).collect();
            lines.extend(s.notes.iter().cloned());
            if lines.is_empty() {
                lines.push("no triples found".into());
            }
            out.push_str(&format!("Observation {}: {}\n", s.index, lines.join("\n")));
        }
        out
    }

    fn drive(&mut self) -> Result<Outcome, RunError> {
        let topic_list = format!("[{}]", self.topics.values().cloned().collect::<Vec<_>>().join(", "));
        for index in 1..=self.config().max_steps {
            let (thought, action, notes) = self.next_action(index, &topic_list)?;
            let mut step = Step {
                index,
                thought: thought.clone(),
                action: action.clone(),
                observation: Vec::new(),
                notes,
                log: Vec::new(),
            };
            let mut finish = None;
            match &action {
                Action::Search(targets) => {
                    let (obs, notes) = self.search(targets, &thought)?;
                    step.observation = obs;
                    step.notes.extend(notes);
                }
                Action::Generate(arg) => {
                    let (obs, notes) = self.generate(arg, index)?;
                    step.observation = obs;
                    step.notes.extend(notes);
                }
                Action::Finish(answers) => {
                    finish = Some((answers.clone(), Termination::Finished));
                }
                Action::Unknown if self.rollbacks < self.config().max_rollbacks => {
                    self.rollbacks += 1;
                    self.log.push(format!("rollback {} of {}", self.rollbacks, self.config().max_rollbacks));
                    step.observation = self.rollback(&thought)?;
                }
                Action::Unknown => {
                    finish = Some((vec!["unknown".to_string()], Termination::RollbackExhausted));
                }
            }
            step.log = std::mem::take(&mut self.log);
            self.steps.push(step);
            if let Some(done) = finish {
                return Ok(done);
            }
        }
        Ok((Vec::new(), Termination::StepBudget))
    }

    /// Ask for the next thought and action, re-prompting once for an
    /// unparseable reply and once for CVT answers.
    fn next_action(&mut self, index: usize, topic_list: &str) -> Result<(String, Action, Vec<String>), RunError> {
        let params = self.config().decoding.clone().with_stop(GOG_STOP);
        let history = self.history();
        let mut feedback: Option<String> = None;
        let mut parse_retry = false;
        let mut cvt_retry = false;
        loop {
            let mut s = slots([
                ("Question", self.question.to_string()),
                ("List of Topic Entities", topic_list.to_string()),
                ("History", history.clone()),
                ("Step", index.to_string()),
            ]);
            if let Some(f) = &feedback {
                s.insert("Feedback".into(), f.clone());
            }
            let completion = self.call(TemplateName::GogInstruction, s, &params)?;
            let (thought, action) = match parse_action(&completion) {
                Ok(p) => p,
                Err(e) if !parse_retry => {
                    parse_retry = true;
                    self.log.push(format!("re-prompt: {e}"));
                    feedback = Some(format!(
                        "Your last reply had no valid action. Reply with Thought {index} and Action {index} using Search[...], Generate[...] or Finish[...].\n"
                    ));
                    continue;
                }
                Err(e) => return Err(RunError::Parse(e)),
            };
            let Action::Finish(answers) = &action else {
                return Ok((thought, action, Vec::new()));
            };
            let (cvt, kept): (Vec<String>, Vec<String>) =
                answers.iter().cloned().partition(|a| is_cvt_answer(a, self.view));
            if cvt.is_empty() {
                return Ok((thought, action, Vec::new()));
            }
            if !cvt_retry {
                cvt_retry = true;
                self.log.push(format!("re-prompt: CVT answers {}", cvt.join(", ")));
                feedback = Some(format!(
                    "{} are CVT nodes and cannot be final answers. Search them to find the entities they connect.\n",
                    cvt.join(", ")
                ));
                continue;
            }
            self.log.push(format!("dropped CVT answers {}", cvt.join(", ")));
            let action = if kept.is_empty() { Action::Unknown } else { Action::Finish(kept) };
            return Ok((thought, action, Vec::new()));
        }
    }

    fn overlay_touching<'s>(&'s self, e: &'s EntityId) -> impl Iterator<Item = &'s Triple> + 's {
        self.overlay.iter().map(|g| &g.triple).filter(move |t| t.touches(e))
    }

    fn relations_of(&self, e: &EntityId) -> BTreeSet<String> {
        self.view
            .relations_of(e)
            .into_iter()
            .map(|(r, _)| r)
            .chain(self.overlay_touching(e).map(|t| t.relation.clone()))
            .collect()
    }

    fn neighbors(&self, e: &EntityId, rels: &BTreeSet<String>) -> BTreeSet<ObservedTriple> {
        let mut out: BTreeSet<ObservedTriple> = self
            .view
            .neighbors(e, rels)
            .into_iter()
            .map(|triple| ObservedTriple { triple, source: Source::Kg })
            .collect();
        for t in self.overlay_touching(e).filter(|t| rels.contains(&t.relation)) {
            if !self.view.contains(t) {
                out.insert(ObservedTriple {
                    triple: t.clone(),
                    source: Source::Generated,
                });
            }
        }
        out
    }

    fn search(&mut self, targets: &[String], thought: &str) -> Result<(Vec<ObservedTriple>, Vec<String>), RunError> {
        let mut obs = BTreeSet::new();
        let mut notes = Vec::new();
        let mut resolved = Vec::new();
        for name in targets {
            let Some(e) = self.resolve(name)? else {
                notes.push(format!("no such entity: {name}"));
                continue;
            };
            let rels = self.relations_of(&e);
            if !rels.is_empty() {
                let chosen = self.filter_relations(thought, &e, &rels)?;
                obs.extend(self.neighbors(&e, &chosen));
                self.selected.insert(e.clone(), chosen);
            }
            if !resolved.contains(&e) {
                resolved.push(e);
            }
        }
        if !resolved.is_empty() {
            self.last_targets = resolved;
        }
        Ok((obs.into_iter().collect(), notes))
    }

    /// Map a Search argument to a node: topic entity, id, exact label, then
    /// model-assisted linking over existing entities.
    fn resolve(&mut self, name: &str) -> Result<Option<EntityId>, RunError> {
        let want = normalize(name);
        if let Some((e, _)) = self
            .topics
            .iter()
            .find(|(e, l)| normalize(l) == want || e.as_str() == name)
        {
            return Ok(Some(e.clone()));
        }
        if let Ok(e) = EntityId::new(name.trim()) {
            if self.view.knows(&e) || self.overlay_touching(&e).next().is_some() {
                return Ok(Some(e));
            }
        }
        if let Some(e) = self.view.entities_with_label(name.trim()).into_iter().next() {
            return Ok(Some(e));
        }
        if let Some(e) = self.known_entities().get(&want) {
            return Ok(Some(e.clone()));
        }
        Ok(self.link_existing(name)?)
    }

    fn filter_relations(
        &mut self,
        thought: &str,
        e: &EntityId,
        rels: &BTreeSet<String>,
    ) -> Result<BTreeSet<String>, LlmError> {
        let n = self.config().relations_top_n;
        if rels.len() == 1 {
            return Ok(rels.clone());
        }
        let listing = format!("[{}]", rels.iter().cloned().collect::<Vec<_>>().join(", "));
        let base = slots([
            ("Thought", thought.to_string()),
            ("Entity", self.display(e)),
            ("List of Relations", listing),
        ]);
        let params = self.plain();
        let mut answer = parse::parse_relation_list(&self.call(TemplateName::FilterRelations, base.clone(), &params)?);
        if answer.is_none() {
            let mut s = base;
            s.insert(
                "Feedback".into(),
                "Answer with a bracketed list of relations copied from the Relation list.\n".into(),
            );
            answer = parse::parse_relation_list(&self.call(TemplateName::FilterRelations, s, &params)?);
        }
        let fallback = |run: &mut Self, why: &str| {
            run.log.push(format!("relation filter for {e}: {why}; using first {n} by name"));
            tracing::info!(entity = %e, why, "relation filter fallback");
            rels.iter().take(n).cloned().collect()
        };
        let Some(answer) = answer else {
            return Ok(fallback(self, "no list in reply"));
        };
        if answer.is_empty() {
            return Ok(BTreeSet::new());
        }
        let mut chosen = Vec::new();
        for a in &answer {
            let hit = if rels.contains(a) {
                Some(a.clone())
            } else {
                // Accept the final segment alone when it names exactly one relation.
                let mut by_tail = rels.iter().filter(|r| r.rsplit('.').next() == Some(a.as_str()));
                match (by_tail.next(), by_tail.next()) {
                    (Some(r), None) => Some(r.clone()),
                    _ => None,
                }
            };
            if let Some(r) = hit {
                if !chosen.contains(&r) {
                    chosen.push(r);
                }
            }
        }
        chosen.truncate(n);
        if chosen.is_empty() {
            return Ok(fallback(self, "no listed relation chosen"));
        }
        Ok(chosen.into_iter().collect())
    }

    fn label_index(&mut self) -> &LabelIndex<'v, 'g> {
        let view = self.view;
        let params = self.config().bm25;
        self.labels.get_or_insert_with(|| LabelIndex::build(view, params))
    }

    /// Pick among existing entities for a mention; `None` if the model
    /// declines and no candidate matches the label exactly.
    fn link_existing(&mut self, mention: &str) -> Result<Option<EntityId>, LlmError> {
        let k = self.config().link_k;
        let cands = self.label_index().candidates(mention, k);
        if cands.is_empty() {
            return Ok(None);
        }
        let listing = cands
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}: {} (types: {})", i + 1, c.id, c.label, c.types.join(", ")))
            .collect::<Vec<_>>()
            .join("\n");
        let base = slots([
            ("Question", self.question.to_string()),
            ("Mention", mention.to_string()),
            ("Candidates", listing),
        ]);
        let params = self.plain();
        let mut choice = parse::parse_link(&self.call(TemplateName::LinkEntity, base.clone(), &params)?);
        if choice.is_none() {
            let mut s = base;
            s.insert("Feedback".into(), "Answer with one candidate id in brackets, or [none].\n".into());
            choice = parse::parse_link(&self.call(TemplateName::LinkEntity, s, &params)?);
        }
        if let Some(Some(picked)) = &choice {
            if let Some(c) = cands
                .iter()
                .find(|c| c.id.as_str() == picked || normalize(&c.label) == normalize(picked))
            {
                return Ok(Some(c.id.clone()));
            }
            self.log.push(format!("link for {mention:?}: {picked:?} is not a candidate"));
        }
        let exact = cands.iter().find(|c| normalize(&c.label) == normalize(mention));
        if matches!(choice, Some(None)) {
            return Ok(None);
        }
        Ok(exact.map(|c| c.id.clone()))
    }

    /// Normalized display text → entity for everything seen so far.
    fn known_entities(&self) -> BTreeMap<String, EntityId> {
        let mut out = BTreeMap::new();
        let mut add = |e: &EntityId| {
            out.entry(normalize(self.view.base().display(e))).or_insert_with(|| e.clone());
        };
        for e in self.topics.keys() {
            add(e);
        }
        let triples = self
            .steps
            .iter()
            .flat_map(|s| s.observation.iter().map(|o| &o.triple))
            .chain(self.overlay.iter().map(|g| &g.triple));
        for t in triples {
            add(&t.head);
            if let Term::Entity(e) = &t.tail {
                add(e);
            }
        }
        out
    }

    fn link_or_mint(&mut self, mention: &str) -> Result<Option<EntityId>, LlmError> {
        if let Some(e) = self.known_entities().get(&normalize(mention)) {
            return Ok(Some(e.clone()));
        }
        if let Some(e) = self.link_existing(mention)? {
            return Ok(Some(e));
        }
        let minted = EntityId::new(mention.split_whitespace().collect::<Vec<_>>().join(" ")).ok();
        if let Some(e) = &minted {
            self.log.push(format!("minted entity {e}"));
        }
        Ok(minted)
    }

    fn generate(&mut self, arg: &str, index: usize) -> Result<(Vec<ObservedTriple>, Vec<String>), RunError> {
        let cfg = self.config();
        // Most recent observations first, so ties favor fresh context.
        let mut pool: Vec<&Triple> = Vec::new();
        for s in self.steps.iter().rev() {
            for o in &s.observation {
                if !pool.contains(&&o.triple) {
                    pool.push(&o.triple);
                }
            }
        }
        let texts: Vec<String> = pool.iter().map(|t| self.text(t)).collect();
        let corpus = Corpus::new(&texts);
        let chosen: Vec<&str> = bm25_rank(arg, &corpus, cfg.choose_k, cfg.bm25)
            .into_iter()
            .map(|r| texts[r.doc].as_str())
            .collect();
        let explored = chosen.iter().map(|t| format!("({t})")).collect::<Vec<_>>().join("\n");
        let params = self.plain();
        let mut drafts: Vec<TextTriple> = Vec::new();
        for draw in 1..=cfg.generate_n {
            let s = slots([
                ("Thought", arg.to_string()),
                ("Explored Triples", explored.clone()),
                ("Sample", draw.to_string()),
            ]);
            for t in parse::parse_triples(&self.call(TemplateName::GenerateTriples, s, &params)?) {
                if !drafts.iter().any(|d| d.same_as(&t)) {
                    drafts.push(t);
                }
            }
        }
        if drafts.is_empty() {
            return Ok((Vec::new(), vec![NO_KNOWLEDGE.into()]));
        }
        let listing = drafts.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
        let base = slots([("Question", self.question.to_string()), ("Generated triples", listing)]);
        let mut verdict = parse::parse_verified(&self.call(TemplateName::VerifyTriples, base.clone(), &params)?);
        if verdict.is_none() {
            let mut s = base;
            s.insert(
                "Feedback".into(),
                "Answer with a bracketed list of triples copied from the generated triples, or [].\n".into(),
            );
            verdict = parse::parse_verified(&self.call(TemplateName::VerifyTriples, s, &params)?);
        }
        let verified = verdict.unwrap_or_else(|| {
            self.log.push("verification reply unparseable; keeping nothing".into());
            Vec::new()
        });
        let kept: Vec<TextTriple> = drafts
            .into_iter()
            .filter(|d| verified.iter().any(|v| v.same_as(d)))
            .collect();
        let mut obs = Vec::new();
        for text in kept {
            let Some(head) = self.link_or_mint(&text.head)? else { continue };
            let tail = match Term::parse(&text.tail) {
                Ok(Term::Literal(l)) => Term::Literal(l),
                _ => match self.link_or_mint(&text.tail)? {
                    Some(e) => Term::Entity(e),
                    None => continue,
                },
            };
            let relation = text.relation.split_whitespace().collect::<Vec<_>>().join("_");
            let Ok(triple) = Triple::new(head, relation, tail) else {
                self.log.push(format!("skipped malformed generated triple {text}"));
                continue;
            };
            if self.overlay.iter().all(|g| g.triple != triple) {
                self.overlay.push(GeneratedTriple {
                    triple: triple.clone(),
                    step: index,
                    text,
                });
            }
            let o = ObservedTriple {
                triple,
                source: Source::Generated,
            };
            if !obs.contains(&o) {
                obs.push(o);
            }
        }
        let notes = if obs.is_empty() { vec![NO_KNOWLEDGE.into()] } else { Vec::new() };
        Ok((obs, notes))
    }

    /// Re-search the last targets one hop further: their neighbors through
    /// the relations chosen before, then a filtered hop from each of those
    /// neighbors. Returns at most `rollback_cap` triples, first hop first.
    fn rollback(&mut self, thought: &str) -> Result<Vec<ObservedTriple>, RunError> {
        let cap = self.config().rollback_cap;
        let targets = if self.last_targets.is_empty() {
            self.topics.keys().cloned().collect()
        } else {
            self.last_targets.clone()
        };
        let mut hop1 = BTreeSet::new();
        for t in &targets {
            let rels = match self.selected.get(t) {
                Some(r) => r.clone(),
                None => {
                    let all = self.relations_of(t);
                    if all.is_empty() {
                        continue;
                    }
                    let r = self.filter_relations(thought, t, &all)?;
                    self.selected.insert(t.clone(), r.clone());
                    r
                }
            };
            hop1.extend(self.neighbors(t, &rels));
        }
        let frontier: BTreeSet<EntityId> = hop1
            .iter()
            .flat_map(|o| [Some(o.triple.head.clone()), o.triple.tail.as_entity().cloned()])
            .flatten()
            .filter(|e| !targets.contains(e))
            .collect();
        let mut hop2 = BTreeSet::new();
        for n in &frontier {
            if hop1.len() + hop2.len() >= cap {
                break;
            }
            let rels = self.relations_of(n);
            if rels.is_empty() {
                continue;
            }
            let chosen = self.filter_relations(thought, n, &rels)?;
            for o in self.neighbors(n, &chosen) {
                if !hop1.contains(&o) {
                    hop2.insert(o);
                }
            }
            self.selected.insert(n.clone(), chosen);
        }
        if !frontier.is_empty() {
            self.last_targets = frontier.into_iter().collect();
        }
        let mut out: Vec<ObservedTriple> = hop1.into_iter().chain(hop2).collect();
        out.truncate(cap);
        Ok(out)
    }

    fn support(&self, answers: &[String]) -> Vec<AnswerSupport> {
        answers
            .iter()
            .map(|a| {
                let want = normalize(a);
                let mut triples: Vec<ObservedTriple> = Vec::new();
                for o in self.steps.iter().flat_map(|s| &s.observation) {
                    let ends = [
                        normalize(self.view.base().display(&o.triple.head)),
                        normalize(term_text(&o.triple.tail, self.view)),
                    ];
                    if ends.contains(&want) && !triples.contains(o) {
                        triples.push(o.clone());
                    }
                }
                AnswerSupport {
                    answer: a.clone(),
                    triples,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
