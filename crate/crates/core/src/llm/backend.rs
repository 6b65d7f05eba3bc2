use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{script_key, Completion, LlmBackend, LlmError, LlmExchange, LlmRequest, Slots, TemplateName};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub template: TemplateName,
    pub slots: Slots,
    pub completion: String,
}

impl ScriptEntry {
    pub fn key(&self) -> String {
        script_key(self.template, &self.slots)
    }
}

/// Recorded completions, one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_exchanges<'a>(exchanges: impl IntoIterator<Item = &'a LlmExchange>) -> Self {
        Script {
            entries: exchanges
                .into_iter()
                .map(|x| ScriptEntry {
                    template: x.template,
                    slots: x.slots.clone(),
                    completion: x.completion.clone(),
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(line)
                    .map_err(|e| LlmError::Script(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Script { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("script entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Append entries, skipping exact duplicates of ones already present.
    pub fn extend(&mut self, other: Script) {
        let mut seen: std::collections::HashSet<(String, String)> =
            self.entries.iter().map(|e| (e.key(), e.completion.clone())).collect();
        for e in other.entries {
            if seen.insert((e.key(), e.completion.clone())) {
                self.entries.push(e);
            }
        }
    }
}

/// Replays completions by exact (template, slots) key.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_key: HashMap<String, String>,
    by_template: BTreeMap<TemplateName, Vec<(String, Slots)>>,
}

impl ScriptedBackend {
    pub fn new(script: &Script) -> Result<Self, LlmError> {
        let mut b = ScriptedBackend::default();
        for e in &script.entries {
            let key = e.key();
            match b.by_key.get(&key) {
                Some(c) if *c != e.completion => return Err(LlmError::ScriptConflict(key)),
                Some(_) => continue,
                None => {
                    b.by_key.insert(key.clone(), e.completion.clone());
                    b.by_template
                        .entry(e.template)
                        .or_default()
                        .push((key, e.slots.clone()));
                }
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Up to three keys of the same template sharing the most slot values.
    fn nearest(&self, template: TemplateName, slots: &Slots) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = self
            .by_template
            .get(&template)
            .into_iter()
            .flatten()
            .map(|(key, s)| {
                let shared = s.iter().filter(|(k, v)| slots.get(*k) == Some(v)).count();
                (shared, key)
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        scored.into_iter().take(3).map(|(_, k)| k.clone()).collect()
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let key = script_key(req.template, &req.slots);
        match self.by_key.get(&key) {
            Some(text) => Ok(Completion::text(text.clone())),
            None => Err(LlmError::ScriptMiss {
                template: req.template,
                nearest: self.nearest(req.template, &req.slots),
                key,
            }),
        }
    }
}

/// Hands out queued completions per template in order. Used to author
/// scripts: run once against a queue, then record the exchanges.
#[derive(Debug, Default)]
pub struct SequenceBackend {
    queues: Mutex<BTreeMap<TemplateName, VecDeque<String>>>,
    calls: Mutex<usize>,
}

impl SequenceBackend {
    pub fn new<S: Into<String>>(items: impl IntoIterator<Item = (TemplateName, S)>) -> Self {
        let b = SequenceBackend::default();
        for (t, s) in items {
            b.push(t, s);
        }
        b
    }

    pub fn push(&self, template: TemplateName, completion: impl Into<String>) {
        self.queues
            .lock()
            .expect("queue lock")
            .entry(template)
            .or_default()
            .push_back(completion.into());
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("counter lock")
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("queue lock").values().map(VecDeque::len).sum()
    }
}

impl LlmBackend for SequenceBackend {
    fn id(&self) -> String {
        "sequence".into()
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        *self.calls.lock().expect("counter lock") += 1;
        self.queues
            .lock()
            .expect("queue lock")
            .get_mut(&req.template)
            .and_then(VecDeque::pop_front)
            .map(Completion::text)
            .ok_or(LlmError::Exhausted(req.template))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::DecodingParams;

    fn req(t: TemplateName, pairs: &[(&str, &str)]) -> LlmRequest {
        LlmRequest {
            template: t,
            slots: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            prompt: String::new(),
            params: DecodingParams::default(),
        }
    }

    fn entry(t: TemplateName, pairs: &[(&str, &str)], c: &str) -> ScriptEntry {
        ScriptEntry {
            template: t,
            slots: req(t, pairs).slots,
            completion: c.into(),
        }
    }

    #[test]
    fn replays_and_misses() {
        let script = Script {
            entries: vec![
                entry(TemplateName::GogInstruction, &[("Question", "q"), ("Step", "1")], "Thought 1: a"),
                entry(TemplateName::GogInstruction, &[("Question", "q"), ("Step", "2")], "Thought 2: b"),
                entry(TemplateName::FilterRelations, &[("Entity", "x")], "[r]"),
            ],
        };
        let b = ScriptedBackend::new(&script).unwrap();
        let hit = b.complete(&req(TemplateName::GogInstruction, &[("Question", "q"), ("Step", "2")])).unwrap();
        assert_eq!(hit.text, "Thought 2: b");
        assert_eq!(hit.latency_ms, None);
        let miss = b.complete(&req(TemplateName::GogInstruction, &[("Question", "q"), ("Step", "3")]));
        let again = b.complete(&req(TemplateName::GogInstruction, &[("Question", "q"), ("Step", "3")]));
        match (miss, again) {
            (Err(LlmError::ScriptMiss { nearest, key, .. }), Err(LlmError::ScriptMiss { key: k2, nearest: n2, .. })) => {
                assert_eq!(nearest.len(), 2);
                assert_eq!((key, nearest), (k2, n2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conflicting_entries_rejected() {
        let script = Script {
            entries: vec![
                entry(TemplateName::FilterRelations, &[("Entity", "x")], "[a]"),
                entry(TemplateName::FilterRelations, &[("Entity", "x")], "[b]"),
            ],
        };
        assert!(matches!(ScriptedBackend::new(&script), Err(LlmError::ScriptConflict(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let script = Script {
            entries: vec![entry(TemplateName::LinkEntity, &[("Mention", "Quebec")], "[m.0]")],
        };
        assert_eq!(Script::parse(&script.to_jsonl()).unwrap(), script);
    }

    #[test]
    fn sequence_pops_in_order() {
        let b = SequenceBackend::new([(TemplateName::FilterRelations, "[a]"), (TemplateName::FilterRelations, "[b]")]);
        let r = req(TemplateName::FilterRelations, &[]);
        assert_eq!(b.complete(&r).unwrap().text, "[a]");
        assert_eq!(b.complete(&r).unwrap().text, "[b]");
        assert!(matches!(b.complete(&r), Err(LlmError::Exhausted(_))));
        assert_eq!(b.calls(), 3);
    }
}
