use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::LlmError;

pub type Slots = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    GogInstruction,
    FilterRelations,
    GenerateTriples,
    VerifyTriples,
    LinkEntity,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::GogInstruction,
        TemplateName::FilterRelations,
        TemplateName::GenerateTriples,
        TemplateName::VerifyTriples,
        TemplateName::LinkEntity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::GogInstruction => "gog_instruction",
            TemplateName::FilterRelations => "filter_relations",
            TemplateName::GenerateTriples => "generate_triples",
            TemplateName::VerifyTriples => "verify_triples",
            TemplateName::LinkEntity => "link_entity",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateName::GogInstruction => include_str!("../../prompts/gog_instruction.txt"),
            TemplateName::FilterRelations => include_str!("../../prompts/filter_relations.txt"),
            TemplateName::GenerateTriples => include_str!("../../prompts/generate_triples.txt"),
            TemplateName::VerifyTriples => include_str!("../../prompts/verify_triples.txt"),
            TemplateName::LinkEntity => include_str!("../../prompts/link_entity.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LlmError::Template(format!("unknown template {s:?}")))
    }
}

/// Instruction, exemplar shots and the live block with `{Slot}` markers.
/// `{?Slot}` is optional and renders empty when absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub instruction: String,
    pub shots: Vec<String>,
    pub live: String,
}

fn slot_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{(\??)([A-Za-z][A-Za-z _]*)\}").expect("valid slot regex"))
}

impl PromptTemplate {
    /// Parse the sectioned text format: `=== instruction`, any number of
    /// `=== shot`, then `=== live`.
    pub fn parse(name: TemplateName, text: &str) -> Result<Self, LlmError> {
        let mut instruction = None;
        let mut shots = Vec::new();
        let mut live = None;
        let mut current: Option<(&str, Vec<&str>)> = None;
        let mut finish = |sec: Option<(&str, Vec<&str>)>| -> Result<(), LlmError> {
            let Some((kind, lines)) = sec else { return Ok(()) };
            let body = lines.join("\n").trim_matches('\n').to_string();
            match kind {
                "instruction" => instruction = Some(body),
                "shot" => shots.push(body),
                "live" => live = Some(body),
                other => {
                    return Err(LlmError::Template(format!("{name}: unknown section {other:?}")));
                }
            }
            Ok(())
        };
        for line in text.lines() {
            if let Some(kind) = line.strip_prefix("=== ") {
                finish(current.take())?;
                current = Some((kind.trim(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() {
                return Err(LlmError::Template(format!("{name}: text before first section")));
            }
        }
        finish(current)?;
        let missing = |s: &str| LlmError::Template(format!("{name}: missing {s} section"));
        Ok(PromptTemplate {
            name,
            instruction: instruction.ok_or_else(|| missing("instruction"))?,
            shots,
            live: live.ok_or_else(|| missing("live"))?,
        })
    }

    pub fn builtin(name: TemplateName) -> Self {
        Self::parse(name, name.builtin_text()).expect("bundled templates parse")
    }

    /// Required slot names (optional `{?Slot}` markers excluded).
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for text in [&self.instruction, &self.live] {
            for c in slot_re().captures_iter(text) {
                if c[1].is_empty() {
                    out.insert(c[2].to_string());
                }
            }
        }
        out
    }

    /// Render instruction, shots, then the live block. Slots not used by the
    /// template are ignored.
    pub fn render(&self, slots: &Slots) -> Result<String, LlmError> {
        let fill = |text: &str| -> Result<String, LlmError> {
            let mut out = String::with_capacity(text.len());
            let mut last = 0;
            for c in slot_re().captures_iter(text) {
                let m = c.get(0).expect("whole match");
                out.push_str(&text[last..m.start()]);
                match (slots.get(&c[2]), c[1].is_empty()) {
                    (Some(v), _) => out.push_str(v),
                    (None, false) => {}
                    (None, true) => return Err(LlmError::MissingSlot(c[2].to_string())),
                }
                last = m.end();
            }
            out.push_str(&text[last..]);
            Ok(out)
        };
        let mut out = fill(&self.instruction)?;
        for shot in &self.shots {
            out.push_str("\n\n");
            out.push_str(shot);
        }
        out.push_str("\n\n");
        out.push_str(&fill(&self.live)?);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: TemplateName::ALL
                .into_iter()
                .map(|n| (n, PromptTemplate::builtin(n)))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Bundled templates, overridden by any `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        let mut set = PromptSet::default();
        for name in TemplateName::ALL {
            let path = dir.as_ref().join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| LlmError::Template(format!("{}: {e}", path.display())))?;
                set.templates.insert(name, PromptTemplate::parse(name, &text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn insert(&mut self, t: PromptTemplate) {
        self.templates.insert(t.name, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(pairs: &[(&str, &str)]) -> Slots {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn builtins_parse() {
        let set = PromptSet::default();
        assert_eq!(set.get(TemplateName::GogInstruction).shots.len(), 3);
        assert_eq!(
            set.get(TemplateName::FilterRelations).slots(),
            ["Entity", "List of Relations", "Thought"].map(String::from).into()
        );
        assert!(set
            .get(TemplateName::GogInstruction)
            .instruction
            .starts_with("Solve a question answering task"));
    }

    #[test]
    fn render_endings() {
        let set = PromptSet::default();
        let f = set
            .get(TemplateName::FilterRelations)
            .render(&slots(&[("Thought", "t"), ("Entity", "Cupertino"), ("List of Relations", "[a, b]")]))
            .unwrap();
        assert!(f.ends_with("Relation: [a, b]\nAnswer:"), "{f}");
        let g = set
            .get(TemplateName::GenerateTriples)
            .render(&slots(&[("Thought", "t"), ("Explored Triples", "(a, b, c)")]))
            .unwrap();
        assert!(g.ends_with("Known Triples: (a, b, c)\nGenerated Triples:"));
        let gog = set
            .get(TemplateName::GogInstruction)
            .render(&slots(&[("Question", "q?"), ("List of Topic Entities", "[Apple Inc]"), ("Step", "1")]))
            .unwrap();
        assert!(gog.ends_with("Question: q?\nTopic Entity: [Apple Inc]\nThought 1:"));
        let shot_pos = gog.find("Question: In which country").unwrap();
        assert!(shot_pos < gog.find("Question: q?").unwrap());
    }

    #[test]
    fn missing_slot_is_named() {
        let t = PromptTemplate::builtin(TemplateName::VerifyTriples);
        match t.render(&slots(&[("Generated triples", "x")])) {
            Err(LlmError::MissingSlot(s)) => assert_eq!(s, "Question"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn optional_and_extra_slots() {
        let t = PromptTemplate::parse(
            TemplateName::LinkEntity,
            "=== instruction\nDo it.\n=== live\nQ: {Question}\n{?Feedback}A:",
        )
        .unwrap();
        let base = slots(&[("Question", "x"), ("Sample", "2")]);
        assert_eq!(t.render(&base).unwrap(), "Do it.\n\nQ: x\nA:");
        let mut fb = base.clone();
        fb.insert("Feedback".into(), "Use brackets.\n".into());
        assert_eq!(t.render(&fb).unwrap(), "Do it.\n\nQ: x\nUse brackets.\nA:");
        assert!(PromptTemplate::parse(TemplateName::LinkEntity, "=== live\nx").is_err());
    }

    #[test]
    fn overrides_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("link_entity.txt"),
            "=== instruction\nCustom.\n=== live\n{Mention}",
        )
        .unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get(TemplateName::LinkEntity).instruction, "Custom.");
        assert_eq!(set.get(TemplateName::GogInstruction).shots.len(), 3);
    }
}
