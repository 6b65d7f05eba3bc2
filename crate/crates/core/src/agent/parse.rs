//! Parsers for model completions: actions, relation lists, triples, and
//! entity choices.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "arg", rename_all = "snake_case")]
pub enum Action {
    Search(Vec<String>),
    Generate(String),
    Finish(Vec<String>),
    /// `Finish[unknown]`
    Unknown,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Search(es) => write!(f, "Search[{}]", es.join(" | ")),
            Action::Generate(t) => write!(f, "Generate[{t}]"),
            Action::Finish(ans) => write!(f, "Finish[{}]", ans.join(" | ")),
            Action::Unknown => f.write_str("Finish[unknown]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no recognizable action in completion")]
    NoAction,
    #[error("Search[] names no entity")]
    EmptySearch,
}

fn action_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:Action\s*\d*\s*:\s*)?\b(Search|Generate|Finish)\s*\[([^\n]*)\]").expect("valid action regex")
    })
}

fn thought_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Thought\s*\d*\s*:").expect("valid thought regex"))
}

fn split_bar(s: &str) -> Vec<String> {
    s.split('|')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

/// Split a completion into its thought and the last action it states.
pub fn parse_action(text: &str) -> Result<(String, Action), ParseError> {
    let m = action_re().captures_iter(text).last().ok_or(ParseError::NoAction)?;
    let before = &text[..m.get(0).expect("whole match").start()];
    let thought_start = thought_re().find_iter(before).last().map_or(0, |t| t.end());
    let thought = before[thought_start..].trim().to_string();
    let arg = m[2].trim();
    let action = match &m[1] {
        "Search" => {
            let es = split_bar(arg);
            if es.is_empty() {
                return Err(ParseError::EmptySearch);
            }
            Action::Search(es)
        }
        "Generate" if arg.is_empty() => Action::Generate(thought.clone()),
        "Generate" => Action::Generate(arg.to_string()),
        _ => {
            let ans = split_bar(arg);
            if ans.is_empty() || (ans.len() == 1 && ans[0].eq_ignore_ascii_case("unknown")) {
                Action::Unknown
            } else {
                Action::Finish(ans)
            }
        }
    };
    Ok((thought, action))
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\''] {
        if let Some(inner) = s.strip_prefix(q).and_then(|x| x.strip_suffix(q)) {
            return inner.trim();
        }
    }
    s
}

/// Content between the first `[` and the last `]`.
fn bracketed(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start + 1..end])
}

/// `[rel1, rel2, ...]`. `None` when there is no bracketed list.
pub fn parse_relation_list(text: &str) -> Option<Vec<String>> {
    let inner = bracketed(text)?;
    Some(
        inner
            .split(',')
            .map(unquote)
            .filter(|r| !r.is_empty())
            .map(String::from)
            .collect(),
    )
}

/// A triple as written by the model, before entity linking.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TextTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl TextTriple {
    fn key(&self) -> (String, String, String) {
        let n = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        (n(&self.head), n(&self.relation), n(&self.tail))
    }

    pub fn same_as(&self, other: &TextTriple) -> bool {
        self.key() == other.key()
    }
}

impl fmt::Display for TextTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

fn looks_like_relation(s: &str) -> bool {
    !s.is_empty() && !s.contains(char::is_whitespace) && s.contains(['.', '_'])
}

fn paren_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([^()\n]*)\)").expect("valid paren regex"))
}

/// Every `(head, relation, tail)` group in the text. With more than three
/// comma-separated parts the relation is the first inner part shaped like a
/// schema name (dotted or underscored, no spaces); groups where that is
/// ambiguous are skipped.
pub fn parse_triples(text: &str) -> Vec<TextTriple> {
    let mut out = Vec::new();
    for c in paren_re().captures_iter(text) {
        let parts: Vec<&str> = c[1].split(',').map(unquote).collect();
        let rel_at = match parts.len() {
            0..=2 => continue,
            3 => 1,
            n => match (1..n - 1).find(|&i| looks_like_relation(parts[i])) {
                Some(i) => i,
                None => continue,
            },
        };
        let head = parts[..rel_at].join(", ");
        let tail = parts[rel_at + 1..].join(", ");
        let relation = parts[rel_at].to_string();
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            continue;
        }
        let t = TextTriple { head, relation, tail };
        if !out.iter().any(|o: &TextTriple| o.same_as(&t)) {
            out.push(t);
        }
    }
    out
}

/// `[(h, r, t), ...]`; `None` without a bracketed list.
pub fn parse_verified(text: &str) -> Option<Vec<TextTriple>> {
    bracketed(text).map(parse_triples)
}

/// `[id]` or `[none]`. The outer `None` means no bracketed answer.
pub fn parse_link(text: &str) -> Option<Option<String>> {
    let inner = unquote(bracketed(text)?);
    if inner.is_empty() || inner.eq_ignore_ascii_case("none") {
        Some(None)
    } else {
        Some(Some(inner.to_string()))
    }
}
