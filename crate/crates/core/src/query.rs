//! A SPARQL subset sufficient for WebQSP/CWQ-style gold queries.
//!
//! Supported: `PREFIX` declarations, `SELECT [DISTINCT] ?var WHERE { ... }`
//! with basic graph patterns (including `;` and `,` shorthand) and two kinds
//! of `FILTER`: inequality (`?a != ?b`, `?a != ns:m.x`) and the
//! "non-literal or English" language guard. Anything else is rejected with
//! [`QueryError::Unsupported`] naming the construct.
//!
//! Freebase names (`ns:m.01l6dm`, `<http://rdf.freebase.com/ns/m.01l6dm>`)
//! resolve to bare ids (`m.01l6dm`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::kg::{looks_like_literal, EntityId, GraphView, Term, Triple};

pub const FREEBASE_NS: &str = "http://rdf.freebase.com/ns/";
const XSD: &str = "http://www.w3.org/2001/XMLSchema#";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("unsupported SPARQL feature: {feature} (line {line}, column {column})")]
    Unsupported {
        feature: String,
        line: usize,
        column: usize,
    },
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        message: String,
        line: usize,
        column: usize,
    },
    #[error("invalid query: {0}")]
    Invalid(String),
}

impl QueryError {
    pub fn unsupported_feature(&self) -> Option<&str> {
        match self {
            QueryError::Unsupported { feature, .. } => Some(feature),
            _ => None,
        }
    }
}

/// Variable name without the leading `?`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub String);

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "?{}", self.0)
    }
}

/// Subject or object slot of a pattern.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternTerm {
    Var(Var),
    Const(Term),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TriplePattern {
    pub subject: PatternTerm,
    pub predicate: String,
    pub object: PatternTerm,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Filter {
    NotEqual(Var, PatternTerm),
    /// Non-literals pass; literals pass iff untagged or tagged `en`.
    NonLiteralOrEnglish(Var),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub prefixes: BTreeMap<String, String>,
    pub select_var: Var,
    pub distinct: bool,
    pub patterns: Vec<TriplePattern>,
    pub filters: Vec<Filter>,
}

/// A total assignment of the query's variables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Binding(pub BTreeMap<Var, Term>);

impl Binding {
    pub fn get(&self, v: &Var) -> Option<&Term> {
        self.0.get(v)
    }
}

impl Query {
    pub fn parse(text: &str) -> Result<Query, QueryError> {
        parse_query(text)
    }

    /// Variables mentioned by the patterns.
    pub fn pattern_vars(&self) -> BTreeSet<Var> {
        let mut vars = BTreeSet::new();
        for p in &self.patterns {
            for slot in [&p.subject, &p.object] {
                if let PatternTerm::Var(v) = slot {
                    vars.insert(v.clone());
                }
            }
        }
        vars
    }

    fn validate(&self) -> Result<(), QueryError> {
        let vars = self.pattern_vars();
        if !vars.contains(&self.select_var) {
            return Err(QueryError::Invalid(format!(
                "select variable {} does not occur in any pattern",
                self.select_var
            )));
        }
        for f in &self.filters {
            let mentioned: Vec<&Var> = match f {
                Filter::NotEqual(a, PatternTerm::Var(b)) => vec![a, b],
                Filter::NotEqual(a, _) | Filter::NonLiteralOrEnglish(a) => vec![a],
            };
            for v in mentioned {
                if !vars.contains(v) {
                    return Err(QueryError::Invalid(format!(
                        "filter variable {v} does not occur in any pattern"
                    )));
                }
            }
        }
        Ok(())
    }

    fn freebase_prefix(&self) -> Option<&str> {
        self.prefixes
            .iter()
            .find(|(_, iri)| iri.as_str() == FREEBASE_NS)
            .map(|(p, _)| p.as_str())
    }

    fn write_name(&self, f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
        match self.freebase_prefix() {
            Some(p) if is_plain_local(name) => write!(f, "{p}:{name}"),
            _ => write!(f, "<{FREEBASE_NS}{}>", percent_encode(name)),
        }
    }

    fn write_term(&self, f: &mut fmt::Formatter<'_>, t: &PatternTerm) -> fmt::Result {
        match t {
            PatternTerm::Var(v) => write!(f, "{v}"),
            PatternTerm::Const(Term::Entity(e)) => self.write_name(f, e.as_str()),
            PatternTerm::Const(Term::Literal(l)) => {
                let raw = l.raw();
                if raw.starts_with('"') {
                    let end = raw.rfind('"').unwrap_or(0);
                    write!(f, "\"{}\"{}", escape(&raw[1..end]), &raw[end + 1..])
                } else if lexes_as_number(raw) {
                    f.write_str(raw)
                } else {
                    write!(f, "\"{}\"^^<{XSD}date>", escape(raw))
                }
            }
        }
    }
}

fn is_plain_local(name: &str) -> bool {
    !name.is_empty()
        && !name.ends_with('.')
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn percent_encode(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() && s.is_char_boundary(i + 3) {
            if let Ok(v) = u8::from_str_radix(&s[i + 1..i + 3], 16) {
                out.push(v);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8(out).unwrap_or_else(|_| s.to_string())
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn lexes_as_number(s: &str) -> bool {
    let toks = Lexer::new(s).tokenize();
    matches!(toks.as_deref(), Ok([Spanned { tok: Tok::Number(n), .. }]) if n == s)
}

/// Canonical serialization: sorted prefixes, filters before patterns, one
/// item per line. `parse(q.to_string()) == q`.
impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, iri) in &self.prefixes {
            writeln!(f, "PREFIX {p}: <{iri}>")?;
        }
        let distinct = if self.distinct { "DISTINCT " } else { "" };
        writeln!(f, "SELECT {distinct}{} WHERE {{", self.select_var)?;
        for filter in &self.filters {
            match filter {
                Filter::NotEqual(a, b) => {
                    write!(f, "  FILTER ({a} != ")?;
                    self.write_term(f, b)?;
                    writeln!(f, ")")?;
                }
                Filter::NonLiteralOrEnglish(v) => writeln!(
                    f,
                    "  FILTER (!isLiteral({v}) || lang({v}) = '' || langMatches(lang({v}), 'en'))"
                )?,
            }
        }
        for p in &self.patterns {
            f.write_str("  ")?;
            self.write_term(f, &p.subject)?;
            f.write_str(" ")?;
            self.write_name(f, &p.predicate)?;
            f.write_str(" ")?;
            self.write_term(f, &p.object)?;
            writeln!(f, " .")?;
        }
        writeln!(f, "}}")
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Var(String),
    Iri(String),
    PName(String, String),
    Word(String),
    /// Quoted string: lexical form, language tag, datatype token.
    Str(String, Option<String>, Option<Box<Tok>>),
    Number(String),
    Punct(&'static str),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

const PUNCTS: [&str; 19] = [
    "!=", "||", "&&", "^^", ">=", ">", "{", "}", "(", ")", ".", ",", ";", "!", "=", "*", "/", "|", "^",
];

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn err(&self, pos: usize, message: impl Into<String>) -> QueryError {
        let (line, column) = line_col(self.src, pos);
        QueryError::Syntax {
            message: message.into(),
            line,
            column,
        }
    }

    fn tokenize(mut self) -> Result<Vec<Spanned>, QueryError> {
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= self.src.len() {
                return Ok(out);
            }
            let start = self.pos;
            let tok = self.next_tok()?;
            out.push(Spanned { tok, pos: start });
        }
    }

    fn skip_ws(&mut self) {
        loop {
            let r = self.rest();
            let trimmed = r.trim_start();
            self.pos += r.len() - trimmed.len();
            if trimmed.starts_with('#') {
                let end = trimmed.find('\n').unwrap_or(trimmed.len());
                self.pos += end;
            } else {
                return;
            }
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let r = self.rest();
        let end = r.find(|c| !pred(c)).unwrap_or(r.len());
        self.pos += end;
        &r[..end]
    }

    fn next_tok(&mut self) -> Result<Tok, QueryError> {
        let start = self.pos;
        let c = self.rest().chars().next().unwrap();
        match c {
            '?' | '$' => {
                self.pos += 1;
                let name = self.take_while(|c| c.is_alphanumeric() || c == '_');
                if name.is_empty() {
                    return Err(self.err(start, "empty variable name"));
                }
                Ok(Tok::Var(name.to_string()))
            }
            '<' => {
                let r = self.rest();
                match r[1..].find(|c: char| c == '>' || c.is_whitespace()) {
                    Some(i) if r.as_bytes()[i + 1] == b'>' => {
                        self.pos += i + 2;
                        Ok(Tok::Iri(r[1..i + 1].to_string()))
                    }
                    _ if r.starts_with("<=") => {
                        self.pos += 2;
                        Ok(Tok::Punct("<="))
                    }
                    _ => {
                        self.pos += 1;
                        Ok(Tok::Punct("<"))
                    }
                }
            }
            '"' | '\'' => self.string(c),
            c if c.is_ascii_digit()
                || (matches!(c, '-' | '+')
                    && self.rest()[1..].starts_with(|d: char| d.is_ascii_digit())) =>
            {
                Ok(Tok::Number(self.number()))
            }
            c if c.is_alphabetic() || c == '_' || c == ':' => {
                let word = self.take_while(|c| c.is_alphanumeric() || c == '_' || c == '-');
                if self.rest().starts_with(':') {
                    self.pos += 1;
                    let local = self.take_while(|c| {
                        c.is_alphanumeric() || matches!(c, '_' | '.' | '-' | ':' | '%')
                    });
                    let trimmed = local.trim_end_matches('.');
                    self.pos -= local.len() - trimmed.len();
                    Ok(Tok::PName(word.to_string(), trimmed.to_string()))
                } else {
                    Ok(Tok::Word(word.to_string()))
                }
            }
            _ => {
                for p in PUNCTS {
                    if self.rest().starts_with(p) {
                        self.pos += p.len();
                        return Ok(Tok::Punct(p));
                    }
                }
                Err(self.err(start, format!("unexpected character {c:?}")))
            }
        }
    }

    fn number(&mut self) -> String {
        let start = self.pos;
        if self.rest().starts_with(['-', '+']) {
            self.pos += 1;
        }
        self.take_while(|c| c.is_ascii_digit());
        if self.rest().starts_with('.') && self.rest()[1..].starts_with(|c: char| c.is_ascii_digit())
        {
            self.pos += 1;
            self.take_while(|c| c.is_ascii_digit());
        }
        let r = self.rest();
        if r.starts_with(['e', 'E']) {
            let after = &r[1..];
            let skip = usize::from(after.starts_with(['-', '+']));
            if after[skip..].starts_with(|c: char| c.is_ascii_digit()) {
                self.pos += 1 + skip;
                self.take_while(|c| c.is_ascii_digit());
            }
        }
        self.src[start..self.pos].to_string()
    }

    fn string(&mut self, quote: char) -> Result<Tok, QueryError> {
        let start = self.pos;
        self.pos += 1;
        let mut value = String::new();
        loop {
            let Some(c) = self.rest().chars().next() else {
                return Err(self.err(start, "unterminated string"));
            };
            self.pos += c.len_utf8();
            match c {
                '\\' => {
                    let Some(e) = self.rest().chars().next() else {
                        return Err(self.err(start, "unterminated string"));
                    };
                    self.pos += e.len_utf8();
                    value.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        other => other,
                    });
                }
                '\n' => return Err(self.err(start, "newline in string")),
                c if c == quote => break,
                c => value.push(c),
            }
        }
        let mut lang = None;
        let mut datatype = None;
        if self.rest().starts_with('@') {
            self.pos += 1;
            let tag = self.take_while(|c| c.is_ascii_alphanumeric() || c == '-');
            if tag.is_empty() {
                return Err(self.err(self.pos, "empty language tag"));
            }
            lang = Some(tag.to_string());
        } else if self.rest().starts_with("^^") {
            self.pos += 2;
            let dt_pos = self.pos;
            let dt = self.next_tok()?;
            if !matches!(dt, Tok::Iri(_) | Tok::PName(..)) {
                return Err(self.err(dt_pos, "expected datatype IRI"));
            }
            datatype = Some(Box::new(dt));
        }
        Ok(Tok::Str(value, lang, datatype))
    }
}

fn line_col(src: &str, pos: usize) -> (usize, usize) {
    let before = &src[..pos.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Var(Var),
    Const(PatternTerm),
    Str(String),
    Not(Box<Expr>),
    Or(Vec<Expr>),
    And(Vec<Expr>),
    Eq(Box<Expr>, Box<Expr>),
    Ne(Box<Expr>, Box<Expr>),
    IsLiteral(Var),
    Lang(Var),
    LangMatches(Box<Expr>, String),
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Spanned>,
    i: usize,
    prefixes: BTreeMap<String, String>,
}

const UNSUPPORTED_WORDS: [&str; 17] = [
    "OPTIONAL", "UNION", "MINUS", "BIND", "VALUES", "GRAPH", "SERVICE", "EXISTS", "ORDER",
    "LIMIT", "OFFSET", "GROUP", "HAVING", "CONSTRUCT", "ASK", "DESCRIBE", "FROM",
];

pub fn parse_query(text: &str) -> Result<Query, QueryError> {
    let toks = Lexer::new(text).tokenize()?;
    let mut p = Parser {
        src: text,
        toks,
        i: 0,
        prefixes: BTreeMap::new(),
    };
    let q = p.query()?;
    q.validate()?;
    Ok(q)
}

impl<'a> Parser<'a> {
    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.src.len(), |t| t.pos)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.i + k).map(|t| &t.tok)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).map(|t| t.tok.clone());
        self.i += 1;
        t
    }

    fn syntax(&self, message: impl Into<String>) -> QueryError {
        let (line, column) = line_col(self.src, self.pos());
        QueryError::Syntax {
            message: message.into(),
            line,
            column,
        }
    }

    fn unsupported(&self, feature: impl Into<String>) -> QueryError {
        let (line, column) = line_col(self.src, self.pos());
        QueryError::Unsupported {
            feature: feature.into(),
            line,
            column,
        }
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(x)) if x.eq_ignore_ascii_case(w))
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Some(Tok::Punct(x)) if *x == p)
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), QueryError> {
        if self.is_punct(p) {
            self.i += 1;
            Ok(())
        } else {
            Err(self.syntax(format!("expected '{p}'")))
        }
    }

    fn expect_word(&mut self, w: &str) -> Result<(), QueryError> {
        if self.is_word(w) {
            self.i += 1;
            Ok(())
        } else {
            Err(self.syntax(format!("expected {w}")))
        }
    }

    fn check_unsupported_word(&self) -> Result<(), QueryError> {
        if let Some(Tok::Word(w)) = self.peek() {
            let upper = w.to_ascii_uppercase();
            if UNSUPPORTED_WORDS.contains(&upper.as_str()) {
                let feature = match upper.as_str() {
                    "ORDER" | "GROUP" => format!("{upper} BY"),
                    _ => upper,
                };
                return Err(self.unsupported(feature));
            }
        }
        Ok(())
    }

    fn query(&mut self) -> Result<Query, QueryError> {
        loop {
            if self.is_word("PREFIX") {
                self.i += 1;
                let name = match self.bump() {
                    Some(Tok::PName(p, l)) if l.is_empty() => p,
                    _ => {
                        self.i -= 1;
                        return Err(self.syntax("expected prefix name"));
                    }
                };
                let iri = match self.bump() {
                    Some(Tok::Iri(iri)) => iri,
                    _ => {
                        self.i -= 1;
                        return Err(self.syntax("expected IRI"));
                    }
                };
                self.prefixes.insert(name, iri);
            } else if self.is_word("BASE") {
                return Err(self.unsupported("BASE"));
            } else {
                break;
            }
        }
        self.check_unsupported_word()?;
        self.expect_word("SELECT")?;
        let mut distinct = false;
        if self.is_word("DISTINCT") {
            distinct = true;
            self.i += 1;
        } else if self.is_word("REDUCED") {
            return Err(self.unsupported("REDUCED"));
        }
        let select_var = match self.peek() {
            Some(Tok::Var(v)) => Var(v.clone()),
            Some(Tok::Punct("*")) => return Err(self.unsupported("SELECT *")),
            Some(Tok::Punct("(")) => return Err(self.unsupported("projection expression")),
            _ => return Err(self.syntax("expected a projection variable")),
        };
        self.i += 1;
        if matches!(self.peek(), Some(Tok::Var(_))) {
            return Err(self.unsupported("multiple projection variables"));
        }
        self.check_unsupported_word()?;
        if self.is_word("WHERE") {
            self.i += 1;
        }
        self.expect_punct("{")?;
        let (patterns, filters) = self.group()?;
        self.expect_punct("}")?;
        self.check_unsupported_word()?;
        if self.peek().is_some() {
            return Err(self.syntax("unexpected trailing input"));
        }
        Ok(Query {
            prefixes: std::mem::take(&mut self.prefixes),
            select_var,
            distinct,
            patterns,
            filters,
        })
    }

    fn group(&mut self) -> Result<(Vec<TriplePattern>, Vec<Filter>), QueryError> {
        let mut patterns = Vec::new();
        let mut filters = Vec::new();
        loop {
            self.check_unsupported_word()?;
            match self.peek() {
                None => return Err(self.syntax("unexpected end of query")),
                Some(Tok::Punct("}")) => return Ok((patterns, filters)),
                Some(Tok::Punct("{")) => return Err(self.unsupported("nested group pattern")),
                Some(Tok::Punct(".")) => self.i += 1,
                Some(Tok::Word(w)) if w.eq_ignore_ascii_case("FILTER") => {
                    self.i += 1;
                    if self.is_word("NOT") || self.is_word("EXISTS") {
                        return Err(self.unsupported("EXISTS"));
                    }
                    let expr = if self.is_punct("(") {
                        self.primary()?
                    } else {
                        self.call()?
                    };
                    self.normalize_filter(expr, &mut filters)?;
                }
                _ => self.triples(&mut patterns)?,
            }
        }
    }

    fn triples(&mut self, out: &mut Vec<TriplePattern>) -> Result<(), QueryError> {
        let subject = self.term()?;
        if let PatternTerm::Const(Term::Literal(_)) = subject {
            return Err(self.syntax("literal in subject position"));
        }
        loop {
            let predicate = self.predicate()?;
            loop {
                let object = self.term()?;
                out.push(TriplePattern {
                    subject: subject.clone(),
                    predicate: predicate.clone(),
                    object,
                });
                if self.is_punct(",") {
                    self.i += 1;
                } else {
                    break;
                }
            }
            if self.is_punct(";") {
                self.i += 1;
                if self.is_punct(".") || self.is_punct("}") {
                    break;
                }
            } else {
                break;
            }
        }
        if self.is_punct(".") {
            self.i += 1;
        } else if !self.is_punct("}") {
            self.check_unsupported_word()?;
            return Err(self.syntax("expected '.' or '}' after triple pattern"));
        }
        Ok(())
    }

    fn predicate(&mut self) -> Result<String, QueryError> {
        let name = match self.peek() {
            Some(Tok::Var(_)) => return Err(self.unsupported("variable predicate")),
            Some(Tok::Word(w)) if w == "a" => return Err(self.unsupported("rdf:type shorthand 'a'")),
            Some(Tok::Punct("^")) => return Err(self.unsupported("property path")),
            Some(Tok::Punct("(")) => return Err(self.unsupported("property path")),
            Some(Tok::PName(..)) | Some(Tok::Iri(_)) => {
                let t = self.bump().unwrap();
                self.resolve_name(t)?
            }
            _ => return Err(self.syntax("expected predicate")),
        };
        if matches!(
            self.peek(),
            Some(Tok::Punct("/")) | Some(Tok::Punct("|")) | Some(Tok::Punct("*")) | Some(Tok::Punct("^"))
        ) || matches!(self.peek(), Some(Tok::Number(n)) if n.starts_with('+'))
        {
            return Err(self.unsupported("property path"));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(self.syntax("invalid relation name"));
        }
        Ok(name)
    }

    fn resolve_name(&mut self, tok: Tok) -> Result<String, QueryError> {
        let iri = match tok {
            Tok::Iri(iri) => iri,
            Tok::PName(p, local) => {
                let Some(base) = self.prefixes.get(&p) else {
                    self.i -= 1;
                    let e = self.syntax(format!("undeclared prefix {p:?}"));
                    self.i += 1;
                    return Err(e);
                };
                format!("{base}{local}")
            }
            _ => unreachable!("resolve_name on non-name token"),
        };
        Ok(match iri.strip_prefix(FREEBASE_NS) {
            Some(local) => percent_decode(local),
            None => iri,
        })
    }

    fn term(&mut self) -> Result<PatternTerm, QueryError> {
        match self.peek().cloned() {
            Some(Tok::Var(v)) => {
                self.i += 1;
                Ok(PatternTerm::Var(Var(v)))
            }
            Some(t @ (Tok::PName(..) | Tok::Iri(_))) => {
                self.i += 1;
                let name = self.resolve_name(t)?;
                EntityId::new(name)
                    .map(|e| PatternTerm::Const(Term::Entity(e)))
                    .map_err(|e| self.syntax(e.to_string()))
            }
            Some(Tok::Str(value, lang, datatype)) => {
                self.i += 1;
                Ok(PatternTerm::Const(Term::Literal(string_literal(
                    &value,
                    lang.as_deref(),
                    datatype.is_some(),
                ))))
            }
            Some(Tok::Number(n)) => {
                self.i += 1;
                Term::parse(&n)
                    .map(PatternTerm::Const)
                    .map_err(|e| self.syntax(e.to_string()))
            }
            Some(Tok::Punct("[")) | Some(Tok::Punct("(")) => Err(self.unsupported("blank node")),
            _ => {
                self.check_unsupported_word()?;
                Err(self.syntax("expected variable, name or literal"))
            }
        }
    }

    // expression grammar: or := and (('||' | OR) and)*
    fn expr(&mut self) -> Result<Expr, QueryError> {
        let mut items = vec![self.and_expr()?];
        while self.is_punct("||") || self.is_word("OR") {
            self.i += 1;
            items.push(self.and_expr()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::Or(items)
        })
    }

    fn and_expr(&mut self) -> Result<Expr, QueryError> {
        let mut items = vec![self.cmp_expr()?];
        while self.is_punct("&&") || self.is_word("AND") {
            self.i += 1;
            items.push(self.cmp_expr()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::And(items)
        })
    }

    fn cmp_expr(&mut self) -> Result<Expr, QueryError> {
        let lhs = self.unary()?;
        if self.is_punct("=") {
            self.i += 1;
            let rhs = self.unary()?;
            return Ok(Expr::Eq(Box::new(lhs), Box::new(rhs)));
        }
        if self.is_punct("!=") {
            self.i += 1;
            let rhs = self.unary()?;
            return Ok(Expr::Ne(Box::new(lhs), Box::new(rhs)));
        }
        if let Some(Tok::Punct(p @ ("<" | ">" | "<=" | ">="))) = self.peek() {
            let p = *p;
            return Err(self.unsupported(format!("comparison operator {p}")));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, QueryError> {
        if self.is_punct("!") {
            self.i += 1;
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, QueryError> {
        match self.peek().cloned() {
            Some(Tok::Punct("(")) => {
                self.i += 1;
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Some(Tok::Var(v)) => {
                self.i += 1;
                Ok(Expr::Var(Var(v)))
            }
            Some(Tok::Str(s, None, None)) => {
                self.i += 1;
                Ok(Expr::Str(s))
            }
            Some(Tok::Word(_)) => self.call(),
            Some(Tok::PName(..)) if matches!(self.peek_at(1), Some(Tok::Punct("("))) => {
                Err(self.unsupported(format!("function {}", self.name_text())))
            }
            Some(_) => self.term().map(Expr::Const),
            None => Err(self.syntax("unexpected end of filter")),
        }
    }

    fn name_text(&self) -> String {
        match self.peek() {
            Some(Tok::PName(p, l)) => format!("{p}:{l}"),
            Some(Tok::Word(w)) => w.clone(),
            _ => String::new(),
        }
    }

    fn var_arg(&mut self) -> Result<Var, QueryError> {
        self.expect_punct("(")?;
        let v = match self.bump() {
            Some(Tok::Var(v)) => Var(v),
            _ => {
                self.i -= 1;
                return Err(self.syntax("expected variable argument"));
            }
        };
        self.expect_punct(")")?;
        Ok(v)
    }

    fn call(&mut self) -> Result<Expr, QueryError> {
        let Some(Tok::Word(name)) = self.peek().cloned() else {
            return Err(self.syntax("expected function call"));
        };
        let lower = name.to_ascii_lowercase();
        if lower == "exists" || lower == "not" {
            return Err(self.unsupported("EXISTS"));
        }
        if !matches!(self.peek_at(1), Some(Tok::Punct("("))) {
            return Err(self.syntax(format!("unexpected word {name:?}")));
        }
        self.i += 1;
        match lower.as_str() {
            "isliteral" => Ok(Expr::IsLiteral(self.var_arg()?)),
            "lang" => Ok(Expr::Lang(self.var_arg()?)),
            "langmatches" => {
                self.expect_punct("(")?;
                let first = self.expr()?;
                self.expect_punct(",")?;
                let tag = match self.bump() {
                    Some(Tok::Str(s, None, None)) => s,
                    _ => {
                        self.i -= 1;
                        return Err(self.syntax("expected language range string"));
                    }
                };
                self.expect_punct(")")?;
                Ok(Expr::LangMatches(Box::new(first), tag))
            }
            _ => {
                self.i -= 1;
                Err(self.unsupported(format!("function {name}")))
            }
        }
    }

    fn normalize_filter(&self, expr: Expr, out: &mut Vec<Filter>) -> Result<(), QueryError> {
        match expr {
            Expr::And(items) => {
                for item in items {
                    self.normalize_filter(item, out)?;
                }
                Ok(())
            }
            Expr::Ne(a, b) => {
                let (var, other) = match (*a, *b) {
                    (Expr::Var(v), Expr::Var(w)) => (v, PatternTerm::Var(w)),
                    (Expr::Var(v), Expr::Const(c)) | (Expr::Const(c), Expr::Var(v)) => (v, c),
                    (Expr::Var(v), Expr::Str(s)) | (Expr::Str(s), Expr::Var(v)) => {
                        (v, PatternTerm::Const(Term::Literal(string_literal(&s, None, false))))
                    }
                    _ => return Err(self.unsupported("FILTER expression (inequality form)")),
                };
                out.push(Filter::NotEqual(var, other));
                Ok(())
            }
            Expr::Or(items) => match english_guard(&items) {
                Some(v) => {
                    out.push(Filter::NonLiteralOrEnglish(v));
                    Ok(())
                }
                None => Err(self.unsupported("FILTER expression (disjunction)")),
            },
            _ => Err(self.unsupported("FILTER expression")),
        }
    }
}

/// `!isLiteral(?v) || lang(?v) = '' || langMatches(lang(?v), 'en')` in any
/// order, with at least the non-literal test and one English test.
fn english_guard(items: &[Expr]) -> Option<Var> {
    let mut var: Option<&Var> = None;
    let mut has_nonlit = false;
    let mut has_en = false;
    for item in items {
        let v = match item {
            Expr::Not(inner) => match inner.as_ref() {
                Expr::IsLiteral(v) => {
                    has_nonlit = true;
                    v
                }
                _ => return None,
            },
            Expr::Eq(a, b) => match (a.as_ref(), b.as_ref()) {
                (Expr::Lang(v), Expr::Str(s)) | (Expr::Str(s), Expr::Lang(v))
                    if s.is_empty() || s.eq_ignore_ascii_case("en") =>
                {
                    has_en = true;
                    v
                }
                _ => return None,
            },
            Expr::LangMatches(a, tag) if tag.eq_ignore_ascii_case("en") => match a.as_ref() {
                Expr::Lang(v) => {
                    has_en = true;
                    v
                }
                _ => return None,
            },
            _ => return None,
        };
        if var.is_some_and(|w| w != v) {
            return None;
        }
        var = Some(v);
    }
    if has_nonlit && has_en {
        var.cloned()
    } else {
        None
    }
}

fn string_literal(value: &str, lang: Option<&str>, typed: bool) -> crate::kg::Literal {
    let raw = match lang {
        Some(tag) => format!("\"{value}\"@{tag}"),
        None if typed && looks_like_literal(value) && !value.starts_with('"') => value.to_string(),
        None => format!("\"{value}\""),
    };
    match Term::parse(&raw) {
        Ok(Term::Literal(l)) => l,
        // quoted tokens always classify as literals
        _ => unreachable!("quoted token did not parse as literal: {raw}"),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn english_ok(t: &Term) -> bool {
    match t {
        Term::Entity(_) => true,
        Term::Literal(l) => match l.lang() {
            None => true,
            Some(tag) => {
                let tag = tag.to_ascii_lowercase();
                tag == "en" || tag.starts_with("en-")
            }
        },
    }
}

impl Filter {
    pub fn accepts(&self, b: &BTreeMap<Var, Term>) -> bool {
        match self {
            Filter::NotEqual(v, other) => {
                let lhs = b.get(v);
                let rhs = match other {
                    PatternTerm::Var(w) => b.get(w),
                    PatternTerm::Const(c) => Some(c),
                };
                lhs != rhs
            }
            Filter::NonLiteralOrEnglish(v) => b.get(v).is_some_and(english_ok),
        }
    }
}

fn resolve<'a>(slot: &'a PatternTerm, b: &'a BTreeMap<Var, Term>) -> Option<&'a Term> {
    match slot {
        PatternTerm::Const(c) => Some(c),
        PatternTerm::Var(v) => b.get(v),
    }
}

fn unify(slot: &PatternTerm, value: &Term, b: &mut BTreeMap<Var, Term>) -> bool {
    match slot {
        PatternTerm::Const(c) => c == value,
        PatternTerm::Var(v) => match b.get(v) {
            Some(bound) => bound == value,
            None => {
                b.insert(v.clone(), value.clone());
                true
            }
        },
    }
}

/// All solutions, as total assignments, in lexicographic order without
/// duplicates. Patterns are joined left to right using the view's indices.
pub fn evaluate(q: &Query, g: &GraphView<'_>) -> Vec<Binding> {
    let mut out = BTreeSet::new();
    join(q, g, 0, &mut BTreeMap::new(), &mut out);
    out.into_iter().map(Binding).collect()
}

fn join(
    q: &Query,
    g: &GraphView<'_>,
    idx: usize,
    partial: &mut BTreeMap<Var, Term>,
    out: &mut BTreeSet<BTreeMap<Var, Term>>,
) {
    let Some(p) = q.patterns.get(idx) else {
        if q.filters.iter().all(|f| f.accepts(partial)) {
            out.insert(partial.clone());
        }
        return;
    };
    let subject = resolve(&p.subject, partial).cloned();
    let object = resolve(&p.object, partial).cloned();
    let candidates: Box<dyn Iterator<Item = &Triple>> = match (&subject, &object) {
        (Some(Term::Literal(_)), _) => return,
        (Some(Term::Entity(s)), _) => Box::new(g.out_triples(s)),
        (None, Some(Term::Entity(o))) => Box::new(g.in_triples(o)),
        _ => Box::new(g.triples()),
    };
    for t in candidates {
        if t.relation != p.predicate {
            continue;
        }
        let mut next = partial.clone();
        if unify(&p.subject, &Term::Entity(t.head.clone()), &mut next)
            && unify(&p.object, &t.tail, &mut next)
        {
            join(q, g, idx + 1, &mut next, out);
        }
    }
}

/// Instantiate every pattern with every binding; duplicates dropped, first
/// occurrence order kept.
pub fn bindings_to_triples(q: &Query, bindings: &[Binding]) -> Vec<Triple> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in bindings {
        for p in &q.patterns {
            let (Some(Term::Entity(head)), Some(tail)) =
                (resolve(&p.subject, &b.0), resolve(&p.object, &b.0))
            else {
                continue;
            };
            let t = Triple {
                head: head.clone(),
                relation: p.predicate.clone(),
                tail: tail.clone(),
            };
            if seen.insert(t.clone()) {
                out.push(t);
            }
        }
    }
    out
}

/// Drop triples whose tail is a literal (property values such as heights,
/// dates or free text).
pub fn filter_property_triples(triples: &[Triple]) -> Vec<Triple> {
    triples.iter().filter(|t| !t.tail.is_literal()).cloned().collect()
}
