//! The JSONPath subset used by configuration rules: `$`, dotted or bracketed
//! child names, `*` wildcards, array indices, and string-equality filters
//! `[?(@.field=='literal')]`.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unsupported JSONPath syntax at offset {offset}: {token:?} ({message})")]
pub struct PathError {
    pub offset: usize,
    pub token: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Child(String),
    Index(usize),
    Wildcard,
    Filter { field: Vec<String>, literal: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsonPath {
    source: String,
    segments: Vec<Segment>,
}

/// One step from a parent node to a child.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    Key(String),
    Index(usize),
}

/// Path from the document root to a node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Location(pub Vec<Step>);

impl Location {
    pub fn root() -> Self {
        Location(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn steps(&self) -> &[Step] {
        &self.0
    }

    fn child(&self, step: Step) -> Self {
        let mut steps = self.0.clone();
        steps.push(step);
        Location(steps)
    }

    pub fn resolve<'a>(&self, doc: &'a Value) -> Option<&'a Value> {
        self.0.iter().try_fold(doc, |node, step| match step {
            Step::Key(k) => node.get(k),
            Step::Index(i) => node.get(*i),
        })
    }

    pub fn resolve_mut<'a>(&self, doc: &'a mut Value) -> Option<&'a mut Value> {
        self.0.iter().try_fold(doc, |node, step| match step {
            Step::Key(k) => node.get_mut(k),
            Step::Index(i) => node.get_mut(*i),
        })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "$")?;
        for step in &self.0 {
            match step {
                Step::Key(k) => write!(f, ".{k}")?,
                Step::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

impl JsonPath {
    pub fn parse(source: &str) -> Result<Self, PathError> {
        let mut lexer = Lexer {
            src: source,
            pos: 0,
        };
        lexer.skip_ws();
        if !lexer.eat("$") {
            return Err(lexer.error("path must start with '$'"));
        }
        let mut segments = Vec::new();
        loop {
            lexer.skip_ws();
            if lexer.at_end() {
                break;
            }
            if lexer.eat("..") {
                return Err(PathError {
                    offset: lexer.pos - 2,
                    token: "..".into(),
                    message: "recursive descent is not supported".into(),
                });
            }
            if lexer.eat(".") {
                if lexer.eat("*") {
                    segments.push(Segment::Wildcard);
                } else {
                    let name = lexer.identifier()?;
                    segments.push(Segment::Child(name));
                }
            } else if lexer.eat("[") {
                lexer.skip_ws();
                let seg = if lexer.eat("*") {
                    Segment::Wildcard
                } else if lexer.eat("?") {
                    lexer.filter()?
                } else if matches!(lexer.peek(), Some('\'') | Some('"')) {
                    Segment::Child(lexer.quoted()?)
                } else if lexer.peek().is_some_and(|c| c.is_ascii_digit()) {
                    Segment::Index(lexer.integer()?)
                } else {
                    return Err(lexer.error("expected '*', '?', a quoted name or an index"));
                };
                lexer.skip_ws();
                if !lexer.eat("]") {
                    return Err(lexer.error("expected ']'"));
                }
                segments.push(seg);
            } else {
                return Err(lexer.error("expected '.' or '['"));
            }
        }
        Ok(JsonPath {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// All matching locations in document order.
    pub fn select(&self, doc: &Value) -> Vec<Location> {
        let mut current = vec![(Location::root(), doc)];
        for seg in &self.segments {
            let mut next = Vec::new();
            for (loc, node) in current {
                match seg {
                    Segment::Child(name) => {
                        if let Some(child) = node.get(name.as_str()).filter(|_| node.is_object()) {
                            next.push((loc.child(Step::Key(name.clone())), child));
                        }
                    }
                    Segment::Index(i) => {
                        if let Some(child) = node.as_array().and_then(|a| a.get(*i)) {
                            next.push((loc.child(Step::Index(*i)), child));
                        }
                    }
                    Segment::Wildcard => next.extend(children(&loc, node)),
                    Segment::Filter { field, literal } => {
                        for (cl, child) in children(&loc, node) {
                            let hit = field
                                .iter()
                                .try_fold(child, |n, k| n.get(k.as_str()))
                                .and_then(Value::as_str)
                                .is_some_and(|s| s == literal);
                            if hit {
                                next.push((cl, child));
                            }
                        }
                    }
                }
            }
            current = next;
        }
        current.into_iter().map(|(loc, _)| loc).collect()
    }
}

fn children<'a>(loc: &Location, node: &'a Value) -> Vec<(Location, &'a Value)> {
    match node {
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| (loc.child(Step::Key(k.clone())), v))
            .collect(),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, v)| (loc.child(Step::Index(i)), v))
            .collect(),
        _ => Vec::new(),
    }
}

/// Convenience wrapper: parse `pattern` and select from `doc`.
pub fn jsonpath_select(doc: &Value, pattern: &str) -> Result<Vec<Location>, PathError> {
    Ok(JsonPath::parse(pattern)?.select(doc))
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl Lexer<'_> {
    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += self.peek().unwrap().len_utf8();
        }
    }

    fn error(&self, message: &str) -> PathError {
        let token: String = self
            .rest()
            .chars()
            .take_while(|c| !c.is_whitespace())
            .take(12)
            .collect();
        PathError {
            offset: self.pos,
            token: if token.is_empty() {
                "<end>".into()
            } else {
                token
            },
            message: message.into(),
        }
    }

    fn identifier(&mut self) -> Result<String, PathError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '-' || c == '@')
        {
            self.pos += self.peek().unwrap().len_utf8();
        }
        if start == self.pos {
            return Err(self.error("expected a name"));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn integer(&mut self) -> Result<usize, PathError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.src[start..self.pos]
            .parse()
            .map_err(|_| self.error("bad index"))
    }

    fn quoted(&mut self) -> Result<String, PathError> {
        let q = self.peek().unwrap();
        let start = self.pos;
        self.pos += 1;
        let body_start = self.pos;
        while let Some(c) = self.peek() {
            if c == q {
                let s = self.src[body_start..self.pos].to_string();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += c.len_utf8();
        }
        self.pos = start;
        Err(self.error("unterminated string literal"))
    }

    /// After `?`: `(@.a.b == 'lit')`.
    fn filter(&mut self) -> Result<Segment, PathError> {
        self.skip_ws();
        if !self.eat("(") {
            return Err(self.error("expected '(' after '?'"));
        }
        self.skip_ws();
        if !self.eat("@") {
            return Err(self.error("filter must test a field of '@'"));
        }
        let mut field = Vec::new();
        while self.eat(".") {
            field.push(self.identifier()?);
        }
        if field.is_empty() {
            return Err(self.error("expected '@.field'"));
        }
        self.skip_ws();
        if !self.eat("==") {
            return Err(self.error("only '==' comparisons are supported"));
        }
        self.skip_ws();
        if !matches!(self.peek(), Some('\'') | Some('"')) {
            return Err(self.error("only string literals are supported"));
        }
        let literal = self.quoted()?;
        self.skip_ws();
        if !self.eat(")") {
            return Err(self.error("expected ')'"));
        }
        Ok(Segment::Filter { field, literal })
    }
}
