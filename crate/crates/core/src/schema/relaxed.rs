//! A forgiving JSON reader for hand-edited documents.
//!
//! Accepts standard JSON plus missing or trailing commas between object
//! members and array elements, and several top-level values in one stream.

use serde_json::{Map, Number, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Parses exactly one value.
pub fn parse_value(text: &str) -> Result<Value, SyntaxError> {
    let mut p = Parser::new(text);
    p.skip_ws();
    let v = p.value()?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        return Err(p.error("trailing content after value"));
    }
    Ok(v)
}

/// Parses zero or more consecutive top-level values, optionally separated by commas.
pub fn parse_stream(text: &str) -> Result<Vec<Value>, SyntaxError> {
    let mut p = Parser::new(text);
    let mut out = Vec::new();
    loop {
        p.skip_ws();
        while p.peek() == Some(b',') {
            p.pos += 1;
            p.skip_ws();
        }
        if p.pos >= p.bytes.len() {
            return Ok(out);
        }
        out.push(p.value()?);
    }
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    depth: usize,
}

const MAX_DEPTH: usize = 256;

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            text,
            bytes: text.as_bytes(),
            pos: 0,
            depth: 0,
        }
    }

    fn error(&self, message: impl Into<String>) -> SyntaxError {
        let upto = &self.text[..self.pos.min(self.text.len())];
        let line = upto.matches('\n').count() + 1;
        let column = upto.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        SyntaxError {
            line,
            column,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn value(&mut self) -> Result<Value, SyntaxError> {
        match self.peek() {
            Some(b'{') => self.object(),
            Some(b'[') => self.array(),
            Some(b'"') => self.string().map(Value::String),
            Some(b't') => self.literal("true", Value::Bool(true)),
            Some(b'f') => self.literal("false", Value::Bool(false)),
            Some(b'n') => self.literal("null", Value::Null),
            Some(b) if b == b'-' || b.is_ascii_digit() => self.number(),
            Some(_) => {
                let c = self.text[self.pos..].chars().next().unwrap();
                Err(self.error(format!("unexpected character {c:?}")))
            }
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn enter(&mut self) -> Result<(), SyntaxError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        Ok(())
    }

    fn object(&mut self) -> Result<Value, SyntaxError> {
        self.enter()?;
        self.pos += 1;
        let mut map = Map::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'}') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') => {
                    self.pos += 1;
                }
                Some(b'"') => {
                    let key = self.string()?;
                    self.skip_ws();
                    if self.peek() != Some(b':') {
                        return Err(self.error(format!("expected ':' after key {key:?}")));
                    }
                    self.pos += 1;
                    self.skip_ws();
                    let v = self.value()?;
                    map.insert(key, v);
                }
                None => return Err(self.error("unterminated object")),
                Some(_) => return Err(self.error("expected object key")),
            }
        }
        self.depth -= 1;
        Ok(Value::Object(map))
    }

    fn array(&mut self) -> Result<Value, SyntaxError> {
        self.enter()?;
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') => {
                    self.pos += 1;
                }
                None => return Err(self.error("unterminated array")),
                Some(_) => items.push(self.value()?),
            }
        }
        self.depth -= 1;
        Ok(Value::Array(items))
    }

    fn string(&mut self) -> Result<String, SyntaxError> {
        let start = self.pos;
        self.pos += 1;
        loop {
            match self.peek() {
                Some(b'"') => {
                    self.pos += 1;
                    break;
                }
                Some(b'\\') => self.pos += 2,
                Some(_) => self.pos += 1,
                None => {
                    self.pos = start;
                    return Err(self.error("unterminated string"));
                }
            }
        }
        let raw = &self.text[start..self.pos];
        serde_json::from_str::<String>(raw).map_err(|e| {
            let mut err = self.error(format!("invalid string literal: {e}"));
            err.column = err.column.saturating_sub(raw.chars().count());
            err
        })
    }

    fn number(&mut self) -> Result<Value, SyntaxError> {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let raw = &self.text[start..self.pos];
        serde_json::from_str::<Number>(raw)
            .map(Value::Number)
            .map_err(|_| {
                self.pos = start;
                self.error(format!("invalid number {raw:?}"))
            })
    }

    fn literal(&mut self, word: &str, v: Value) -> Result<Value, SyntaxError> {
        if self.text[self.pos..].starts_with(word) {
            self.pos += word.len();
            Ok(v)
        } else {
            Err(self.error("invalid literal"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strict_json_agrees_with_serde() {
        let text = r#"{"a": [1, 2.5, -3e2, "x\né"], "b": {"c": null, "d": true}}"#;
        let expected: Value = serde_json::from_str(text).unwrap();
        assert_eq!(parse_value(text).unwrap(), expected);
    }

    #[test]
    fn tolerates_missing_and_trailing_commas() {
        let v = parse_value("{\"a\": {\"x\": 1}\n \"b\": [1, 2,],\n}").unwrap();
        assert_eq!(v, json!({"a": {"x": 1}, "b": [1, 2]}));
    }

    #[test]
    fn stream_of_objects() {
        let vs = parse_stream("{\"id\": 1}\n{\"id\": 2,}\n").unwrap();
        assert_eq!(vs, vec![json!({"id": 1}), json!({"id": 2})]);
        assert!(parse_stream("  \n").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_position() {
        let err = parse_value("{\n  \"a\": @\n}").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains('@'));
        assert!(parse_value("[1, 2").is_err());
        assert!(parse_value("\"abc").is_err());
    }
}
