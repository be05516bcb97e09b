use serde_json::Value;

use super::{relaxed, Diagnostic, DomainSchema, JsonPath, Meta, SchemaError};

const DEFAULT_RULES: &str = include_str!("default_rules.json");

/// A JSONPath pattern and the values written into `meta` at every match.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigRule {
    pub path: JsonPath,
    pub values: Meta,
}

impl ConfigRule {
    pub fn new(pattern: &str, values: Meta) -> Result<Self, SchemaError> {
        Ok(ConfigRule {
            path: JsonPath::parse(pattern)?,
            values,
        })
    }

    pub fn pattern(&self) -> &str {
        self.path.source()
    }

    /// Merges `values` into the `meta` object of every matching object node.
    /// Returns the number of locations written.
    fn apply_to(&self, doc: &mut Value, warnings: &mut Vec<Diagnostic>) -> usize {
        let mut written = 0;
        for loc in self.path.select(doc) {
            match loc.resolve_mut(doc) {
                Some(Value::Object(node)) => {
                    let meta = node
                        .entry("meta")
                        .or_insert_with(|| Value::Object(Meta::new()));
                    if !meta.is_object() {
                        *meta = Value::Object(Meta::new());
                    }
                    let meta = meta.as_object_mut().unwrap();
                    for (k, v) in &self.values {
                        meta.insert(k.clone(), v.clone());
                    }
                    written += 1;
                }
                _ => warnings.push(Diagnostic::new(
                    loc.to_string(),
                    format!("rule {:?} matched a non-object node", self.pattern()),
                )),
            }
        }
        written
    }
}

/// Reads a rules document: either a single `[pattern, values]` pair or a
/// list of such pairs. Several top-level values are concatenated.
pub fn parse_rules(text: &str) -> Result<Vec<ConfigRule>, SchemaError> {
    let mut rules = Vec::new();
    for doc in relaxed::parse_stream(text)? {
        let Value::Array(items) = &doc else {
            return Err(SchemaError::Rules("expected a [pattern, values] pair or a list of pairs".into()));
        };
        if items.first().is_some_and(Value::is_string) {
            rules.push(rule_from_pair(&doc, 0)?);
        } else {
            for (i, pair) in items.iter().enumerate() {
                rules.push(rule_from_pair(pair, i)?);
            }
        }
    }
    Ok(rules)
}

fn rule_from_pair(v: &Value, index: usize) -> Result<ConfigRule, SchemaError> {
    match v.as_array().map(Vec::as_slice) {
        Some([Value::String(pattern), Value::Object(values)]) => {
            ConfigRule::new(pattern, values.clone())
        }
        _ => Err(SchemaError::Rules(format!(
            "rule {index}: expected [pattern string, values object]"
        ))),
    }
}

/// Per-type encoder/decoder/loss defaults and sizes, applied before user rules.
pub fn default_rules() -> Vec<ConfigRule> {
    parse_rules(DEFAULT_RULES).expect("bundled default rules are valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleOutcome {
    pub schema: DomainSchema,
    pub warnings: Vec<Diagnostic>,
}

/// Applies the default rules and then `rules`, in order, to the schema's
/// `meta` fields. Later writes overwrite earlier keys.
pub fn apply_rules(schema: &DomainSchema, rules: &[ConfigRule]) -> Result<RuleOutcome, SchemaError> {
    let mut doc = schema.to_expanded_document();
    let mut warnings = Vec::new();
    let mut ignored = Vec::new();
    for rule in default_rules() {
        rule.apply_to(&mut doc, &mut ignored);
    }
    for rule in rules {
        if rule.apply_to(&mut doc, &mut warnings) == 0 {
            warnings.push(Diagnostic::new(
                "rules",
                format!("rule {:?} matched no locations", rule.pattern()),
            ));
        }
    }
    let schema = DomainSchema::from_document(&doc)?;
    Ok(RuleOutcome { schema, warnings })
}
