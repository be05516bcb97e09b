//! Domain schemas, configuration rules, entity records and their validation.

mod entity;
pub mod jsonpath;
pub mod relaxed;
mod rules;
mod tabular;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use entity::{read_entities, validate_entity, EntityRecord};
pub(crate) use entity::check_value;
pub use jsonpath::{jsonpath_select, JsonPath, Location, PathError};
pub use rules::{apply_rules, default_rules, parse_rules, ConfigRule, RuleOutcome};
pub use tabular::{derive_schema_from_tabular, DerivedTable, TabularHints};

pub type Meta = Map<String, Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyType {
    Scalar,
    Categorical,
    Text,
    Distribution,
    Date,
    Place,
    Image,
}

impl PropertyType {
    pub const ALL: [PropertyType; 7] = [
        PropertyType::Scalar,
        PropertyType::Categorical,
        PropertyType::Text,
        PropertyType::Distribution,
        PropertyType::Date,
        PropertyType::Place,
        PropertyType::Image,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyType::Scalar => "scalar",
            PropertyType::Categorical => "categorical",
            PropertyType::Text => "text",
            PropertyType::Distribution => "distribution",
            PropertyType::Date => "date",
            PropertyType::Place => "place",
            PropertyType::Image => "image",
        }
    }
}

impl FromStr for PropertyType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PropertyType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown property type {s:?}"))
    }
}

impl fmt::Display for PropertyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyType,
    pub meta: Meta,
    /// Keys other than `type` and `meta`, kept for round-tripping.
    pub extra: Meta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationshipDef {
    pub name: String,
    pub source_entity_type: String,
    pub target_entity_type: String,
    pub meta: Meta,
    pub extra: Meta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityTypeDef {
    pub name: String,
    pub properties: Vec<String>,
    pub meta: Meta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainSchema {
    pub context: Option<Value>,
    pub entity_types: IndexMap<String, EntityTypeDef>,
    pub properties: IndexMap<String, PropertyDef>,
    pub relationships: IndexMap<String, RelationshipDef>,
}

/// A located problem in a document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Diagnostic>,
    pub warnings: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Diagnostic::new(location, message));
    }

    pub fn warn(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Diagnostic::new(location, message));
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.errors.extend(other.errors);
        self.warnings.extend(other.warnings);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("syntax error: {0}")]
    Syntax(#[from] relaxed::SyntaxError),
    #[error("invalid schema: {}", join(.0))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("invalid rules: {0}")]
    Rules(String),
    #[error("tabular input: {0}")]
    Tabular(String),
}

fn join(ds: &[Diagnostic]) -> String {
    ds.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl SchemaError {
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        match self {
            SchemaError::Invalid(ds) => ds.clone(),
            other => vec![Diagnostic::new("$", other.to_string())],
        }
    }
}

/// Parses a schema document (`entity_types` / `properties` / `relationships`,
/// optional `@context`).
pub fn parse_schema(text: &str) -> Result<DomainSchema, SchemaError> {
    let doc = relaxed::parse_value(text)?;
    DomainSchema::from_document(&doc)
}

impl DomainSchema {
    pub fn from_document(doc: &Value) -> Result<Self, SchemaError> {
        let mut errors = Vec::new();
        let Some(root) = doc.as_object() else {
            return Err(SchemaError::Invalid(vec![Diagnostic::new(
                "$",
                "schema must be an object",
            )]));
        };
        for key in root.keys() {
            if !matches!(
                key.as_str(),
                "@context" | "entity_types" | "properties" | "relationships"
            ) {
                errors.push(Diagnostic::new(key, "unknown top-level key"));
            }
        }
        let section = |name: &str, errors: &mut Vec<Diagnostic>| -> Map<String, Value> {
            match root.get(name) {
                None => Map::new(),
                Some(Value::Object(m)) => m.clone(),
                Some(_) => {
                    errors.push(Diagnostic::new(name, "must be an object"));
                    Map::new()
                }
            }
        };

        let mut schema = DomainSchema {
            context: root.get("@context").cloned(),
            ..Default::default()
        };

        for (name, v) in section("properties", &mut errors) {
            let loc = format!("properties.{name}");
            let Some(obj) = v.as_object() else {
                errors.push(Diagnostic::new(loc, "property definition must be an object"));
                continue;
            };
            let kind = match obj.get("type").and_then(Value::as_str) {
                Some(t) => match t.parse::<PropertyType>() {
                    Ok(k) => k,
                    Err(e) => {
                        errors.push(Diagnostic::new(format!("{loc}.type"), e));
                        continue;
                    }
                },
                None => {
                    errors.push(Diagnostic::new(loc, "missing string field \"type\""));
                    continue;
                }
            };
            let meta = match read_meta(obj, &loc) {
                Ok(m) => m,
                Err(d) => {
                    errors.push(d);
                    continue;
                }
            };
            let extra = without(obj, &["type", "meta"]);
            schema.properties.insert(
                name.clone(),
                PropertyDef {
                    name,
                    kind,
                    meta,
                    extra,
                },
            );
        }

        for (name, v) in section("entity_types", &mut errors) {
            let loc = format!("entity_types.{name}");
            let (list, meta) = match &v {
                Value::Array(items) => (items.clone(), Meta::new()),
                Value::Object(obj) => {
                    let list = match obj.get("properties") {
                        Some(Value::Array(items)) => items.clone(),
                        None => Vec::new(),
                        Some(_) => {
                            errors.push(Diagnostic::new(
                                format!("{loc}.properties"),
                                "must be a list of property names",
                            ));
                            continue;
                        }
                    };
                    match read_meta(obj, &loc) {
                        Ok(m) => (list, m),
                        Err(d) => {
                            errors.push(d);
                            continue;
                        }
                    }
                }
                _ => {
                    errors.push(Diagnostic::new(loc, "must be a list of property names"));
                    continue;
                }
            };
            let mut properties: Vec<String> = Vec::new();
            for (i, item) in list.iter().enumerate() {
                match item.as_str() {
                    Some(p) if properties.iter().any(|q| q == p) => errors.push(Diagnostic::new(
                        format!("{loc}[{i}]"),
                        format!("duplicate property {p:?}"),
                    )),
                    Some(p) if !schema.properties.contains_key(p) => errors.push(Diagnostic::new(
                        format!("{loc}[{i}]"),
                        format!("undefined property {p:?}"),
                    )),
                    Some(p) => properties.push(p.to_string()),
                    None => errors.push(Diagnostic::new(
                        format!("{loc}[{i}]"),
                        "property names must be strings",
                    )),
                }
            }
            schema.entity_types.insert(
                name.clone(),
                EntityTypeDef {
                    name,
                    properties,
                    meta,
                },
            );
        }

        for (name, v) in section("relationships", &mut errors) {
            let loc = format!("relationships.{name}");
            let Some(obj) = v.as_object() else {
                errors.push(Diagnostic::new(loc, "relationship definition must be an object"));
                continue;
            };
            let mut ends = Vec::new();
            for field in ["source_entity_type", "target_entity_type"] {
                match obj.get(field).and_then(Value::as_str) {
                    Some(t) if schema.entity_types.contains_key(t) => ends.push(t.to_string()),
                    Some(t) => errors.push(Diagnostic::new(
                        loc.clone(),
                        format!("{field} refers to undefined entity-type {t:?}"),
                    )),
                    None => errors.push(Diagnostic::new(
                        loc.clone(),
                        format!("missing string field {field:?}"),
                    )),
                }
            }
            if name == "entity_type" || name == "id" || schema.properties.contains_key(&name) {
                errors.push(Diagnostic::new(
                    loc.clone(),
                    "relationship name collides with a property or metadata key",
                ));
            }
            let meta = match read_meta(obj, &loc) {
                Ok(m) => m,
                Err(d) => {
                    errors.push(d);
                    continue;
                }
            };
            if ends.len() == 2 {
                let extra = without(obj, &["source_entity_type", "target_entity_type", "meta"]);
                schema.relationships.insert(
                    name.clone(),
                    RelationshipDef {
                        name,
                        target_entity_type: ends.pop().unwrap(),
                        source_entity_type: ends.pop().unwrap(),
                        meta,
                        extra,
                    },
                );
            }
        }

        for p in schema.properties.keys() {
            if p == "entity_type" || p == "id" {
                errors.push(Diagnostic::new(
                    format!("properties.{p}"),
                    "name is reserved for entity metadata",
                ));
            }
        }

        if errors.is_empty() {
            Ok(schema)
        } else {
            Err(SchemaError::Invalid(errors))
        }
    }

    /// Canonical document form; entity-types with empty meta use the list layout.
    pub fn to_document(&self) -> Value {
        self.document(false)
    }

    /// Document form with every entity-type in object layout, so rules can
    /// annotate it.
    pub(crate) fn to_expanded_document(&self) -> Value {
        self.document(true)
    }

    fn document(&self, expand: bool) -> Value {
        let mut root = Map::new();
        if let Some(ctx) = &self.context {
            root.insert("@context".into(), ctx.clone());
        }
        let mut ets = Map::new();
        for (name, et) in &self.entity_types {
            let list = Value::Array(et.properties.iter().cloned().map(Value::String).collect());
            let v = if et.meta.is_empty() && !expand {
                list
            } else {
                let mut o = Map::new();
                o.insert("properties".into(), list);
                o.insert("meta".into(), Value::Object(et.meta.clone()));
                Value::Object(o)
            };
            ets.insert(name.clone(), v);
        }
        root.insert("entity_types".into(), Value::Object(ets));
        let mut props = Map::new();
        for (name, p) in &self.properties {
            let mut o = Map::new();
            o.insert("type".into(), Value::String(p.kind.as_str().into()));
            for (k, v) in &p.extra {
                o.insert(k.clone(), v.clone());
            }
            if !p.meta.is_empty() {
                o.insert("meta".into(), Value::Object(p.meta.clone()));
            }
            props.insert(name.clone(), Value::Object(o));
        }
        root.insert("properties".into(), Value::Object(props));
        let mut rels = Map::new();
        for (name, r) in &self.relationships {
            let mut o = Map::new();
            o.insert(
                "source_entity_type".into(),
                Value::String(r.source_entity_type.clone()),
            );
            o.insert(
                "target_entity_type".into(),
                Value::String(r.target_entity_type.clone()),
            );
            for (k, v) in &r.extra {
                o.insert(k.clone(), v.clone());
            }
            if !r.meta.is_empty() {
                o.insert("meta".into(), Value::Object(r.meta.clone()));
            }
            rels.insert(name.clone(), Value::Object(o));
        }
        root.insert("relationships".into(), Value::Object(rels));
        Value::Object(root)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("schema serializes")
    }

    /// Non-fatal findings, e.g. image properties that fall back to Null
    /// sub-architectures.
    pub fn lint(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for (name, p) in &self.properties {
            if p.kind == PropertyType::Image {
                out.push(Diagnostic::new(
                    format!("properties.{name}"),
                    "image properties are not modeled; Null encoder/decoder will be used",
                ));
            }
            if !self
                .entity_types
                .values()
                .any(|et| et.properties.contains(name))
            {
                out.push(Diagnostic::new(
                    format!("properties.{name}"),
                    "property is not used by any entity-type",
                ));
            }
        }
        out
    }

    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.get(name)
    }

    pub fn entity_type(&self, name: &str) -> Option<&EntityTypeDef> {
        self.entity_types.get(name)
    }

    pub fn relationship(&self, name: &str) -> Option<&RelationshipDef> {
        self.relationships.get(name)
    }

    /// Relationships whose source is `entity_type`.
    pub fn outgoing(&self, entity_type: &str) -> impl Iterator<Item = &RelationshipDef> {
        let et = entity_type.to_string();
        self.relationships
            .values()
            .filter(move |r| r.source_entity_type == et)
    }
}

fn read_meta(obj: &Map<String, Value>, loc: &str) -> Result<Meta, Diagnostic> {
    match obj.get("meta") {
        None => Ok(Meta::new()),
        Some(Value::Object(m)) => Ok(m.clone()),
        Some(_) => Err(Diagnostic::new(format!("{loc}.meta"), "meta must be an object")),
    }
}

fn without(obj: &Map<String, Value>, keys: &[&str]) -> Meta {
    obj.iter()
        .filter(|(k, _)| !keys.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
