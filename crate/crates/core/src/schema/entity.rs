use indexmap::IndexMap;
use serde_json::{Map, Value};

use super::{relaxed, DomainSchema, PropertyType, SchemaError, ValidationReport};

/// A validated entity in human form.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityRecord {
    pub entity_type: String,
    pub id: String,
    /// Present, non-null property values.
    pub properties: IndexMap<String, Value>,
    /// Relationship name to target ids.
    pub relationships: IndexMap<String, Vec<String>>,
}

impl EntityRecord {
    /// Validates `raw` against `schema` and converts it.
    pub fn parse(schema: &DomainSchema, raw: &Value) -> Result<EntityRecord, ValidationReport> {
        let report = validate_entity(schema, raw);
        if !report.is_ok() {
            return Err(report);
        }
        let obj = raw.as_object().unwrap();
        let mut rec = EntityRecord {
            entity_type: obj["entity_type"].as_str().unwrap().to_string(),
            id: id_string(&obj["id"]).unwrap(),
            properties: IndexMap::new(),
            relationships: IndexMap::new(),
        };
        for (k, v) in obj {
            if k == "entity_type" || k == "id" || v.is_null() {
                continue;
            }
            if schema.properties.contains_key(k) {
                rec.properties.insert(k.clone(), v.clone());
            } else {
                let ids = match v {
                    Value::Array(items) => items.iter().filter_map(id_string).collect(),
                    other => vec![id_string(other).unwrap()],
                };
                rec.relationships.insert(k.clone(), ids);
            }
        }
        Ok(rec)
    }

    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("entity_type".into(), Value::String(self.entity_type.clone()));
        obj.insert("id".into(), Value::String(self.id.clone()));
        for (k, v) in &self.properties {
            obj.insert(k.clone(), v.clone());
        }
        for (k, ids) in &self.relationships {
            obj.insert(
                k.clone(),
                Value::Array(ids.iter().cloned().map(Value::String).collect()),
            );
        }
        Value::Object(obj)
    }
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Checks one entity record against the schema. Never fails; problems are
/// reported.
pub fn validate_entity(schema: &DomainSchema, raw: &Value) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Some(obj) = raw.as_object() else {
        report.error("$", "entity must be an object");
        return report;
    };
    let id = obj.get("id").and_then(id_string);
    let here = id.clone().unwrap_or_else(|| "<no id>".into());
    if id.is_none() {
        report.error(format!("{here}.id"), "missing or empty id");
    }
    let et_name = match obj.get("entity_type").and_then(Value::as_str) {
        Some(t) => t,
        None => {
            report.error(format!("{here}.entity_type"), "missing entity_type");
            return report;
        }
    };
    let Some(et) = schema.entity_types.get(et_name) else {
        report.error(
            format!("{here}.entity_type"),
            format!("unknown entity-type {et_name:?}"),
        );
        return report;
    };
    for (key, value) in obj {
        if key == "entity_type" || key == "id" {
            continue;
        }
        let loc = format!("{here}.{key}");
        if et.properties.iter().any(|p| p == key) {
            if value.is_null() {
                continue;
            }
            let kind = schema.properties[key].kind;
            if let Err(msg) = check_value(kind, value) {
                report.error(loc, msg);
            } else if kind == PropertyType::Image {
                report.warn(loc, "image values are ignored by the model");
            }
        } else if let Some(rel) = schema.relationships.get(key) {
            if rel.source_entity_type != et_name {
                report.error(
                    loc,
                    format!(
                        "relationship {key:?} has source entity-type {:?}, not {et_name:?}",
                        rel.source_entity_type
                    ),
                );
                continue;
            }
            let ok = match value {
                Value::Array(items) => items.iter().all(|v| id_string(v).is_some()),
                Value::Null => true,
                other => id_string(other).is_some(),
            };
            if !ok {
                report.error(loc, "relationship values must be ids or lists of ids");
            }
        } else {
            report.error(
                loc,
                format!("unknown property for entity-type {et_name}"),
            );
        }
    }
    report
}

/// Type check of a single human-form value.
pub(crate) fn check_value(kind: PropertyType, v: &Value) -> Result<(), String> {
    let finite = |x: &Value| x.as_f64().is_some_and(f64::is_finite);
    match kind {
        PropertyType::Scalar => finite(v)
            .then_some(())
            .ok_or_else(|| "scalar value must be a finite number".to_string()),
        PropertyType::Categorical => match v {
            Value::String(_) | Value::Number(_) | Value::Bool(_) => Ok(()),
            _ => Err("categorical value must be a string, number or boolean".into()),
        },
        PropertyType::Text | PropertyType::Image => v
            .is_string()
            .then_some(())
            .ok_or_else(|| format!("{kind} value must be a string")),
        PropertyType::Distribution => {
            let Some(items) = v.as_array() else {
                return Err("distribution must be a list of numbers".into());
            };
            if items.is_empty() || !items.iter().all(finite) {
                return Err("distribution must be a non-empty list of finite numbers".into());
            }
            let xs: Vec<f64> = items.iter().map(|x| x.as_f64().unwrap()).collect();
            let probs = xs.iter().all(|&x| x >= 0.0) && xs.iter().sum::<f64>() > 0.0;
            let logs = xs.iter().all(|&x| x <= 0.0);
            if probs || logs {
                Ok(())
            } else {
                Err("distribution must hold probabilities or log-probabilities".into())
            }
        }
        PropertyType::Date => match v {
            Value::String(s) => crate::dataset::parse_date(s)
                .map(|_| ())
                .ok_or_else(|| format!("unparseable date {s:?} (expected YYYY-MM-DD)")),
            _ => Err("date must be a YYYY-MM-DD string".into()),
        },
        PropertyType::Place => {
            let lat = v.get("latitude").filter(|x| finite(x)).and_then(Value::as_f64);
            let lon = v.get("longitude").filter(|x| finite(x)).and_then(Value::as_f64);
            match (lat, lon) {
                (Some(lat), Some(lon)) if lat.abs() <= 90.0 && lon.abs() <= 180.0 => Ok(()),
                (Some(_), Some(_)) => Err("place coordinates out of range".into()),
                _ => Err("place needs numeric latitude and longitude".into()),
            }
        }
    }
}

/// Reads an entity file: a stream of records (one per line, or
/// pretty-printed objects back to back), or a single list of records.
pub fn read_entities(text: &str) -> Result<Vec<Value>, SchemaError> {
    let mut values = relaxed::parse_stream(text)?;
    if values.len() == 1 && values[0].is_array() {
        let Value::Array(items) = values.pop().unwrap() else {
            unreachable!()
        };
        return Ok(items);
    }
    Ok(values)
}
