use std::collections::{BTreeSet, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use super::{DomainSchema, EntityTypeDef, Meta, PropertyDef, PropertyType, RelationshipDef, SchemaError};

/// Optional guidance for schema derivation from a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularHints {
    /// Entity-type for columns without an explicit group.
    pub default_entity_type: String,
    /// Column name to entity-type.
    pub column_groups: IndexMap<String, String>,
    /// Entity-type to the column holding its ids. Types without one get a
    /// fresh entity per row.
    pub id_columns: IndexMap<String, String>,
    /// Column name to target entity-type; the column becomes a relationship
    /// from the column's group.
    pub foreign_keys: IndexMap<String, String>,
    /// Explicit property types, bypassing inference.
    pub types: IndexMap<String, PropertyType>,
}

impl Default for TabularHints {
    fn default() -> Self {
        TabularHints {
            default_entity_type: "record".into(),
            column_groups: IndexMap::new(),
            id_columns: IndexMap::new(),
            foreign_keys: IndexMap::new(),
            types: IndexMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivedTable {
    pub schema: DomainSchema,
    pub entities: Vec<Value>,
}

/// Most distinct values a categorical column may have relative to the row count.
const CATEGORICAL_FRACTION: f64 = 0.1;
const CATEGORICAL_CAP: f64 = 32.0;

/// Infers the type of a column from its non-empty cells.
pub(crate) fn infer_column_type(cells: &[&str], n_rows: usize) -> PropertyType {
    if cells.is_empty() {
        return PropertyType::Text;
    }
    if cells.iter().all(|c| c.trim().parse::<f64>().is_ok_and(f64::is_finite)) {
        return PropertyType::Scalar;
    }
    let distinct: BTreeSet<&str> = cells.iter().copied().collect();
    let limit = CATEGORICAL_CAP.min(CATEGORICAL_FRACTION * n_rows as f64);
    if distinct.len() as f64 <= limit {
        PropertyType::Categorical
    } else {
        PropertyType::Text
    }
}

/// Derives a schema and entity records from comma-separated text with a header row.
pub fn derive_schema_from_tabular(
    csv_text: &str,
    hints: &TabularHints,
) -> Result<DerivedTable, SchemaError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(csv_text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SchemaError::Tabular(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| SchemaError::Tabular(e.to_string()))?;
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    if rows.is_empty() || headers.is_empty() {
        return Err(SchemaError::Tabular("empty table".into()));
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h) {
            return Err(SchemaError::Tabular(format!("duplicate column {h:?}")));
        }
    }

    let group_of = |col: &str| -> String {
        hints
            .column_groups
            .get(col)
            .cloned()
            .unwrap_or_else(|| hints.default_entity_type.clone())
    };
    let is_id_col = |col: &str| hints.id_columns.get(&group_of(col)).is_some_and(|c| c == col);

    let mut schema = DomainSchema::default();
    for col in &headers {
        let g = group_of(col);
        schema.entity_types.entry(g.clone()).or_insert_with(|| EntityTypeDef {
            name: g.clone(),
            properties: Vec::new(),
            meta: Meta::new(),
        });
    }
    for target in hints.foreign_keys.values() {
        if !schema.entity_types.contains_key(target) {
            return Err(SchemaError::Tabular(format!(
                "foreign key target {target:?} is not a column group"
            )));
        }
    }

    let mut kinds: IndexMap<usize, PropertyType> = IndexMap::new();
    for (ci, col) in headers.iter().enumerate() {
        let g = group_of(col);
        if let Some(target) = hints.foreign_keys.get(col) {
            schema.relationships.insert(
                col.clone(),
                RelationshipDef {
                    name: col.clone(),
                    source_entity_type: g,
                    target_entity_type: target.clone(),
                    meta: Meta::new(),
                    extra: Meta::new(),
                },
            );
            continue;
        }
        if is_id_col(col) {
            continue;
        }
        let cells: Vec<&str> = rows
            .iter()
            .map(|r| r[ci].as_str())
            .filter(|c| !c.is_empty())
            .collect();
        let kind = hints
            .types
            .get(col)
            .copied()
            .unwrap_or_else(|| infer_column_type(&cells, rows.len()));
        kinds.insert(ci, kind);
        schema.properties.insert(
            col.clone(),
            PropertyDef {
                name: col.clone(),
                kind,
                meta: Meta::new(),
                extra: Meta::new(),
            },
        );
        schema.entity_types[&g].properties.push(col.clone());
    }

    let mut entities: IndexMap<String, Map<String, Value>> = IndexMap::new();
    let groups: Vec<String> = schema.entity_types.keys().cloned().collect();
    for (ri, row) in rows.iter().enumerate() {
        let mut ids: IndexMap<&str, String> = IndexMap::new();
        for g in &groups {
            let id = match hints.id_columns.get(g) {
                Some(col) => {
                    let ci = headers.iter().position(|h| h == col).ok_or_else(|| {
                        SchemaError::Tabular(format!("id column {col:?} not in header"))
                    })?;
                    if row[ci].is_empty() {
                        continue;
                    }
                    row[ci].clone()
                }
                None => format!("{g}{}", ri + 1),
            };
            ids.insert(g, id);
        }
        for (g, id) in &ids {
            let key = format!("{g}\u{0}{id}");
            let fresh = !entities.contains_key(&key);
            let e = entities.entry(key).or_insert_with(|| {
                let mut m = Map::new();
                m.insert("entity_type".into(), Value::String(g.to_string()));
                m.insert("id".into(), Value::String(id.clone()));
                m
            });
            for (ci, col) in headers.iter().enumerate() {
                if group_of(col) != *g || row[ci].is_empty() {
                    continue;
                }
                if hints.foreign_keys.contains_key(col) {
                    let list = e
                        .entry(col.clone())
                        .or_insert_with(|| Value::Array(Vec::new()));
                    let v = Value::String(row[ci].clone());
                    if let Value::Array(items) = list {
                        if !items.contains(&v) {
                            items.push(v);
                        }
                    }
                } else if let Some(kind) = kinds.get(&ci) {
                    if !fresh && e.contains_key(col) {
                        continue;
                    }
                    e.insert(col.clone(), cell_value(*kind, &row[ci]));
                }
            }
        }
    }

    Ok(DerivedTable {
        schema,
        entities: entities.into_values().map(Value::Object).collect(),
    })
}

fn cell_value(kind: PropertyType, cell: &str) -> Value {
    match kind {
        PropertyType::Scalar => cell
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .unwrap_or_else(|| Value::String(cell.into())),
        _ => Value::String(cell.into()),
    }
}
