//! Parameterless conversion between human and numeric property values.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::DatasetError;
use crate::schema::{DomainSchema, EntityRecord, PropertyType};

/// Reserved text symbols; observed characters start at [`FIRST_CHAR`].
pub const UNKNOWN: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const FIRST_CHAR: usize = 3;

/// Absolute upper bound on packed text length.
pub const MAX_TEXT_LEN: usize = 256;

/// Numeric form of a property value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PackedValue {
    Scalar(f64),
    Index(usize),
    Sequence(Vec<usize>),
    Vector(Vec<f64>),
}

impl PackedValue {
    pub fn all_finite(&self) -> bool {
        match self {
            PackedValue::Scalar(x) => x.is_finite(),
            PackedValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCodec {
    pub name: String,
    pub kind: PropertyType,
    /// Categorical values; index `categories.len()` is the unknown value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Text characters; index `i` holds the character packed as `i + FIRST_CHAR`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub characters: Vec<char>,
    pub mean: f64,
    pub std: f64,
    /// Vector width for distributions and places.
    pub dim: usize,
    pub max_len: usize,
}

impl PropertyCodec {
    fn empty(name: &str, kind: PropertyType) -> Self {
        PropertyCodec {
            name: name.to_string(),
            kind,
            categories: Vec::new(),
            characters: Vec::new(),
            mean: 0.0,
            std: 1.0,
            dim: match kind {
                PropertyType::Place => 2,
                PropertyType::Scalar | PropertyType::Date => 1,
                _ => 0,
            },
            max_len: 0,
        }
    }

    /// Number of categorical classes including the unknown slot, or the
    /// text symbol count including reserved symbols.
    pub fn vocab_size(&self) -> usize {
        match self.kind {
            PropertyType::Categorical => self.categories.len() + 1,
            PropertyType::Text => self.characters.len() + FIRST_CHAR,
            _ => 0,
        }
    }

    pub fn unknown_index(&self) -> usize {
        match self.kind {
            PropertyType::Categorical => self.categories.len(),
            _ => UNKNOWN,
        }
    }

    /// Width of the numeric form for vector-valued kinds.
    pub fn width(&self) -> usize {
        match self.kind {
            PropertyType::Scalar | PropertyType::Date => 1,
            PropertyType::Distribution | PropertyType::Place => self.dim,
            _ => 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> DatasetError {
        DatasetError::Pack {
            property: self.name.clone(),
            message: message.into(),
        }
    }

    /// Strict packing: unknown categorical values are an error.
    pub fn pack(&self, v: &Value) -> Result<PackedValue, DatasetError> {
        self.pack_inner(v, false)
    }

    /// Packing for what-if requests: unseen categorical values map to the
    /// unknown index.
    pub fn pack_lenient(&self, v: &Value) -> Result<PackedValue, DatasetError> {
        self.pack_inner(v, true)
    }

    fn pack_inner(&self, v: &Value, lenient: bool) -> Result<PackedValue, DatasetError> {
        crate::schema::check_value(self.kind, v).map_err(|m| self.err(m))?;
        match self.kind {
            PropertyType::Scalar => {
                let x = v.as_f64().unwrap();
                Ok(PackedValue::Scalar((x - self.mean) / self.std))
            }
            PropertyType::Date => {
                let days = parse_date(v.as_str().unwrap()).unwrap() as f64;
                Ok(PackedValue::Scalar((days - self.mean) / self.std))
            }
            PropertyType::Categorical => {
                let s = category_string(v);
                match self.categories.iter().position(|c| *c == s) {
                    Some(i) => Ok(PackedValue::Index(i)),
                    None if lenient => Ok(PackedValue::Index(self.unknown_index())),
                    None => Err(self.err(format!("value {s:?} not in vocabulary"))),
                }
            }
            PropertyType::Text => {
                let seq = v
                    .as_str()
                    .unwrap()
                    .chars()
                    .take(self.max_len)
                    .map(|c| {
                        self.characters
                            .iter()
                            .position(|&k| k == c)
                            .map_or(UNKNOWN, |i| i + FIRST_CHAR)
                    })
                    .collect();
                Ok(PackedValue::Sequence(seq))
            }
            PropertyType::Distribution => {
                let xs: Vec<f64> = v
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_f64().unwrap())
                    .collect();
                if xs.len() != self.dim {
                    return Err(self.err(format!(
                        "distribution has {} entries, expected {}",
                        xs.len(),
                        self.dim
                    )));
                }
                Ok(PackedValue::Vector(normalize_distribution(&xs)))
            }
            PropertyType::Place => {
                let lat = v["latitude"].as_f64().unwrap();
                let lon = v["longitude"].as_f64().unwrap();
                Ok(PackedValue::Vector(vec![lat / 90.0, lon / 180.0]))
            }
            PropertyType::Image => Err(self.err("image values are not packed")),
        }
    }

    pub fn unpack(&self, p: &PackedValue) -> Result<Value, DatasetError> {
        match (self.kind, p) {
            (PropertyType::Scalar, PackedValue::Scalar(x)) => Ok(json!(x * self.std + self.mean)),
            (PropertyType::Date, PackedValue::Scalar(x)) => {
                let days = (x * self.std + self.mean).round() as i64;
                Ok(Value::String(format_date(days)))
            }
            (PropertyType::Categorical, PackedValue::Index(i)) => {
                Ok(Value::String(self.categories.get(*i).cloned().unwrap_or_else(|| "<unknown>".into())))
            }
            (PropertyType::Text, PackedValue::Sequence(seq)) => Ok(Value::String(
                seq.iter()
                    .filter_map(|&i| match i {
                        UNKNOWN => Some('\u{FFFD}'),
                        START | END => None,
                        i => self.characters.get(i - FIRST_CHAR).copied(),
                    })
                    .collect(),
            )),
            (PropertyType::Distribution, PackedValue::Vector(v)) => Ok(json!(v)),
            (PropertyType::Place, PackedValue::Vector(v)) if v.len() == 2 => Ok(json!({
                "latitude": v[0] * 90.0,
                "longitude": v[1] * 180.0,
            })),
            _ => Err(self.err("numeric value does not match the property type")),
        }
    }
}

pub(crate) fn category_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Probabilities are rescaled to sum to one; all-nonpositive input is read as
/// log-probabilities.
pub fn normalize_distribution(xs: &[f64]) -> Vec<f64> {
    let probs = xs.iter().all(|&x| x >= 0.0) && xs.iter().sum::<f64>() > 0.0;
    let ps: Vec<f64> = if probs {
        xs.to_vec()
    } else {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        xs.iter().map(|x| (x - m).exp()).collect()
    };
    let total: f64 = ps.iter().sum();
    ps.iter().map(|p| p / total).collect()
}

/// Days since 1970-01-01 for a `YYYY-MM-DD` string.
pub fn parse_date(s: &str) -> Option<i64> {
    let d = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?;
    Some((d - epoch).num_days())
}

pub fn format_date(days: i64) -> String {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    epoch
        .checked_add_signed(chrono::Duration::days(days))
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| format!("{days} days"))
}

/// Codecs for every modeled property, keyed by property name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Codecs(pub IndexMap<String, PropertyCodec>);

impl Codecs {
    pub fn get(&self, name: &str) -> Option<&PropertyCodec> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PropertyCodec)> {
        self.0.iter()
    }
}

/// Builds vocabularies and statistics from the records at `training`.
pub fn build_codecs(
    schema: &DomainSchema,
    records: &[EntityRecord],
    training: &[usize],
) -> Result<Codecs, DatasetError> {
    let mut out = IndexMap::new();
    for (name, def) in &schema.properties {
        let mut codec = PropertyCodec::empty(name, def.kind);
        let values: Vec<&Value> = training
            .iter()
            .filter_map(|&i| records[i].properties.get(name))
            .collect();
        match def.kind {
            PropertyType::Scalar | PropertyType::Date => {
                let xs: Vec<f64> = values
                    .iter()
                    .map(|v| match def.kind {
                        PropertyType::Date => v.as_str().and_then(parse_date).map(|d| d as f64),
                        _ => v.as_f64(),
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| DatasetError::Pack {
                        property: name.clone(),
                        message: "non-numeric training value".into(),
                    })?;
                if !xs.is_empty() {
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    codec.mean = mean;
                    codec.std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                }
            }
            PropertyType::Categorical => {
                let mut seen = BTreeSet::new();
                for v in &values {
                    let s = category_string(v);
                    if seen.insert(s.clone()) {
                        codec.categories.push(s);
                    }
                }
                codec.categories.sort();
            }
            PropertyType::Text => {
                let mut chars = BTreeSet::new();
                let mut lens = Vec::with_capacity(values.len());
                for v in &values {
                    let s = v.as_str().unwrap_or_default();
                    chars.extend(s.chars());
                    lens.push(s.chars().count());
                }
                codec.characters = chars.into_iter().collect();
                codec.max_len = percentile_99(&mut lens).min(MAX_TEXT_LEN);
            }
            PropertyType::Distribution => {
                codec.dim = values
                    .iter()
                    .filter_map(|v| v.as_array().map(Vec::len))
                    .max()
                    .unwrap_or(0);
            }
            PropertyType::Place | PropertyType::Image => {}
        }
        out.insert(name.clone(), codec);
    }
    Ok(Codecs(out))
}

/// Nearest-rank 99th percentile.
fn percentile_99(lens: &mut [usize]) -> usize {
    if lens.is_empty() {
        return 0;
    }
    lens.sort_unstable();
    let rank = ((0.99 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
    lens[rank - 1]
}
