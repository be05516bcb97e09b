use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AssembledModel, ModelError, WiringConfig};
use crate::blocks::BnStats;
use crate::dataset::Codecs;
use crate::schema::DomainSchema;
use crate::tensor::ParamTableEntry;

pub const MAGIC: &[u8; 8] = b"GRAPHAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Value,
    wiring: WiringConfig,
    codecs: Codecs,
    seed: u64,
    params: Vec<ParamTableEntry>,
    bn_stats: IndexMap<String, BnStats>,
    #[serde(default)]
    extra: Value,
}

/// A model together with free-form metadata stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AssembledModel,
    pub extra: Value,
}

impl Checkpoint {
    /// Layout: magic, version (u32 LE), CRC-32 of everything after it (u32 LE),
    /// header length (u64 LE), JSON header, little-endian f64 parameters.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let (table, params) = self.model.store.to_table();
        let header = Header {
            schema: self.model.schema.to_document(),
            wiring: self.model.wiring.clone(),
            codecs: self.model.codecs.clone(),
            seed: self.model.seed,
            params: table,
            bn_stats: self.model.bn_stats.clone(),
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut body = Vec::with_capacity(8 + header.len() + params.len());
        body.extend_from_slice(&(header.len() as u64).to_le_bytes());
        body.extend_from_slice(&header);
        body.extend_from_slice(&params);
        let mut out = Vec::with_capacity(16 + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
        let corrupt = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let body = &bytes[16..];
        if crc32fast::hash(body) != crc {
            return Err(corrupt("checksum mismatch, file is corrupt"));
        }
        let len = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
        if body.len() < 8 + len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[8..8 + len]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let schema = DomainSchema::from_document(&header.schema)?;
        let mut model = AssembledModel::assemble(&schema, &header.codecs, &header.wiring, header.seed)?;
        model.store.load_table(&header.params, &body[8 + len..])?;
        for (name, stats) in header.bn_stats {
            match model.bn_stats.get_mut(&name) {
                Some(s) if s.mean.len() == stats.mean.len() => *s = stats,
                _ => return Err(ModelError::Checkpoint(format!("unexpected normalization statistics for {name:?}"))),
            }
        }
        Ok(Checkpoint {
            model,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

impl AssembledModel {
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        Checkpoint {
            model: self.clone(),
            extra: Value::Null,
        }
        .save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<AssembledModel, ModelError> {
        Ok(Checkpoint::load(path)?.model)
    }
}
