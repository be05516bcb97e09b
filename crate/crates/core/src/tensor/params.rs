use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// One row of the serialized parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTableEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat value array, in elements.
    pub offset: usize,
}

/// Named trainable parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]`, uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn add_bias(&mut self, name: impl Into<String>, size: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[size]))
    }

    /// Embedding table `[rows, dim]` drawn from N(0, 1) / sqrt(dim).
    pub fn add_embedding<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> ParamId {
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        let data = (0..rows * dim)
            .map(|_| { let z: f64 = StandardNormal.sample(rng); z * scale })
            .collect();
        self.add(name, Tensor::new(vec![rows, dim], data).unwrap())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Parameter table plus the flat little-endian value bytes.
    pub fn to_table(&self) -> (Vec<ParamTableEntry>, Vec<u8>) {
        let mut table = Vec::with_capacity(self.entries.len());
        let mut bytes = Vec::with_capacity(self.scalar_count() * 8);
        let mut offset = 0;
        for e in &self.entries {
            table.push(ParamTableEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
            });
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += e.value.len();
        }
        (table, bytes)
    }

    /// Overwrites parameters by name from a serialized table. Every parameter
    /// of `self` must be present with an identical shape.
    pub fn load_table(&mut self, table: &[ParamTableEntry], bytes: &[u8]) -> Result<(), TensorError> {
        if !bytes.len().is_multiple_of(8) {
            return Err(TensorError::Invalid {
                op: "load_table",
                message: format!("value block of {} bytes is not a multiple of 8", bytes.len()),
            });
        }
        let total = bytes.len() / 8;
        for entry in &mut self.entries {
            let row = table.iter().find(|r| r.name == entry.name).ok_or_else(|| {
                TensorError::Invalid {
                    op: "load_table",
                    message: format!("parameter {} missing from table", entry.name),
                }
            })?;
            if row.shape != entry.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_table",
                    left: entry.value.shape().to_vec(),
                    right: row.shape.clone(),
                });
            }
            let n = entry.value.len();
            if row.offset + n > total {
                return Err(TensorError::Invalid {
                    op: "load_table",
                    message: format!("parameter {} runs past the value block", entry.name),
                });
            }
            for (i, v) in entry.value.data_mut().iter_mut().enumerate() {
                let at = (row.offset + i) * 8;
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            }
        }
        if table.len() != self.entries.len() {
            return Err(TensorError::Invalid {
                op: "load_table",
                message: format!(
                    "table has {} parameters, model has {}",
                    table.len(),
                    self.entries.len()
                ),
            });
        }
        Ok(())
    }
}
