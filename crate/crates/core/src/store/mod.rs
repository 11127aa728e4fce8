//! Embedding tables: the only ingestion boundary of the engine.
//!
//! A table is a dimension plus an ordered list of named, labeled records.
//! Vectors are held as `f32` so that a table survives a write/read cycle
//! bit for bit; all arithmetic elsewhere widens them to `f64`.

mod format;
mod synth;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::Vector;

pub use crate::linalg::l2_normalize;
pub use format::{load_table, read_table, save_table, write_table, MAGIC, VERSION};
pub use synth::{synth_dataset, synth_ood, synth_prompt_table, synth_samples, SynthDataset, SynthSpec};

/// Label carried by records of unknown / out-of-distribution origin.
pub const UNKNOWN_LABEL: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Modality {
    ImageGlobal = 0,
    ImagePatchSet = 1,
    TextPrompt = 2,
}

impl Modality {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::ImageGlobal),
            1 => Some(Modality::ImagePatchSet),
            2 => Some(Modality::TextPrompt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub name: String,
    pub label: i32,
    pub modality: Modality,
    pub vectors: Vec<Vec<f32>>,
}

impl EmbeddingRecord {
    pub fn new(name: impl Into<String>, label: i32, modality: Modality, vectors: Vec<Vec<f32>>) -> Self {
        Self {
            name: name.into(),
            label,
            modality,
            vectors,
        }
    }

    /// Builds a record from `f64` vectors, rounding each component to `f32`.
    pub fn from_f64(name: impl Into<String>, label: i32, modality: Modality, vectors: &[Vector]) -> Self {
        let vectors = vectors
            .iter()
            .map(|v| v.iter().map(|&x| x as f32).collect())
            .collect();
        Self::new(name, label, modality, vectors)
    }

    pub fn vectors_f64(&self) -> Vec<Vector> {
        self.vectors
            .iter()
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    pub fn first_f64(&self) -> Vector {
        self.vectors[0].iter().map(|&x| f64::from(x)).collect()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRecord {
            name: self.name.clone(),
            reason,
        };
        match self.modality {
            Modality::ImageGlobal | Modality::TextPrompt if self.vectors.len() != 1 => {
                return Err(invalid(format!(
                    "{:?} records hold exactly one vector, found {}",
                    self.modality,
                    self.vectors.len()
                )))
            }
            Modality::ImagePatchSet if self.vectors.is_empty() => {
                return Err(invalid("patch sets need at least one vector".into()))
            }
            _ => {}
        }
        for v in &self.vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(self.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_records(dim: usize, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self> {
        let mut table = Self::new(dim)?;
        for r in records {
            table.push(r)?;
        }
        Ok(table)
    }

    /// Appends a record after checking the table invariants.
    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        record.validate(self.dim)?;
        if self.index.contains_key(&record.name) {
            return Err(Error::DuplicateName(record.name));
        }
        self.index.insert(record.name.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&EmbeddingRecord> {
        self.index.get(name).map(|&i| &self.records[i])
    }
}
