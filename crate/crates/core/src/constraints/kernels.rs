//! Kernel descriptor table: dataflow requirements of each (operator, engine)
//! kernel implementation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::OpCategory;
use crate::hw::Engine;

const DEFAULT_TABLE: &str = include_str!("../../../../hw/kernels.toml");

/// Logical axis of an operator, used to name the vectorized axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisRole {
    M,
    N,
    K,
    F,
    C,
    H,
    W,
    /// Innermost axis of an elementwise output.
    Inner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDescriptor {
    pub op: OpCategory,
    pub engine: Engine,
    #[serde(default)]
    pub requires_full_reduction: bool,
    #[serde(default = "one")]
    pub simd_width: u64,
    #[serde(default)]
    pub vectorized_axis: Option<AxisRole>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelTableError {
    #[error("kernel table parse error: {0}")]
    Parse(String),
    #[error("kernel table lists ({0}, {1}) twice")]
    Duplicate(OpCategory, Engine),
    #[error("kernel ({0}, {1}): simd_width must be at least 1")]
    SimdWidth(OpCategory, Engine),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    version: i64,
    kernel: Vec<KernelDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTable {
    entries: BTreeMap<(OpCategory, Engine), KernelDescriptor>,
}

impl KernelTable {
    pub fn from_toml(text: &str) -> Result<Self, KernelTableError> {
        let doc: TableDoc = toml::from_str(text).map_err(|e| KernelTableError::Parse(e.to_string()))?;
        if doc.version != 1 {
            return Err(KernelTableError::Parse(format!("unsupported version {}", doc.version)));
        }
        let mut entries = BTreeMap::new();
        for d in doc.kernel {
            if d.simd_width == 0 {
                return Err(KernelTableError::SimdWidth(d.op, d.engine));
            }
            let key = (d.op, d.engine);
            if entries.insert(key, d).is_some() {
                return Err(KernelTableError::Duplicate(key.0, key.1));
            }
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, op: OpCategory, engine: Engine) -> Option<&KernelDescriptor> {
        self.entries.get(&(op, engine))
    }

    pub fn insert(&mut self, descriptor: KernelDescriptor) {
        self.entries.insert((descriptor.op, descriptor.engine), descriptor);
    }
}

impl Default for KernelTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TABLE).expect("shipped kernel table is valid")
    }
}
