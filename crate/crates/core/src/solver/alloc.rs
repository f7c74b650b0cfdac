use serde::Serialize;
use thiserror::Error;

use super::compile::{Compiled, TensorRole};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("L1 buffers need {required} bytes but only {capacity} are available")]
pub struct CapacityExceeded {
    pub required: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferEntry {
    pub tensor: String,
    pub bytes_per_tile: u64,
    /// 2 when the tensor is moved by DMA (double buffered), 1 when it stays
    /// inside the group.
    pub copies: u8,
    pub offset: u64,
}

impl BufferEntry {
    pub fn size(&self) -> u64 {
        self.bytes_per_tile * u64::from(self.copies)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct BufferPlan {
    pub entries: Vec<BufferEntry>,
    pub total_bytes: u64,
}

impl BufferPlan {
    pub fn get(&self, tensor: &str) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.tensor == tensor)
    }
}

/// First fit in descending size order (ties by name) into an empty L1.
pub fn first_fit(requests: &[(String, u64, u8)], capacity: u64) -> Result<BufferPlan, CapacityExceeded> {
    let mut order: Vec<&(String, u64, u8)> = requests.iter().collect();
    order.sort_by(|a, b| (b.1 * u64::from(b.2)).cmp(&(a.1 * u64::from(a.2))).then_with(|| a.0.cmp(&b.0)));
    // Free list of (offset, len), kept sorted by offset.
    let mut free = vec![(0u64, capacity)];
    let mut entries = Vec::with_capacity(order.len());
    let required: u64 = requests.iter().map(|r| r.1 * u64::from(r.2)).sum();
    for (tensor, bytes, copies) in order {
        let size = bytes * u64::from(*copies);
        let slot = free
            .iter()
            .position(|&(_, len)| len >= size)
            .ok_or(CapacityExceeded { required, capacity })?;
        let (offset, len) = free[slot];
        if len == size {
            free.remove(slot);
        } else {
            free[slot] = (offset + size, len - size);
        }
        entries.push(BufferEntry {
            tensor: tensor.clone(),
            bytes_per_tile: *bytes,
            copies: *copies,
            offset,
        });
    }
    let total_bytes = entries.iter().map(BufferEntry::size).sum();
    Ok(BufferPlan { entries, total_bytes })
}

/// Full-tile buffers for the group at class extents `ext`. Residual tiles
/// reuse these allocations.
pub fn allocate_buffers(compiled: &Compiled, ext: &[u64], capacity: u64) -> Result<BufferPlan, CapacityExceeded> {
    let requests: Vec<(String, u64, u8)> = compiled
        .tensors
        .iter()
        .map(|t| {
            let copies = if t.role == TensorRole::Internal { 1 } else { 2 };
            (t.name.clone(), t.tile_bytes(ext), copies)
        })
        .collect();
    first_fit(&requests, capacity)
}
