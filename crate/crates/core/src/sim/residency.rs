//! Home level of every tensor that lives outside L1.
//!
//! Sources are placed first, in declaration order. Each group's materialized
//! outputs are then placed just before the group runs, in L2 while it has
//! room and in L3 otherwise. An intermediate pushed to L3 is a spill; graph
//! outputs and sources landing in L3 are not. A tensor is released after the
//! last group that reads it.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::fusion::FusionGroup;
use crate::graph::{NetworkGraph, TensorKind};
use crate::hw::{HardwareConfig, Level};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("tensor `{tensor}` ({bytes} bytes) fits in no memory level")]
pub struct ResidencyError {
    pub tensor: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpillEvent {
    pub tensor: String,
    pub bytes: u64,
    pub level: Level,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Residency {
    pub placement: BTreeMap<String, Level>,
    pub spills: Vec<SpillEvent>,
    pub peak_l2: u64,
    pub peak_l3: u64,
}

struct Pools {
    free: [u64; 2],
    used: [u64; 2],
    peak: [u64; 2],
}

impl Pools {
    fn place(&mut self, bytes: u64) -> Option<Level> {
        let slot = (0..2).find(|&i| self.free[i] >= bytes)?;
        self.free[slot] -= bytes;
        self.used[slot] += bytes;
        self.peak[slot] = self.peak[slot].max(self.used[slot]);
        Some(if slot == 0 { Level::L2 } else { Level::L3 })
    }

    fn release(&mut self, level: Level, bytes: u64) {
        let slot = if level == Level::L2 { 0 } else { 1 };
        self.free[slot] += bytes;
        self.used[slot] -= bytes;
    }
}

fn place(pools: &mut Pools, res: &mut Residency, name: &str, bytes: u64) -> Result<Level, ResidencyError> {
    let level = pools.place(bytes).ok_or_else(|| ResidencyError {
        tensor: name.to_string(),
        bytes,
    })?;
    res.placement.insert(name.to_string(), level);
    Ok(level)
}

pub fn plan_residency(
    graph: &NetworkGraph,
    groups: &[FusionGroup],
    hw: &HardwareConfig,
) -> Result<Residency, ResidencyError> {
    let mut pools = Pools {
        free: [hw.capacity(Level::L2), hw.capacity(Level::L3)],
        used: [0; 2],
        peak: [0; 2],
    };
    let mut res = Residency::default();
    let group_of: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| grp.nodes.iter().map(move |n| (n.as_str(), g)))
        .collect();
    let mut last_use: BTreeMap<&str, usize> = BTreeMap::new();
    for t in graph.tensors() {
        if let Some(g) = graph.consumers(&t.name).iter().map(|n| group_of[n.name.as_str()]).max() {
            last_use.insert(&t.name, g);
        }
    }
    for t in graph.tensors().filter(|t| t.kind.is_source()) {
        place(&mut pools, &mut res, &t.name, t.bytes())?;
    }
    let mut live: BTreeSet<String> = res.placement.keys().cloned().collect();
    for (g, group) in groups.iter().enumerate() {
        let internal: BTreeSet<&str> = group.shared.iter().map(|s| s.tensor.as_str()).collect();
        for n in &group.nodes {
            for t in &graph.node(n).expect("validated").outputs {
                if internal.contains(t.as_str()) {
                    continue;
                }
                let spec = graph.tensor(t).expect("validated");
                let level = place(&mut pools, &mut res, t, spec.bytes())?;
                if level == Level::L3 && spec.kind == TensorKind::Intermediate {
                    res.spills.push(SpillEvent {
                        tensor: t.clone(),
                        bytes: spec.bytes(),
                        level,
                        group: group.name(),
                    });
                }
                live.insert(t.clone());
            }
        }
        let done: Vec<String> = live
            .iter()
            .filter(|t| {
                let kind = graph.tensor(t).expect("validated").kind;
                kind != TensorKind::Output && last_use.get(t.as_str()).is_none_or(|&u| u <= g)
            })
            .cloned()
            .collect();
        for t in done {
            live.remove(&t);
            pools.release(res.placement[&t], graph.tensor(&t).expect("validated").bytes());
        }
    }
    res.peak_l2 = pools.peak[0];
    res.peak_l3 = pools.peak[1];
    Ok(res)
}
