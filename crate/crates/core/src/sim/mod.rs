//! Tile schedules, their simulation, and fused vs layer-per-layer comparison.

pub mod pipeline;
pub mod residency;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::hw::{dma_cost, kernel_cost, Engine, EngineSelection, HardwareConfig, KernelWork, LevelPair, TransferShape};
use crate::plan::{Mode, Plan, PlanError};
use crate::solver::compile::{transfer_dims, TensorRole, TileCost};

use pipeline::{run_compressed, Pipeline, Totals};
pub use residency::{plan_residency, Residency, ResidencyError, SpillEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferDescriptor {
    pub tensor: String,
    pub pair: LevelPair,
    pub bytes: u64,
    pub dims: u8,
    pub origin: Vec<u64>,
    pub extents: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComputeStep {
    pub node: String,
    pub engine: Engine,
    pub work: KernelWork,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TileIteration {
    pub index: Vec<u64>,
    pub loads: Vec<TransferDescriptor>,
    pub computes: Vec<ComputeStep>,
    pub stores: Vec<TransferDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupSchedule {
    pub group: String,
    pub l1_bytes: u64,
    pub iterations: Vec<TileIteration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub mode: Mode,
    pub engines: EngineSelection,
    pub groups: Vec<GroupSchedule>,
    pub residency: Residency,
}

/// Expands every planned group into its tile loop nest, outermost loop
/// class first.
pub fn build_schedule(plan: &Plan, hw: &HardwareConfig) -> Result<Schedule, PlanError> {
    let mut groups = Vec::with_capacity(plan.groups.len());
    for pg in &plan.groups {
        let c = &pg.compiled;
        let t = &pg.solution.loop_extents;
        let counts: Vec<u64> = (0..t.len()).map(|j| c.grid(j, t[j]).0).collect();
        let total: u64 = counts.iter().product();
        let mut iterations = Vec::with_capacity(total as usize);
        let mut index = vec![0u64; t.len()];
        for _ in 0..total {
            let clamped: Vec<u64> = (0..t.len())
                .map(|j| t[j].min(c.full[c.loops[j]] - index[j] * t[j]))
                .collect();
            let origin: Vec<u64> = (0..t.len()).map(|j| index[j] * t[j]).collect();
            let ext = c.class_extents(&clamped);
            let org = c.class_origins(&origin);
            let mut it = TileIteration {
                index: index.clone(),
                loads: Vec::new(),
                computes: Vec::new(),
                stores: Vec::new(),
            };
            for tensor in c.tensors.iter().filter(|u| u.role != TensorRole::Internal) {
                let level = plan.residency.placement[&tensor.name];
                let Some(pair) = LevelPair::to_l1(level) else { continue };
                let extents = tensor.tile(&ext);
                let desc = TransferDescriptor {
                    tensor: tensor.name.clone(),
                    pair,
                    bytes: tensor.tile_bytes(&ext),
                    dims: transfer_dims(&extents, &tensor.full),
                    origin: tensor.axes.iter().map(|&a| org[a]).collect(),
                    extents,
                };
                match tensor.role {
                    TensorRole::Load => it.loads.push(desc),
                    _ => it.stores.push(desc),
                }
            }
            for node in &c.nodes {
                let work = node.work(&ext);
                let cycles = kernel_cost(&work, node.engine, hw).map_err(|e| crate::solver::SolveError::Hardware {
                    group: c.group.clone(),
                    source: e,
                })?;
                it.computes.push(ComputeStep {
                    node: node.name.clone(),
                    engine: node.engine,
                    work,
                    cycles,
                });
            }
            iterations.push(it);
            for j in (0..t.len()).rev() {
                index[j] += 1;
                if index[j] < counts[j] {
                    break;
                }
                index[j] = 0;
            }
        }
        groups.push(GroupSchedule {
            group: c.group.clone(),
            l1_bytes: pg.solution.buffers.total_bytes,
            iterations,
        });
    }
    Ok(Schedule {
        mode: plan.mode,
        engines: plan.engines,
        groups,
        residency: plan.residency.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PairBytes {
    pub l2_l1: u64,
    pub l3_l2: u64,
    pub l3_l1: u64,
}

impl PairBytes {
    fn from_array(b: [u64; 3]) -> Self {
        Self {
            l2_l1: b[LevelPair::L2L1.index()],
            l3_l2: b[LevelPair::L3L2.index()],
            l3_l1: b[LevelPair::L3L1.index()],
        }
    }

    pub fn get(&self, pair: LevelPair) -> u64 {
        match pair {
            LevelPair::L2L1 => self.l2_l1,
            LevelPair::L3L2 => self.l3_l2,
            LevelPair::L3L1 => self.l3_l1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PeakUsage {
    pub l1: u64,
    pub l2: u64,
    pub l3: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub tiles: u64,
    pub cycles: u64,
    pub dma_transfers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub mode: Mode,
    pub engines: EngineSelection,
    pub double_buffering: bool,
    pub total_cycles: u64,
    pub dma_transfer_count: u64,
    pub bytes_moved: PairBytes,
    pub bytes_by_tensor: BTreeMap<String, u64>,
    pub peak_usage: PeakUsage,
    pub spills: Vec<SpillEvent>,
    pub dma_bound_cycles: u64,
    pub compute_bound_cycles: u64,
    pub groups: Vec<GroupReport>,
}

struct Accumulator {
    bytes: [u64; 3],
    by_tensor: BTreeMap<String, u64>,
    report: SimReport,
}

impl Accumulator {
    fn new(mode: Mode, engines: EngineSelection, db: bool, residency: &Residency) -> Self {
        Self {
            bytes: [0; 3],
            by_tensor: BTreeMap::new(),
            report: SimReport {
                mode,
                engines,
                double_buffering: db,
                total_cycles: 0,
                dma_transfer_count: 0,
                bytes_moved: PairBytes::default(),
                bytes_by_tensor: BTreeMap::new(),
                peak_usage: PeakUsage {
                    l1: 0,
                    l2: residency.peak_l2,
                    l3: residency.peak_l3,
                },
                spills: residency.spills.clone(),
                dma_bound_cycles: 0,
                compute_bound_cycles: 0,
                groups: Vec::new(),
            },
        }
    }

    fn add(&mut self, group: &str, l1: u64, t: &Totals) {
        let r = &mut self.report;
        r.total_cycles += t.cycles;
        r.dma_transfer_count += t.transfers;
        r.dma_bound_cycles += t.dma_bound_cycles;
        r.compute_bound_cycles += t.compute_bound_cycles;
        r.peak_usage.l1 = r.peak_usage.l1.max(l1);
        for p in 0..3 {
            self.bytes[p] += t.bytes[p];
        }
        r.groups.push(GroupReport {
            group: group.to_string(),
            tiles: t.tiles,
            cycles: t.cycles,
            dma_transfers: t.transfers,
        });
    }

    fn finish(mut self) -> SimReport {
        self.report.bytes_moved = PairBytes::from_array(self.bytes);
        self.report.bytes_by_tensor = self.by_tensor;
        self.report
    }
}

fn iteration_cost(it: &TileIteration, hw: &HardwareConfig) -> TileCost {
    let mut cost = TileCost::default();
    for (d, is_load) in it.loads.iter().map(|d| (d, true)).chain(it.stores.iter().map(|d| (d, false))) {
        let cycles = dma_cost(
            hw,
            &TransferShape {
                bytes: d.bytes,
                dims: d.dims,
                pair: d.pair,
            },
        );
        let p = d.pair.index();
        if is_load {
            cost.load[p] += cycles;
        } else {
            cost.store[p] += cycles;
        }
        cost.bytes[p] += d.bytes;
        cost.transfers += 1;
    }
    cost.compute = it.computes.iter().map(|c| c.cycles).sum();
    cost
}

/// Runs every group's tile pipeline back to back.
pub fn simulate(schedule: &Schedule, hw: &HardwareConfig, double_buffering: bool) -> SimReport {
    let mut acc = Accumulator::new(schedule.mode, schedule.engines, double_buffering, &schedule.residency);
    for g in &schedule.groups {
        let mut pipe = Pipeline::new(double_buffering);
        for it in &g.iterations {
            pipe.push(&iteration_cost(it, hw));
            for d in it.loads.iter().chain(&it.stores) {
                *acc.by_tensor.entry(d.tensor.clone()).or_default() += d.bytes;
            }
        }
        acc.add(&g.group, g.l1_bytes, &pipe.finish());
    }
    acc.finish()
}

/// Same report as `simulate(build_schedule(plan))` without expanding the
/// loop nests.
pub fn simulate_plan(plan: &Plan, hw: &HardwareConfig, double_buffering: bool) -> Result<SimReport, PlanError> {
    let mut acc = Accumulator::new(plan.mode, plan.engines, double_buffering, &plan.residency);
    for pg in &plan.groups {
        let c = &pg.compiled;
        let totals = run_compressed(c, &pg.solution.loop_extents, &plan.residency.placement, hw, double_buffering)?;
        for (t, &b) in c.tensors.iter().zip(&totals.tensor_bytes) {
            if t.role != TensorRole::Internal {
                *acc.by_tensor.entry(t.name.clone()).or_default() += b;
            }
        }
        acc.add(&c.group, pg.solution.buffers.total_bytes, &totals);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub baseline: SimReport,
    pub fused: SimReport,
    pub runtime_reduction_pct: f64,
    pub transfer_reduction_pct: f64,
    /// Baseline minus fused bytes per level pair.
    pub bytes_delta: BTreeMap<String, i64>,
}

pub fn reduction_pct(baseline: u64, fused: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (baseline as f64 - fused as f64) / baseline as f64 * 100.0
}

pub fn compare(baseline: &SimReport, fused: &SimReport) -> ComparisonReport {
    let bytes_delta = LevelPair::ALL
        .iter()
        .map(|&p| {
            (
                p.as_str().to_string(),
                baseline.bytes_moved.get(p) as i64 - fused.bytes_moved.get(p) as i64,
            )
        })
        .collect();
    ComparisonReport {
        baseline: baseline.clone(),
        fused: fused.clone(),
        runtime_reduction_pct: reduction_pct(baseline.total_cycles, fused.total_cycles),
        transfer_reduction_pct: reduction_pct(baseline.dma_transfer_count, fused.dma_transfer_count),
        bytes_delta,
    }
}
