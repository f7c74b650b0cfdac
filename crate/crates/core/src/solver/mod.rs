//! Tile-extent search with memory allocation and soft-constraint relaxation.
//!
//! Candidates come from a fixed lattice per loop class. The depth-first
//! search and the brute-force oracle enumerate the same lattice and rank
//! feasible assignments by simulated cycles, then larger tile volume, then
//! lexicographically smaller extents.

pub mod alloc;
pub mod compile;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::constraints::{Constraint, KernelTable, VarId};
use crate::fusion::{build_problem, BoundProblem, FusionError, FusionGroup};
use crate::graph::NetworkGraph;
use crate::hw::{EngineSelection, HardwareConfig, HwError, Level};
use crate::par::{self, Parallelism};
use crate::sim::pipeline::run_compressed;

pub use alloc::{allocate_buffers, first_fit, BufferEntry, BufferPlan, CapacityExceeded};
pub use compile::Compiled;

/// Largest lattice the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 100_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolveError {
    #[error("group `{group}` is infeasible: {reason}")]
    Infeasible { group: String, fused: bool, reason: String },
    #[error("group `{group}`: no tiling needs at most {budget} DMA transfers")]
    OverBudget { group: String, budget: u64 },
    #[error("group `{group}`: candidate lattice has {size} points, above the brute-force limit")]
    LatticeTooLarge { group: String, size: u128 },
    #[error("group `{group}`: {reason}")]
    Malformed { group: String, reason: String },
    #[error("group `{group}`: {source}")]
    Hardware { group: String, source: HwError },
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

impl SolveError {
    pub fn is_fused_infeasible(&self) -> bool {
        matches!(self, SolveError::Infeasible { fused: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassExtent {
    pub class: String,
    pub rep: VarId,
    pub members: Vec<String>,
    pub full: u64,
    pub extent: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GridAxis {
    pub class: String,
    pub extent: u64,
    pub full: u64,
    pub num_tiles: u64,
    pub last_tile_extent: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelaxedConstraint {
    pub priority: u32,
    pub description: String,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilingSolution {
    pub group: String,
    pub tile_extents: Vec<ClassExtent>,
    pub tile_grid: Vec<GridAxis>,
    pub buffers: BufferPlan,
    pub relaxed: Vec<RelaxedConstraint>,
    pub objective_cycles: u64,
    /// Full-tile extent of each loop class, outermost first.
    pub loop_extents: Vec<u64>,
}

impl TilingSolution {
    pub fn num_tiles(&self) -> u64 {
        self.tile_grid.iter().map(|g| g.num_tiles).product()
    }
}

/// Ranking key for feasible assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Ranked {
    cycles: u64,
    volume: u128,
    ext: Vec<u64>,
}

fn rank(a: &Ranked, b: &Ranked) -> Ordering {
    a.cycles
        .cmp(&b.cycles)
        .then_with(|| b.volume.cmp(&a.volume))
        .then_with(|| a.ext.cmp(&b.ext))
}

/// Relaxation levels: `None` keeps every soft constraint, `Some(p)` drops
/// all priorities up to `p`.
fn levels(c: &Compiled) -> Vec<Option<u32>> {
    std::iter::once(None).chain(c.priorities().into_iter().map(Some)).collect()
}

/// Where each tensor lives when the caller has no residency plan: its home
/// level is L2 if the whole tensor fits there, else L3.
pub fn estimate_placement(c: &Compiled, hw: &HardwareConfig) -> BTreeMap<String, Level> {
    c.tensors
        .iter()
        .map(|t| {
            let bytes = t.full.iter().product::<u64>() * t.elem_bytes;
            let level = if bytes <= hw.capacity(Level::L2) { Level::L2 } else { Level::L3 };
            (t.name.clone(), level)
        })
        .collect()
}

struct Search<'a> {
    c: &'a Compiled,
    hw: &'a HardwareConfig,
    placement: &'a BTreeMap<String, Level>,
    capacity: u64,
    budget: Option<u64>,
}

impl Search<'_> {
    fn evaluate(&self, loop_ext: &[u64], dropped: Option<u32>) -> Result<Option<Ranked>, SolveError> {
        let ext = self.c.class_extents(loop_ext);
        if !self.c.satisfies(&ext, dropped) || self.c.footprint(&ext) > self.capacity {
            return Ok(None);
        }
        let totals = run_compressed(self.c, loop_ext, self.placement, self.hw, true)?;
        if self.budget.is_some_and(|b| totals.transfers > b) {
            return Ok(None);
        }
        Ok(Some(Ranked {
            cycles: totals.cycles,
            volume: loop_ext.iter().map(|&e| e as u128).product(),
            ext: loop_ext.to_vec(),
        }))
    }

    /// Depth-first over loop classes by descending extent. Candidates are
    /// ascending and the footprint is monotone, so the first overflow ends
    /// a branch.
    fn dfs(
        &self,
        order: &[usize],
        cands: &[Vec<u64>],
        assign: &mut [u64],
        dropped: Option<u32>,
        first_only: bool,
        best: &mut Option<Ranked>,
    ) -> Result<(), SolveError> {
        let Some((&pos, rest)) = order.split_first() else {
            if let Some(r) = self.evaluate(assign, dropped)? {
                if best.as_ref().is_none_or(|b| rank(&r, b) == Ordering::Less) {
                    *best = Some(r);
                }
            }
            return Ok(());
        };
        let min = assign[pos];
        for &e in &cands[pos] {
            assign[pos] = e;
            if self.c.footprint(&self.c.class_extents(assign)) > self.capacity {
                break;
            }
            self.dfs(rest, cands, assign, dropped, first_only, best)?;
            if first_only && best.is_some() {
                break;
            }
        }
        assign[pos] = min;
        Ok(())
    }

    fn run_dfs(&self, dropped: Option<u32>, first_only: bool) -> Result<Option<Ranked>, SolveError> {
        let cands = self.c.filtered_lattice(dropped);
        if cands.iter().any(Vec::is_empty) {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..self.c.loops.len()).collect();
        order.sort_by_key(|&p| std::cmp::Reverse(self.c.full[self.c.loops[p]]));
        let mut assign: Vec<u64> = cands.iter().map(|c| c[0]).collect();
        let mut best = None;
        self.dfs(&order, &cands, &mut assign, dropped, first_only, &mut best)?;
        Ok(best)
    }

    fn brute_force(&self, dropped: Option<u32>, par: Parallelism) -> Result<Option<Ranked>, SolveError> {
        let lattice = self.c.lattice();
        let size: u128 = lattice.iter().map(|l| l.len() as u128).product();
        if size > BRUTE_FORCE_LIMIT {
            return Err(SolveError::LatticeTooLarge {
                group: self.c.group.clone(),
                size,
            });
        }
        let decode = |mut i: u64| -> Vec<u64> {
            let mut ext = vec![0; lattice.len()];
            for p in (0..lattice.len()).rev() {
                let n = lattice[p].len() as u64;
                ext[p] = lattice[p][(i % n) as usize];
                i /= n;
            }
            ext
        };
        let outcome = par::min_over(
            par,
            size as u64,
            |i| self.evaluate(&decode(i), dropped).transpose().map(|r| r.map_err(|e| e.to_string())),
            |a, b| match (a, b) {
                (Ok(a), Ok(b)) => rank(a, b),
                (Err(_), Ok(_)) => Ordering::Less,
                (Ok(_), Err(_)) => Ordering::Greater,
                (Err(a), Err(b)) => a.cmp(b),
            },
        );
        match outcome {
            None => Ok(None),
            Some(Ok(r)) => Ok(Some(r)),
            Some(Err(reason)) => Err(SolveError::Malformed {
                group: self.c.group.clone(),
                reason,
            }),
        }
    }

    fn finish(&self, r: Ranked, dropped: Option<u32>) -> Result<TilingSolution, SolveError> {
        let c = self.c;
        let ext = c.class_extents(&r.ext);
        let buffers = allocate_buffers(c, &ext, self.capacity).map_err(|e| SolveError::Infeasible {
            group: c.group.clone(),
            fused: c.nodes.len() > 1,
            reason: e.to_string(),
        })?;
        let tile_extents = c
            .classes
            .iter()
            .zip(&ext)
            .map(|(cl, &e)| ClassExtent {
                class: cl.label.clone(),
                rep: cl.rep,
                members: cl.members.iter().map(|m| c.var_labels[m].clone()).collect(),
                full: cl.full,
                extent: e,
            })
            .collect();
        let tile_grid = r
            .ext
            .iter()
            .enumerate()
            .map(|(p, &e)| {
                let (num_tiles, last_tile_extent) = c.grid(p, e);
                GridAxis {
                    class: c.classes[c.loops[p]].label.clone(),
                    extent: e,
                    full: c.full[c.loops[p]],
                    num_tiles,
                    last_tile_extent,
                }
            })
            .collect();
        let relaxed = match dropped {
            None => Vec::new(),
            Some(d) => c
                .soft
                .iter()
                .filter(|(k, _)| k.priority().is_some_and(|p| p <= d))
                .map(|(k, _)| RelaxedConstraint {
                    priority: k.priority().expect("soft"),
                    description: k.describe(|v| c.classes[c.class_of[&v]].label.clone()),
                    constraint: *k,
                })
                .collect(),
        };
        Ok(TilingSolution {
            group: c.group.clone(),
            tile_extents,
            tile_grid,
            buffers,
            relaxed,
            objective_cycles: r.cycles,
            loop_extents: r.ext,
        })
    }

    fn no_solution(&self) -> SolveError {
        match self.budget {
            // Without the budget the search may well succeed; let the
            // caller tell the two apart.
            Some(budget) => SolveError::OverBudget {
                group: self.c.group.clone(),
                budget,
            },
            None => self.infeasible(),
        }
    }

    fn infeasible(&self) -> SolveError {
        SolveError::Infeasible {
            group: self.c.group.clone(),
            fused: self.c.nodes.len() > 1,
            reason: format!(
                "no tiling satisfies the hard constraints within {} bytes of L1",
                self.capacity
            ),
        }
    }
}

fn search<'a>(
    c: &'a Compiled,
    hw: &'a HardwareConfig,
    placement: &'a BTreeMap<String, Level>,
    budget: Option<u64>,
) -> Search<'a> {
    Search {
        c,
        hw,
        placement,
        capacity: hw.capacity(Level::L1),
        budget,
    }
}

/// Depth-first solve against a given tensor placement.
pub fn solve_placed(
    c: &Compiled,
    hw: &HardwareConfig,
    placement: &BTreeMap<String, Level>,
) -> Result<TilingSolution, SolveError> {
    solve_within(c, hw, placement, None)
}

/// [`solve_placed`] restricted to tilings issuing at most `budget` DMA
/// transfers.
pub fn solve_within(
    c: &Compiled,
    hw: &HardwareConfig,
    placement: &BTreeMap<String, Level>,
    budget: Option<u64>,
) -> Result<TilingSolution, SolveError> {
    let s = search(c, hw, placement, budget);
    for dropped in levels(c) {
        if let Some(r) = s.run_dfs(dropped, false)? {
            return s.finish(r, dropped);
        }
    }
    Err(s.no_solution())
}

/// Exhaustive oracle over the same lattice and ranking as [`solve_within`].
pub fn brute_force_within(
    c: &Compiled,
    hw: &HardwareConfig,
    placement: &BTreeMap<String, Level>,
    budget: Option<u64>,
    par: Parallelism,
) -> Result<TilingSolution, SolveError> {
    let s = search(c, hw, placement, budget);
    for dropped in levels(c) {
        if let Some(r) = s.brute_force(dropped, par)? {
            return s.finish(r, dropped);
        }
    }
    Err(s.no_solution())
}

pub fn brute_force_placed(
    c: &Compiled,
    hw: &HardwareConfig,
    placement: &BTreeMap<String, Level>,
    par: Parallelism,
) -> Result<TilingSolution, SolveError> {
    brute_force_within(c, hw, placement, None, par)
}

pub fn solve(problem: &BoundProblem, hw: &HardwareConfig) -> Result<TilingSolution, SolveError> {
    let c = Compiled::new(problem)?;
    solve_placed(&c, hw, &estimate_placement(&c, hw))
}

pub fn brute_force_solve(problem: &BoundProblem, hw: &HardwareConfig) -> Result<TilingSolution, SolveError> {
    let c = Compiled::new(problem)?;
    brute_force_placed(&c, hw, &estimate_placement(&c, hw), Parallelism::default())
}

/// Whether any tiling meets the hard constraints in L1 once every soft
/// constraint is dropped.
pub fn is_feasible(c: &Compiled, hw: &HardwareConfig) -> Result<bool, SolveError> {
    let placement = estimate_placement(c, hw);
    let s = search(c, hw, &placement, None);
    let all = levels(c).last().copied().flatten();
    Ok(s.run_dfs(all, true)?.is_some())
}

/// Splits infeasible groups at their largest shared tensor until every part
/// admits a tiling.
pub fn split_until_feasible(
    group: &FusionGroup,
    graph: &NetworkGraph,
    hw: &HardwareConfig,
    kernels: &KernelTable,
    engines: EngineSelection,
) -> Result<Vec<FusionGroup>, SolveError> {
    let problem = build_problem(group, graph, hw, kernels, engines)?;
    let c = Compiled::new(&problem)?;
    if is_feasible(&c, hw)? {
        return Ok(vec![group.clone()]);
    }
    if !group.is_fused() {
        return Err(infeasible_singleton(&c, hw));
    }
    let (left, right) = split_largest(group, graph);
    let mut out = split_until_feasible(&left, graph, hw, kernels, engines)?;
    out.extend(split_until_feasible(&right, graph, hw, kernels, engines)?);
    Ok(out)
}

/// Splits a fused group at the shared tensor with the most bytes, the
/// earliest one on ties.
pub fn split_largest(group: &FusionGroup, graph: &NetworkGraph) -> (FusionGroup, FusionGroup) {
    let bytes = |t: &str| graph.tensor(t).map(|s| s.bytes()).unwrap_or(0);
    let pair = (0..group.shared.len())
        .max_by(|&a, &b| bytes(&group.shared[a].tensor).cmp(&bytes(&group.shared[b].tensor)).then(b.cmp(&a)))
        .expect("fused group has a shared tensor");
    group.split_at(pair)
}

fn infeasible_singleton(c: &Compiled, hw: &HardwareConfig) -> SolveError {
    SolveError::Infeasible {
        group: c.group.clone(),
        fused: false,
        reason: format!(
            "even minimal tiles exceed the {} byte L1; the hardware configuration cannot run this layer",
            hw.capacity(Level::L1)
        ),
    }
}

/// Splits `group` as needed and solves every part with estimated placement.
pub fn solve_with_fallback(
    group: &FusionGroup,
    graph: &NetworkGraph,
    hw: &HardwareConfig,
    kernels: &KernelTable,
    engines: EngineSelection,
) -> Result<(Vec<FusionGroup>, Vec<TilingSolution>), SolveError> {
    let groups = split_until_feasible(group, graph, hw, kernels, engines)?;
    let mut solutions = Vec::with_capacity(groups.len());
    for g in &groups {
        solutions.push(solve(&build_problem(g, graph, hw, kernels, engines)?, hw)?);
    }
    Ok((groups, solutions))
}
