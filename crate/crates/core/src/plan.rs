//! End-to-end planning: groups, residency, then one solve per group.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::constraints::KernelTable;
use crate::fusion::{build_problem, select_fusion_groups, BoundProblem, FusionError, FusionGroup, FusionPolicy};
use crate::graph::NetworkGraph;
use crate::hw::{EngineSelection, HardwareConfig};
use crate::par::{self, Parallelism};
use crate::sim::{plan_residency, Residency, ResidencyError};
use crate::sim::pipeline::run_compressed;
use crate::solver::{solve_within, split_largest, split_until_feasible, Compiled, SolveError, TilingSolution};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Residency(#[from] ResidencyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LayerPerLayer,
    Fused,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LayerPerLayer => "baseline",
            Mode::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub hw: HardwareConfig,
    pub kernels: KernelTable,
    pub engines: EngineSelection,
}

impl Target {
    pub fn new(hw: HardwareConfig, engines: EngineSelection) -> Self {
        Self {
            hw,
            kernels: KernelTable::default(),
            engines,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedGroup {
    pub group: FusionGroup,
    pub problem: BoundProblem,
    pub compiled: Compiled,
    pub solution: TilingSolution,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub mode: Mode,
    pub engines: EngineSelection,
    pub groups: Vec<PlannedGroup>,
    pub residency: Residency,
}

/// Final groups for a mode: the policy's groups split until each admits an
/// L1 tiling. Layer-per-layer ignores the policy.
pub fn plan_groups(
    graph: &NetworkGraph,
    target: &Target,
    policy: &FusionPolicy,
    mode: Mode,
) -> Result<Vec<FusionGroup>, PlanError> {
    let policy = match mode {
        Mode::LayerPerLayer => &FusionPolicy::None,
        Mode::Fused => policy,
    };
    let mut groups = Vec::new();
    for g in select_fusion_groups(graph, policy)? {
        groups.extend(split_until_feasible(&g, graph, &target.hw, &target.kernels, target.engines)?);
    }
    Ok(groups)
}

fn solve_all(
    graph: &NetworkGraph,
    target: &Target,
    groups: &[FusionGroup],
    residency: &Residency,
    budgets: Option<&BTreeMap<String, u64>>,
    par: Parallelism,
) -> Vec<Result<PlannedGroup, PlanError>> {
    par::map(par, groups, |g| -> Result<PlannedGroup, PlanError> {
        let problem = build_problem(g, graph, &target.hw, &target.kernels, target.engines)?;
        let compiled = Compiled::new(&problem)?;
        let budget = budgets.map(|b| g.nodes.iter().map(|n| b[n]).sum());
        let solution = solve_within(&compiled, &target.hw, &residency.placement, budget)?;
        Ok(PlannedGroup {
            group: g.clone(),
            problem,
            compiled,
            solution,
        })
    })
}

/// DMA transfers of every node in a layer-per-layer plan.
fn node_transfers(p: &Plan, hw: &HardwareConfig) -> Result<BTreeMap<String, u64>, PlanError> {
    let mut out = BTreeMap::new();
    for g in &p.groups {
        let t = run_compressed(&g.compiled, &g.solution.loop_extents, &p.residency.placement, hw, true)?;
        out.insert(g.group.nodes[0].clone(), t.transfers);
    }
    Ok(out)
}

/// Plans every group, solving independent groups in parallel.
///
/// In fused mode each group may issue at most as many DMA transfers as the
/// layer-per-layer plan spends on the same nodes. A fused group with no
/// tiling inside that budget is split at its largest shared tensor.
pub fn plan(
    graph: &NetworkGraph,
    target: &Target,
    policy: &FusionPolicy,
    mode: Mode,
    par: Parallelism,
) -> Result<Plan, PlanError> {
    let budgets = match mode {
        Mode::LayerPerLayer => None,
        Mode::Fused => {
            let base = plan(graph, target, policy, Mode::LayerPerLayer, par)?;
            Some(node_transfers(&base, &target.hw)?)
        }
    };
    let mut groups = plan_groups(graph, target, policy, mode)?;
    loop {
        let residency = plan_residency(graph, &groups, &target.hw)?;
        let solved = solve_all(graph, target, &groups, &residency, budgets.as_ref(), par);
        let over: Vec<usize> = solved
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Err(PlanError::Solve(SolveError::OverBudget { .. }))))
            .map(|(i, _)| i)
            .collect();
        if over.is_empty() {
            return Ok(Plan {
                mode,
                engines: target.engines,
                groups: solved.into_iter().collect::<Result<_, _>>()?,
                residency,
            });
        }
        for &i in over.iter().rev() {
            // A singleton always fits its own baseline tiling.
            assert!(groups[i].is_fused(), "singleton {} over its own budget", groups[i].name());
            let (left, right) = split_largest(&groups[i], graph);
            groups.splice(i..=i, [left, right]);
        }
    }
}
