//! End-to-end acceptance checks on the shipped ViT-MLP example and on
//! randomized small instances. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use ftl::constraints::{KernelTable, Slot};
use ftl::fusion::{build_problem, select_fusion_groups, FusionPolicy};
use ftl::graph::{NetworkGraph, OpKind};
use ftl::hw::{dma_cost, EngineSelection, HardwareConfig, Level, TransferShape};
use ftl::par::Parallelism;
use ftl::plan::{plan, Mode, Plan, Target};
use ftl::sim::{build_schedule, compare, simulate, simulate_plan, ComparisonReport, GroupSchedule};
use ftl::solver::compile::TensorRole;
use ftl::solver::{allocate_buffers, brute_force_solve, solve, Compiled, SolveError, BRUTE_FORCE_LIMIT};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRng, TestRunner, RngAlgorithm};

const REFERENCE_TRANSFER_REDUCTION: f64 = 47.1;
const REFERENCE_RUNTIME_CLUSTER: f64 = 28.8;
const REFERENCE_RUNTIME_NPU: f64 = 60.1;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn vit_plans(engines: EngineSelection) -> (Plan, Plan, HardwareConfig) {
    let hw = HardwareConfig::siracusa_like();
    let t = Target::new(hw.clone(), engines);
    let g = vit();
    let b = plan(&g, &t, &FusionPolicy::Auto, Mode::LayerPerLayer, Parallelism::Parallel).unwrap();
    let f = plan(&g, &t, &FusionPolicy::Auto, Mode::Fused, Parallelism::Parallel).unwrap();
    (b, f, hw)
}

fn vit_compare(engines: EngineSelection) -> ComparisonReport {
    let (b, f, hw) = vit_plans(engines);
    compare(&simulate_plan(&b, &hw, true).unwrap(), &simulate_plan(&f, &hw, true).unwrap())
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn sample<S: Strategy>(s: &S, r: &mut TestRunner) -> S::Value {
    s.new_tree(r).expect("strategy").current()
}

fn intermediate_elision() -> Check {
    let (b, f, hw) = vit_plans(EngineSelection::Cluster);
    let sf = build_schedule(&f, &hw).unwrap();
    let in_lists = sf
        .groups
        .iter()
        .flat_map(|g| &g.iterations)
        .flat_map(|it| it.loads.iter().chain(&it.stores))
        .filter(|d| d.tensor == "h")
        .count();
    let fused_bytes = simulate(&sf, &hw, true).bytes_by_tensor.get("h").copied().unwrap_or(0);
    let base_bytes = simulate_plan(&b, &hw, true).unwrap().bytes_by_tensor.get("h").copied().unwrap_or(0);
    ensure(in_lists == 0 && fused_bytes == 0, || format!("fused moves h: {in_lists} descriptors, {fused_bytes} B"))?;
    ensure(base_bytes >= 2 * 602112, || format!("baseline moves only {base_bytes} B of h"))?;
    Ok(format!("h bytes moved: baseline {base_bytes}, fused {fused_bytes}"))
}

fn spill_reproduction() -> Check {
    let (b, f, _) = vit_plans(EngineSelection::Cluster);
    let s = &b.residency.spills;
    ensure(s.len() == 1 && s[0].tensor == "h" && s[0].level == Level::L3, || format!("baseline spills {s:?}"))?;
    ensure(f.residency.spills.is_empty(), || format!("fused spills {:?}", f.residency.spills))?;
    Ok(format!("baseline: {} ({} B) -> L3; fused: none", s[0].tensor, s[0].bytes))
}

fn transfer_reduction() -> Check {
    let c = vit_compare(EngineSelection::Cluster);
    let msg = format!(
        "{} -> {} transfers, reduction {:.2} % (threshold 35 %, reference {REFERENCE_TRANSFER_REDUCTION} %)",
        c.baseline.dma_transfer_count, c.fused.dma_transfer_count, c.transfer_reduction_pct
    );
    ensure(c.transfer_reduction_pct >= 35.0, || msg.clone())?;
    Ok(msg)
}

fn runtime_ordering() -> Check {
    let cluster = vit_compare(EngineSelection::Cluster);
    let npu = vit_compare(EngineSelection::NpuForGemm);
    let msg = format!(
        "cluster {:.4} % (reference {REFERENCE_RUNTIME_CLUSTER} %), cluster+npu {:.2} % (reference {REFERENCE_RUNTIME_NPU} %)",
        cluster.runtime_reduction_pct, npu.runtime_reduction_pct
    );
    ensure(
        cluster.fused.total_cycles < cluster.baseline.total_cycles
            && npu.runtime_reduction_pct > cluster.runtime_reduction_pct,
        || msg.clone(),
    )?;
    Ok(msg)
}

fn oracle_equivalence() -> Check {
    let mut r = runner();
    let strat = instance_strategy();
    let (mut compared, mut drawn) = (0, 0);
    while compared < 64 {
        drawn += 1;
        ensure(drawn < 10_000, || format!("only {compared} instances within the guard"))?;
        let inst = sample(&strat, &mut r);
        for grp in select_fusion_groups(&inst.graph, &FusionPolicy::Auto).unwrap() {
            let p = build_problem(&grp, &inst.graph, &inst.hw, &KernelTable::default(), inst.engines).unwrap();
            let c = Compiled::new(&p).unwrap();
            let size: u128 = c.lattice().iter().map(|l| l.len() as u128).product();
            if size > BRUTE_FORCE_LIMIT || c.full.iter().any(|&f| f > 64) {
                continue;
            }
            match (solve(&p, &inst.hw), brute_force_solve(&p, &inst.hw)) {
                (Ok(a), Ok(b)) => {
                    ensure(a.objective_cycles == b.objective_cycles, || {
                        format!("{}: {} vs oracle {}", grp.name(), a.objective_cycles, b.objective_cycles)
                    })?;
                    ensure(a == b, || format!("{}: tie-break differs {a:?} vs {b:?}", grp.name()))?;
                }
                (Err(SolveError::Infeasible { .. }), Err(SolveError::Infeasible { .. })) => {}
                (a, b) => return Err(format!("{}: {a:?} vs {b:?}", grp.name())),
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} groups agree with the exhaustive oracle"))
}

/// Input rows read by output rows `[o0, o0 + t)` of a strided,
/// unpadded window, by index enumeration.
fn window_span(o0: u64, t: u64, stride: u64, kernel: u64) -> (u64, u64) {
    let rows = (o0..o0 + t).flat_map(|o| (0..kernel).map(move |k| o * stride + k));
    let (lo, hi) = rows.fold((u64::MAX, 0), |(lo, hi), i| (lo.min(i), hi.max(i)));
    (lo, hi - lo + 1)
}

fn conv_links(graph: &NetworkGraph, hw: &HardwareConfig) -> Result<usize, String> {
    let node = &graph.nodes()[0];
    let OpKind::Conv2D { stride_h, stride_w, kernel_h, kernel_w } = node.kind else { return Ok(0) };
    let grp = &select_fusion_groups(graph, &FusionPolicy::None).unwrap()[0];
    let p = build_problem(grp, graph, hw, &KernelTable::default(), EngineSelection::Cluster).unwrap();
    let c = Compiled::new(&p).unwrap();
    let class = |slot: Slot, axis: usize| {
        let v = p.all_vars().find(|v| v.node == node.name && v.slot == slot && v.axis_index == axis).unwrap();
        c.class_of[&p.repr(v.id)]
    };
    let mut checked = 0;
    for (axis, stride, kernel) in [(1, stride_h, kernel_h), (2, stride_w, kernel_w)] {
        let (out, inp) = (class(Slot::Output(0), axis), class(Slot::Input(0), axis));
        let pos = c.loops.iter().position(|&l| l == out).ok_or("output axis is not a loop")?;
        let full = c.full[out];
        for t in 1..=full {
            let (n, _) = c.grid(pos, t);
            for i in 0..n {
                let clamped = t.min(full - i * t);
                let mut loops: Vec<u64> = c.loops.iter().map(|&l| c.full[l]).collect();
                let mut origin = vec![0; loops.len()];
                loops[pos] = clamped;
                origin[pos] = i * t;
                let ext = c.class_extents(&loops)[inp];
                let org = c.class_origins(&origin)[inp];
                let (lo, span) = window_span(i * t, clamped, stride, kernel);
                ensure(ext == span && org == lo, || {
                    format!("{}: out tile {t}@{i} -> link ({org}, {ext}), oracle ({lo}, {span})", node.name)
                })?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn geometric_coverage() -> Check {
    let mut r = runner();
    let graphs = graph_strategy();
    let hw = HardwareConfig::siracusa_like();
    let (mut grids, mut links) = (0u64, 0usize);
    let mut kinds = std::collections::BTreeSet::new();
    for _ in 0..200 {
        let g = sample(&graphs, &mut r);
        for n in g.nodes() {
            kinds.insert(n.kind.keyword());
        }
        for grp in select_fusion_groups(&g, &FusionPolicy::Auto).unwrap() {
            let p = build_problem(&grp, &g, &hw, &KernelTable::default(), EngineSelection::Cluster).unwrap();
            let c = Compiled::new(&p).unwrap();
            for (pos, cands) in c.filtered_lattice(Some(u32::MAX)).iter().enumerate() {
                let full = c.full[c.loops[pos]];
                // Random tilings: every extent, not only lattice points.
                for t in (1..=full).chain(cands.iter().copied()) {
                    let (n, last) = c.grid(pos, t);
                    ensure(n * t - t + last == full && last >= 1 && last <= t, || {
                        format!("{}: extent {t} of {full} -> ({n}, {last})", grp.name())
                    })?;
                    grids += 1;
                }
            }
        }
        links += conv_links(&g, &hw)?;
    }
    ensure(kinds.len() >= 5, || format!("only saw {kinds:?}"))?;
    ensure(links > 0, || "no conv instance drawn".into())?;
    Ok(format!("{grids} tile grids over {kinds:?}; {links} conv tile positions match the index oracle"))
}

fn capacity_invariant() -> Check {
    let mut r = runner();
    let strat = instance_strategy();
    let mut plans = 0;
    for _ in 0..150 {
        let inst = sample(&strat, &mut r);
        let t = Target::new(inst.hw.clone(), inst.engines);
        for mode in [Mode::LayerPerLayer, Mode::Fused] {
            let Ok(p) = plan(&inst.graph, &t, &FusionPolicy::Auto, mode, Parallelism::Parallel) else { continue };
            let cap = inst.hw.capacity(Level::L1);
            for g in &p.groups {
                let b = &g.solution.buffers;
                ensure(b.total_bytes <= cap, || format!("{}: {} > {cap}", g.group.name(), b.total_bytes))?;
                let mut spans: Vec<_> = b.entries.iter().map(|e| (e.offset, e.offset + e.bytes_per_tile * u64::from(e.copies))).collect();
                spans.sort();
                ensure(spans.windows(2).all(|w| w[0].1 <= w[1].0) && spans.last().is_none_or(|s| s.1 <= cap), || {
                    format!("{}: overlapping or out-of-range buffers {spans:?}", g.group.name())
                })?;
                for e in &b.entries {
                    let role = g.compiled.tensors.iter().find(|u| u.name == e.tensor).unwrap().role;
                    let want = if role == TensorRole::Internal { 1 } else { 2 };
                    ensure(e.copies == want, || format!("{}: {} has {} copies", g.group.name(), e.tensor, e.copies))?;
                }
                let ext = g.compiled.class_extents(&g.solution.loop_extents);
                ensure(allocate_buffers(&g.compiled, &ext, cap).is_ok(), || "re-allocation failed".into())?;
                // Residual tiles reuse the full-tile buffers.
                for (pos, a) in g.solution.tile_grid.iter().enumerate() {
                    let mut loops = g.solution.loop_extents.clone();
                    loops[pos] = a.last_tile_extent;
                    ensure(g.compiled.footprint(&g.compiled.class_extents(&loops)) <= g.compiled.footprint(&ext), || {
                        "residual tile outgrows its buffers".into()
                    })?;
                }
            }
            plans += 1;
        }
    }
    Ok(format!("{plans} fuzzed plans fit L1 with double-buffer copies"))
}

fn group_compute_bound(g: &GroupSchedule, hw: &HardwareConfig) -> bool {
    g.iterations.iter().all(|it| {
        let c: u64 = it.computes.iter().map(|c| c.cycles).sum();
        let dma: u64 = it
            .loads
            .iter()
            .chain(&it.stores)
            .map(|d| dma_cost(hw, &TransferShape { bytes: d.bytes, dims: d.dims, pair: d.pair }))
            .sum();
        c >= dma
    })
}

fn double_buffer_law() -> Check {
    let mut r = runner();
    let strat = instance_strategy();
    let mut schedules = 0;
    for _ in 0..100 {
        let inst = sample(&strat, &mut r);
        let t = Target::new(inst.hw.clone(), inst.engines);
        for mode in [Mode::LayerPerLayer, Mode::Fused] {
            let Ok(p) = plan(&inst.graph, &t, &FusionPolicy::Auto, mode, Parallelism::Parallel) else { continue };
            let s = build_schedule(&p, &inst.hw).unwrap();
            let (on, off) = (simulate(&s, &inst.hw, true), simulate(&s, &inst.hw, false));
            ensure(on.total_cycles <= off.total_cycles, || format!("DB on {} > off {}", on.total_cycles, off.total_cycles))?;
            schedules += 1;
        }
    }

    // Constructed compute-bound chains: only pipeline fill and drain differ.
    let mut bounded = 0;
    for (m, n) in [(64, 64), (32, 128), (128, 16)] {
        let g = eltwise_chain(m, n, &["gelu", "gelu"]);
        let mut hw = small_hw(4096, 1 << 16);
        hw.min_tile_elems = 64;
        let t = Target::new(hw.clone(), EngineSelection::Cluster);
        let b = plan(&g, &t, &FusionPolicy::Auto, Mode::LayerPerLayer, Parallelism::Parallel).unwrap();
        let f = plan(&g, &t, &FusionPolicy::Auto, Mode::Fused, Parallelism::Parallel).unwrap();
        let (sb, sf) = (build_schedule(&b, &hw).unwrap(), build_schedule(&f, &hw).unwrap());
        ensure(b.residency.spills.is_empty(), || "constructed instance spills".into())?;
        ensure(sb.groups.iter().chain(&sf.groups).all(|g| group_compute_bound(g, &hw)), || {
            format!("{m}x{n} is not compute-bound")
        })?;
        // First load plus last store of every group.
        let boundary = |s: &ftl::sim::Schedule| -> u64 {
            let cost = |d: &ftl::sim::TransferDescriptor| dma_cost(&hw, &TransferShape { bytes: d.bytes, dims: d.dims, pair: d.pair });
            s.groups
                .iter()
                .map(|g| {
                    let first: u64 = g.iterations[0].loads.iter().map(cost).sum();
                    let last: u64 = g.iterations.last().unwrap().stores.iter().map(cost).sum();
                    first + last
                })
                .sum()
        };
        let (tb, tf) = (simulate(&sb, &hw, true).total_cycles, simulate(&sf, &hw, true).total_cycles);
        let slack = boundary(&sb).max(boundary(&sf));
        ensure(tb.abs_diff(tf) <= slack, || format!("{m}x{n}: baseline {tb}, fused {tf}, slack {slack}"))?;
        bounded += 1;
    }
    Ok(format!("DB on <= off on {schedules} schedules; {bounded} compute-bound pairs agree within boundary terms"))
}

fn determinism() -> Check {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
    let run = |format: &str| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_ftl"))
            .current_dir(root)
            .args(["compare", "--model", "models/vit_mlp.net", "--hw", "hw/siracusa_like.hw", "--format", format])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(out.stdout)
    };
    for format in ["csv", "json"] {
        let (a, b) = (run(format)?, run(format)?);
        ensure(a == b, || format!("{format} output differs between runs"))?;
        ensure(!a.is_empty(), || format!("empty {format} output"))?;
    }
    Ok("csv and json byte-identical across runs".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Check); 9] = [
        ("intermediate elision", 1, intermediate_elision),
        ("L3 spill reproduction", 1, spill_reproduction),
        ("DMA transfer reduction", 5, transfer_reduction),
        ("runtime-reduction ordering", 5, runtime_ordering),
        ("solver oracle equivalence", 60, oracle_equivalence),
        ("geometric coverage", 30, geometric_coverage),
        ("capacity invariant", 30, capacity_invariant),
        ("double-buffer law", 10, double_buffer_law),
        ("determinism", 5, determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = result.and_then(|m| {
            if took < Duration::from_secs(*limit) {
                Ok(m)
            } else {
                Err(format!("{m}; took {took:.2?}, limit {limit} s"))
            }
        });
        let (tag, detail) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {} {name}: {tag} [{:.3} s] {detail}", i + 1, took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
