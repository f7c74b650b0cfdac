//! Command implementations behind the `ftl` binary: load inputs, run the
//! planner and simulator, render table / CSV / JSON.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::constraints::{KernelTable, KernelTableError, VarId};
use crate::fusion::{build_problem, select_fusion_groups, FusionPolicy};
use crate::graph::{parse_network, GraphError, NetworkGraph};
use crate::hw::{EngineSelection, HardwareConfig, HwError};
use crate::par::Parallelism;
use crate::plan::{plan, Mode, Plan, PlanError, Target};
use crate::sim::{compare, simulate_plan, ComparisonReport, SimReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FtlError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Model { path: PathBuf, source: GraphError },
    #[error("{}: {source}", path.display())]
    Hardware { path: PathBuf, source: HwError },
    #[error("{}: {source}", path.display())]
    Kernels { path: PathBuf, source: KernelTableError },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}

impl FtlError {
    /// 1 for I/O and parse problems, 2 when the inputs are fine but no
    /// schedule exists.
    pub fn exit_code(&self) -> i32 {
        match self {
            FtlError::Plan(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub hw: PathBuf,
    pub kernels: Option<PathBuf>,
    pub fuse: FusionPolicy,
    pub engine: EngineSelection,
    pub double_buffering: bool,
    pub format: Format,
    pub output: Option<PathBuf>,
    pub parallelism: Parallelism,
}

impl RunConfig {
    pub fn new(model: impl Into<PathBuf>, hw: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            hw: hw.into(),
            kernels: None,
            fuse: FusionPolicy::Auto,
            engine: EngineSelection::Cluster,
            double_buffering: true,
            format: Format::Table,
            output: None,
            parallelism: Parallelism::default(),
        }
    }
}

fn read(path: &Path) -> Result<String, FtlError> {
    std::fs::read_to_string(path).map_err(|source| FtlError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(cfg: &RunConfig) -> Result<(NetworkGraph, Target), FtlError> {
    let graph = parse_network(&read(&cfg.model)?).map_err(|source| FtlError::Model {
        path: cfg.model.clone(),
        source,
    })?;
    let hw = HardwareConfig::from_toml(&read(&cfg.hw)?).map_err(|source| FtlError::Hardware {
        path: cfg.hw.clone(),
        source,
    })?;
    let mut target = Target::new(hw, cfg.engine);
    if let Some(path) = &cfg.kernels {
        target.kernels = KernelTable::from_toml(&read(path)?).map_err(|source| FtlError::Kernels {
            path: path.clone(),
            source,
        })?;
    }
    Ok((graph, target))
}

/// Writes `text` to the configured output path, or returns it for stdout.
pub fn emit(cfg: &RunConfig, text: String) -> Result<Option<String>, FtlError> {
    match &cfg.output {
        Some(path) => {
            std::fs::write(path, text).map_err(|source| FtlError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}

fn pct(x: f64) -> String {
    format!("{x:.2}")
}

// ---- plan ----

#[derive(Serialize)]
struct PlanDoc<'a> {
    schema_version: u32,
    command: &'static str,
    engine: EngineSelection,
    groups: Vec<PlanGroupDoc<'a>>,
}

#[derive(Serialize)]
struct PlanGroupDoc<'a> {
    group: String,
    nodes: &'a [String],
    num_tiles: u64,
    solution: &'a crate::solver::TilingSolution,
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<String, FtlError> {
    let (graph, target) = load(cfg)?;
    let p = plan(&graph, &target, &cfg.fuse, Mode::Fused, cfg.parallelism)?;
    render_plan(&p, cfg.format)
}

pub fn render_plan(p: &Plan, format: Format) -> Result<String, FtlError> {
    match format {
        Format::Json => {
            let doc = PlanDoc {
                schema_version: SCHEMA_VERSION,
                command: "plan",
                engine: p.engines,
                groups: p
                    .groups
                    .iter()
                    .map(|g| PlanGroupDoc {
                        group: g.group.name(),
                        nodes: &g.group.nodes,
                        num_tiles: g.solution.num_tiles(),
                        solution: &g.solution,
                    })
                    .collect(),
            };
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["group", "class", "extent", "full", "num_tiles", "last_tile_extent", "l1_bytes"])?;
            for g in &p.groups {
                for a in &g.solution.tile_grid {
                    w.write_record([
                        g.group.name(),
                        a.class.clone(),
                        a.extent.to_string(),
                        a.full.to_string(),
                        a.num_tiles.to_string(),
                        a.last_tile_extent.to_string(),
                        g.solution.buffers.total_bytes.to_string(),
                    ])?;
                }
            }
            finish_csv(w)
        }
        Format::Table => {
            let mut out = String::new();
            for g in &p.groups {
                let s = &g.solution;
                let _ = writeln!(out, "group {} ({} tiles, {} cycles)", g.group.name(), s.num_tiles(), s.objective_cycles);
                let _ = writeln!(out, "  {:<24} {:>8} {:>8} {:>8} {:>6}", "class", "extent", "full", "tiles", "last");
                for a in &s.tile_grid {
                    let _ = writeln!(
                        out,
                        "  {:<24} {:>8} {:>8} {:>8} {:>6}",
                        a.class, a.extent, a.full, a.num_tiles, a.last_tile_extent
                    );
                }
                let _ = writeln!(out, "  buffers ({} of L1 bytes):", s.buffers.total_bytes);
                for b in &s.buffers.entries {
                    let _ = writeln!(
                        out,
                        "    {:<20} {:>8} B x{} @ {}",
                        b.tensor, b.bytes_per_tile, b.copies, b.offset
                    );
                }
                for r in &s.relaxed {
                    let _ = writeln!(out, "  relaxed: {}", r.description);
                }
            }
            Ok(out)
        }
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, FtlError> {
    let bytes = w.into_inner().map_err(|e| FtlError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

// ---- compare ----

pub fn run_compare(cfg: &RunConfig) -> Result<ComparisonReport, FtlError> {
    let (graph, target) = load(cfg)?;
    let mut reports = Vec::with_capacity(2);
    for mode in [Mode::LayerPerLayer, Mode::Fused] {
        let p = plan(&graph, &target, &cfg.fuse, mode, cfg.parallelism)?;
        reports.push(simulate_plan(&p, &target.hw, cfg.double_buffering)?);
    }
    Ok(compare(&reports[0], &reports[1]))
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<String, FtlError> {
    render_compare(&run_compare(cfg)?, cfg.format)
}

pub const CSV_COLUMNS: [&str; 12] = [
    "mode",
    "engine",
    "total_cycles",
    "dma_transfers",
    "bytes_l2_l1",
    "bytes_l3_l1",
    "bytes_l3_l2",
    "peak_l1",
    "peak_l2",
    "spills",
    "runtime_reduction_pct",
    "transfer_reduction_pct",
];

fn csv_row(r: &SimReport, runtime: f64, transfers: f64) -> Vec<String> {
    vec![
        r.mode.as_str().to_string(),
        r.engines.as_str().to_string(),
        r.total_cycles.to_string(),
        r.dma_transfer_count.to_string(),
        r.bytes_moved.l2_l1.to_string(),
        r.bytes_moved.l3_l1.to_string(),
        r.bytes_moved.l3_l2.to_string(),
        r.peak_usage.l1.to_string(),
        r.peak_usage.l2.to_string(),
        r.spills.len().to_string(),
        pct(runtime),
        pct(transfers),
    ]
}

#[derive(Serialize)]
struct CompareDoc<'a> {
    schema_version: u32,
    command: &'static str,
    #[serde(flatten)]
    report: &'a ComparisonReport,
}

pub fn render_compare(c: &ComparisonReport, format: Format) -> Result<String, FtlError> {
    match format {
        Format::Json => {
            let doc = CompareDoc {
                schema_version: SCHEMA_VERSION,
                command: "compare",
                report: c,
            };
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_COLUMNS)?;
            // The baseline is its own reference.
            w.write_record(csv_row(&c.baseline, 0.0, 0.0))?;
            w.write_record(csv_row(&c.fused, c.runtime_reduction_pct, c.transfer_reduction_pct))?;
            finish_csv(w)
        }
        Format::Table => {
            let (b, f) = (&c.baseline, &c.fused);
            let rows: [(&str, u64, u64); 8] = [
                ("total_cycles", b.total_cycles, f.total_cycles),
                ("dma_transfers", b.dma_transfer_count, f.dma_transfer_count),
                ("bytes_l2_l1", b.bytes_moved.l2_l1, f.bytes_moved.l2_l1),
                ("bytes_l3_l1", b.bytes_moved.l3_l1, f.bytes_moved.l3_l1),
                ("bytes_l3_l2", b.bytes_moved.l3_l2, f.bytes_moved.l3_l2),
                ("peak_l1", b.peak_usage.l1, f.peak_usage.l1),
                ("peak_l2", b.peak_usage.l2, f.peak_usage.l2),
                ("spills", b.spills.len() as u64, f.spills.len() as u64),
            ];
            let mut out = String::new();
            let _ = writeln!(
                out,
                "engine {}, double buffering {}",
                b.engines,
                if b.double_buffering { "on" } else { "off" }
            );
            let _ = writeln!(out, "{:<16} {:>14} {:>14}", "", "baseline", "fused");
            for (name, x, y) in rows {
                let _ = writeln!(out, "{name:<16} {x:>14} {y:>14}");
            }
            let _ = writeln!(out, "runtime reduction   {} %", pct(c.runtime_reduction_pct));
            let _ = writeln!(out, "transfer reduction  {} %", pct(c.transfer_reduction_pct));
            for (name, r) in [("baseline", b), ("fused", f)] {
                for s in &r.spills {
                    let _ = writeln!(out, "{name}: {} ({} B) placed in {} before {}", s.tensor, s.bytes, s.level, s.group);
                }
            }
            Ok(out)
        }
    }
}

// ---- dump-constraints ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VarDump {
    pub id: VarId,
    pub label: String,
    pub full: u64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupConstraints {
    pub group: String,
    pub variables: Vec<VarDump>,
    /// Producer variable, consumer variable. Empty for unfused groups.
    pub bindings: Vec<(String, String)>,
    pub classes: BTreeMap<String, Vec<String>>,
    pub constraints: Vec<String>,
}

pub fn dump_constraints(graph: &NetworkGraph, target: &Target, policy: &FusionPolicy) -> Result<Vec<GroupConstraints>, PlanError> {
    let mut out = Vec::new();
    for group in select_fusion_groups(graph, policy)? {
        let p = build_problem(&group, graph, &target.hw, &target.kernels, target.engines)?;
        let labels: BTreeMap<VarId, String> = p.all_vars().map(|v| (v.id, v.label())).collect();
        let label = |id: VarId| labels[&id].clone();
        let variables = p
            .all_vars()
            .map(|v| VarDump {
                id: v.id,
                label: v.label(),
                full: v.full_extent,
                class: label(p.repr(v.id)),
            })
            .collect();
        let classes = p
            .classes()
            .into_iter()
            .map(|(rep, members)| (label(rep), members.into_iter().map(label).collect()))
            .collect();
        out.push(GroupConstraints {
            group: group.name(),
            variables,
            bindings: p.bindings.iter().map(|&(a, b)| (label(a), label(b))).collect(),
            classes,
            constraints: p.constraints.constraints.iter().map(|c| c.describe(label)).collect(),
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct DumpDoc<'a> {
    schema_version: u32,
    command: &'static str,
    groups: &'a [GroupConstraints],
}

pub fn cmd_dump_constraints(cfg: &RunConfig) -> Result<String, FtlError> {
    let (graph, target) = load(cfg)?;
    let groups = dump_constraints(&graph, &target, &cfg.fuse)?;
    match cfg.format {
        Format::Json => Ok(serde_json::to_string_pretty(&DumpDoc {
            schema_version: SCHEMA_VERSION,
            command: "dump-constraints",
            groups: &groups,
        })? + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["group", "constraint"])?;
            for g in &groups {
                for c in &g.constraints {
                    w.write_record([g.group.as_str(), c])?;
                }
            }
            finish_csv(w)
        }
        Format::Table => {
            let mut out = String::new();
            for g in &groups {
                let _ = writeln!(out, "group {}", g.group);
                let _ = writeln!(out, "  variables:");
                for v in &g.variables {
                    let _ = writeln!(out, "    v{:<4} {:<28} full {:>6}  class {}", v.id.0, v.label, v.full, v.class);
                }
                if !g.bindings.is_empty() {
                    let _ = writeln!(out, "  bindings:");
                    for (a, b) in &g.bindings {
                        let _ = writeln!(out, "    {a} ≡ {b}");
                    }
                }
                let _ = writeln!(out, "  constraints:");
                for c in &g.constraints {
                    let _ = writeln!(out, "    {c}");
                }
            }
            Ok(out)
        }
    }
}
