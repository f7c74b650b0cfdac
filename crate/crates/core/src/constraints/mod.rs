//! Per-operator tiling variables and the constraints relating them.
//!
//! Every axis of every tensor an operator touches gets its own [`DimVar`],
//! whose value is the tile extent along that axis. Constraints come in three
//! classes: geometric (data dependencies between output and input tiles),
//! kernel policy (dataflow requirements of the selected kernel) and
//! performance (soft, relaxable utilization hints).

pub mod kernels;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{NetworkGraph, OpCategory, OpKind, OperatorNode};
use crate::hw::{Engine, EngineSelection, HardwareConfig};

pub use kernels::{AxisRole, KernelDescriptor, KernelTable, KernelTableError};

/// Priority of the core-count divisibility constraint. Relaxed first.
pub const DIVISIBILITY_PRIORITY: u32 = 1;
/// Priority of the minimum-tile-size constraint.
pub const MIN_SIZE_PRIORITY: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("node `{node}`: kernel descriptor for {descriptor} does not match operator kind {op}")]
    DescriptorMismatch {
        node: String,
        op: OpCategory,
        descriptor: OpCategory,
    },
    #[error("node `{node}`: axis role {role:?} does not exist for {op}")]
    RoleMismatch {
        node: String,
        role: AxisRole,
        op: OpCategory,
    },
    #[error("no kernel descriptor for ({op}, {engine})")]
    MissingKernel { op: OpCategory, engine: Engine },
    #[error("node `{node}`: no variable for {slot:?} axis {axis}")]
    MissingVar { node: String, slot: Slot, axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct VarId(pub u32);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Hands out problem-wide unique variable ids.
#[derive(Debug, Default)]
pub struct VarIdGen(u32);

impl VarIdGen {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn next_id(&mut self) -> VarId {
        let id = VarId(self.0);
        self.0 += 1;
        id
    }
}

/// Position of a tensor in an operator's signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Slot {
    Input(usize),
    Output(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DimVar {
    pub id: VarId,
    pub node: String,
    pub slot: Slot,
    pub tensor: String,
    pub axis: String,
    pub axis_index: usize,
    /// Domain is `[1, full_extent]`.
    pub full_extent: u64,
}

impl DimVar {
    pub fn label(&self) -> String {
        format!("{}:{}.{}", self.node, self.tensor, self.axis)
    }
}

/// `input tile = scale · output tile + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct AffineLink {
    pub input: VarId,
    pub output: VarId,
    pub scale: u64,
    pub offset: i64,
}

impl AffineLink {
    pub fn eval(&self, output_extent: u64) -> u64 {
        let v = self.scale as i128 * output_extent as i128 + self.offset as i128;
        v.max(0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConstraintKind {
    Geometric(AffineLink),
    Equal(VarId, VarId),
    Fixed(VarId, u64),
    MultipleOf(VarId, u64),
    MinValue(VarId, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConstraintClass {
    Geometric,
    KernelPolicy,
    /// Soft; lower priorities are relaxed first.
    Performance { priority: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub class: ConstraintClass,
}

impl Constraint {
    fn new(kind: ConstraintKind, class: ConstraintClass) -> Self {
        Self { kind, class }
    }

    pub fn is_hard(&self) -> bool {
        !matches!(self.class, ConstraintClass::Performance { .. })
    }

    pub fn priority(&self) -> Option<u32> {
        match self.class {
            ConstraintClass::Performance { priority } => Some(priority),
            _ => None,
        }
    }

    pub fn vars(&self) -> Vec<VarId> {
        match self.kind {
            ConstraintKind::Geometric(l) => vec![l.input, l.output],
            ConstraintKind::Equal(a, b) => vec![a, b],
            ConstraintKind::Fixed(v, _) | ConstraintKind::MultipleOf(v, _) | ConstraintKind::MinValue(v, _) => {
                vec![v]
            }
        }
    }

    pub fn map_vars(&self, f: impl Fn(VarId) -> VarId) -> Self {
        let kind = match self.kind {
            ConstraintKind::Geometric(l) => ConstraintKind::Geometric(AffineLink {
                input: f(l.input),
                output: f(l.output),
                ..l
            }),
            ConstraintKind::Equal(a, b) => ConstraintKind::Equal(f(a), f(b)),
            ConstraintKind::Fixed(v, x) => ConstraintKind::Fixed(f(v), x),
            ConstraintKind::MultipleOf(v, k) => ConstraintKind::MultipleOf(f(v), k),
            ConstraintKind::MinValue(v, k) => ConstraintKind::MinValue(f(v), k),
        };
        Self { kind, class: self.class }
    }

    /// Checks the constraint at full-tile extents. Divisibility and minimum
    /// size do not bind an axis left untiled: its single tile is also the
    /// last tile.
    pub fn holds(&self, extent: impl Fn(VarId) -> u64, full: impl Fn(VarId) -> u64) -> bool {
        match self.kind {
            ConstraintKind::Geometric(l) => extent(l.input) == l.eval(extent(l.output)),
            ConstraintKind::Equal(a, b) => extent(a) == extent(b),
            ConstraintKind::Fixed(v, x) => extent(v) == x,
            ConstraintKind::MultipleOf(v, k) => {
                let e = extent(v);
                e % k == 0 || e == full(v)
            }
            ConstraintKind::MinValue(v, k) => {
                let e = extent(v);
                e >= k || e == full(v)
            }
        }
    }

    pub fn describe(&self, label: impl Fn(VarId) -> String) -> String {
        let body = match self.kind {
            ConstraintKind::Geometric(l) => {
                let offset = match l.offset.cmp(&0) {
                    std::cmp::Ordering::Less => format!(" - {}", -l.offset),
                    std::cmp::Ordering::Equal => String::new(),
                    std::cmp::Ordering::Greater => format!(" + {}", l.offset),
                };
                format!("{} = {}*{}{}", label(l.input), l.scale, label(l.output), offset)
            }
            ConstraintKind::Equal(a, b) => format!("{} = {}", label(a), label(b)),
            ConstraintKind::Fixed(v, x) => format!("{} == {}", label(v), x),
            ConstraintKind::MultipleOf(v, k) => format!("{} % {} == 0", label(v), k),
            ConstraintKind::MinValue(v, k) => format!("{} >= {}", label(v), k),
        };
        let tag = match self.class {
            ConstraintClass::Geometric => "geometric".to_string(),
            ConstraintClass::KernelPolicy => "kernel-policy".to_string(),
            ConstraintClass::Performance { priority } => format!("performance p{priority}"),
        };
        format!("[{tag}] {body}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintSet {
    pub owner: String,
    pub vars: Vec<DimVar>,
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn var(&self, id: VarId) -> Option<&DimVar> {
        self.vars.iter().find(|v| v.id == id)
    }

    /// Every variable referenced by a constraint is declared.
    pub fn is_closed(&self) -> bool {
        self.constraints
            .iter()
            .flat_map(|c| c.vars())
            .all(|id| self.var(id).is_some())
    }
}

/// One variable per (tensor slot, axis) of the node, inputs first.
pub fn attribute_vars(node: &OperatorNode, graph: &NetworkGraph, ids: &mut VarIdGen) -> Vec<DimVar> {
    let slots = node
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (Slot::Input(i), t))
        .chain(node.outputs.iter().enumerate().map(|(i, t)| (Slot::Output(i), t)));
    let mut vars = Vec::new();
    for (slot, tensor) in slots {
        let spec = graph.tensor(tensor).expect("validated graph");
        for (axis_index, axis) in spec.axes.iter().enumerate() {
            vars.push(DimVar {
                id: ids.next_id(),
                node: node.name.clone(),
                slot,
                tensor: tensor.clone(),
                axis: axis.name.clone(),
                axis_index,
                full_extent: axis.extent,
            });
        }
    }
    vars
}

struct NodeVars<'a> {
    node: &'a OperatorNode,
    vars: &'a [DimVar],
}

impl NodeVars<'_> {
    fn get(&self, slot: Slot, axis: usize) -> Result<&DimVar, ConstraintError> {
        self.vars
            .iter()
            .find(|v| v.node == self.node.name && v.slot == slot && v.axis_index == axis)
            .ok_or_else(|| ConstraintError::MissingVar {
                node: self.node.name.clone(),
                slot,
                axis,
            })
    }

    fn id(&self, slot: Slot, axis: usize) -> Result<VarId, ConstraintError> {
        self.get(slot, axis).map(|v| v.id)
    }

    fn rank(&self, slot: Slot) -> usize {
        self.vars.iter().filter(|v| v.node == self.node.name && v.slot == slot).count()
    }

    fn role(&self, role: AxisRole) -> Result<&DimVar, ConstraintError> {
        let out = Slot::Output(0);
        let found = match (self.node.kind.category(), role) {
            (OpCategory::Gemm, AxisRole::M) | (OpCategory::Conv2d, AxisRole::F) => self.get(out, 0),
            (OpCategory::Gemm, AxisRole::N) | (OpCategory::Conv2d, AxisRole::H) => self.get(out, 1),
            (OpCategory::Conv2d, AxisRole::W) => self.get(out, 2),
            (OpCategory::Gemm, AxisRole::K) => self.get(Slot::Input(0), 1),
            (OpCategory::Conv2d, AxisRole::C) => self.get(Slot::Input(0), 0),
            (OpCategory::Eltwise, AxisRole::Inner) => self.get(out, self.rank(out).saturating_sub(1)),
            (op, role) => {
                return Err(ConstraintError::RoleMismatch {
                    node: self.node.name.clone(),
                    role,
                    op,
                })
            }
        };
        found
    }
}

fn equal(a: VarId, b: VarId) -> Constraint {
    Constraint::new(ConstraintKind::Equal(a, b), ConstraintClass::Geometric)
}

/// Data-dependency constraints between output and input tiles.
pub fn emit_geometric(node: &OperatorNode, vars: &[DimVar]) -> Result<Vec<Constraint>, ConstraintError> {
    let nv = NodeVars { node, vars };
    let (i0, i1, out) = (Slot::Input(0), Slot::Input(1), Slot::Output(0));
    let mut cs = Vec::new();
    match node.kind {
        OpKind::Gemm { has_bias } => {
            cs.push(equal(nv.id(i0, 0)?, nv.id(out, 0)?));
            cs.push(equal(nv.id(i1, 1)?, nv.id(out, 1)?));
            cs.push(equal(nv.id(i0, 1)?, nv.id(i1, 0)?));
            if has_bias {
                cs.push(equal(nv.id(Slot::Input(2), 0)?, nv.id(out, 1)?));
            }
        }
        OpKind::Unary { .. } => {
            for axis in 0..nv.rank(out) {
                cs.push(equal(nv.id(i0, axis)?, nv.id(out, axis)?));
            }
        }
        OpKind::Add => {
            for axis in 0..nv.rank(out) {
                cs.push(equal(nv.id(i0, axis)?, nv.id(out, axis)?));
                cs.push(equal(nv.id(i1, axis)?, nv.id(out, axis)?));
            }
        }
        OpKind::Conv2D {
            stride_h,
            stride_w,
            kernel_h,
            kernel_w,
        } => {
            for (axis, stride, kernel) in [(1, stride_h, kernel_h), (2, stride_w, kernel_w)] {
                let link = AffineLink {
                    input: nv.id(i0, axis)?,
                    output: nv.id(out, axis)?,
                    scale: stride,
                    offset: kernel as i64 - stride as i64,
                };
                cs.push(Constraint::new(ConstraintKind::Geometric(link), ConstraintClass::Geometric));
            }
            cs.push(equal(nv.id(i0, 0)?, nv.id(i1, 1)?));
            cs.push(equal(nv.id(out, 0)?, nv.id(i1, 0)?));
            // The kernel window is always whole.
            cs.push(Constraint::new(
                ConstraintKind::Fixed(nv.id(i1, 2)?, kernel_h),
                ConstraintClass::Geometric,
            ));
            cs.push(Constraint::new(
                ConstraintKind::Fixed(nv.id(i1, 3)?, kernel_w),
                ConstraintClass::Geometric,
            ));
        }
    }
    Ok(cs)
}

/// Hard constraints imposed by the kernel implementation.
pub fn emit_kernel_policy(
    node: &OperatorNode,
    vars: &[DimVar],
    kernel: &KernelDescriptor,
) -> Result<Vec<Constraint>, ConstraintError> {
    let op = node.kind.category();
    if kernel.op != op {
        return Err(ConstraintError::DescriptorMismatch {
            node: node.name.clone(),
            op,
            descriptor: kernel.op,
        });
    }
    let nv = NodeVars { node, vars };
    let mut cs = Vec::new();
    if kernel.requires_full_reduction {
        let reduction = match op {
            OpCategory::Gemm => Some(nv.role(AxisRole::K)?),
            OpCategory::Conv2d => Some(nv.role(AxisRole::C)?),
            OpCategory::Eltwise => None,
        };
        if let Some(v) = reduction {
            cs.push(Constraint::new(
                ConstraintKind::Fixed(v.id, v.full_extent),
                ConstraintClass::KernelPolicy,
            ));
        }
    }
    if let (true, Some(role)) = (kernel.simd_width > 1, kernel.vectorized_axis) {
        let v = nv.role(role)?;
        cs.push(Constraint::new(
            ConstraintKind::MultipleOf(v.id, kernel.simd_width),
            ConstraintClass::KernelPolicy,
        ));
    }
    Ok(cs)
}

/// Soft utilization constraints: core-count divisibility on the parallel
/// axis and a minimum extent on the outermost output axis.
pub fn emit_performance(
    node: &OperatorNode,
    vars: &[DimVar],
    hw: &HardwareConfig,
) -> Result<Vec<Constraint>, ConstraintError> {
    let nv = NodeVars { node, vars };
    let out = Slot::Output(0);
    let parallel = match node.kind.category() {
        OpCategory::Conv2d => nv.get(out, 1)?,
        OpCategory::Gemm | OpCategory::Eltwise => nv.get(out, 0)?,
    };
    let outer = nv.get(out, 0)?;
    let mut cs = Vec::new();
    if hw.num_cores > 1 {
        cs.push(Constraint::new(
            ConstraintKind::MultipleOf(parallel.id, hw.num_cores),
            ConstraintClass::Performance {
                priority: DIVISIBILITY_PRIORITY,
            },
        ));
    }
    if hw.min_tile_elems > 1 {
        cs.push(Constraint::new(
            ConstraintKind::MinValue(outer.id, hw.min_tile_elems.min(outer.full_extent)),
            ConstraintClass::Performance {
                priority: MIN_SIZE_PRIORITY,
            },
        ));
    }
    Ok(cs)
}

/// Variables plus all three constraint classes for one node.
pub fn build_constraint_set(
    node: &OperatorNode,
    graph: &NetworkGraph,
    hw: &HardwareConfig,
    kernels: &KernelTable,
    engines: EngineSelection,
    ids: &mut VarIdGen,
) -> Result<ConstraintSet, ConstraintError> {
    let op = node.kind.category();
    let engine = engines.engine_for(op);
    let kernel = kernels
        .lookup(op, engine)
        .ok_or(ConstraintError::MissingKernel { op, engine })?;
    let vars = attribute_vars(node, graph, ids);
    let mut constraints = emit_geometric(node, &vars)?;
    constraints.extend(emit_kernel_policy(node, &vars, kernel)?);
    constraints.extend(emit_performance(node, &vars, hw)?);
    Ok(ConstraintSet {
        owner: node.name.clone(),
        vars,
        constraints,
    })
}
