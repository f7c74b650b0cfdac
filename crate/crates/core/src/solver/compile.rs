//! Lowers a [`BoundProblem`] to extent classes, loop classes and a tile cost
//! model the search and the simulator share.

use std::collections::BTreeMap;

use crate::constraints::{Constraint, ConstraintKind, Slot, VarId};
use crate::fusion::BoundProblem;
use crate::graph::{OpKind, OperatorNode};
use crate::hw::{dma_cost, kernel_cost, Engine, HardwareConfig, KernelWork, Level, LevelPair, TransferShape};

use super::SolveError;

/// A set of variables forced equal by hard equalities and binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Class {
    pub rep: VarId,
    pub full: u64,
    pub label: String,
    pub members: Vec<VarId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub from: usize,
    pub scale: u64,
    pub offset: i64,
}

impl Link {
    fn eval(&self, t: u64) -> u64 {
        (self.scale as i128 * t as i128 + self.offset as i128).max(1) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Link { input: usize, link: Link },
    Equal(usize, usize),
    Fixed(usize, u64),
    Multiple(usize, u64),
    Min(usize, u64),
}

impl Check {
    fn holds(&self, ext: &[u64], full: &[u64]) -> bool {
        match *self {
            Check::Link { input, link } => ext[input] == link.eval(ext[link.from]).min(full[input]),
            Check::Equal(a, b) => ext[a] == ext[b],
            Check::Fixed(c, x) => ext[c] == x,
            Check::Multiple(c, k) => ext[c] % k == 0 || ext[c] == full[c],
            Check::Min(c, k) => ext[c] >= k || ext[c] == full[c],
        }
    }

    /// The class a single-class check constrains.
    fn unary_class(&self) -> Option<usize> {
        match *self {
            Check::Fixed(c, _) | Check::Multiple(c, _) | Check::Min(c, _) => Some(c),
            Check::Link { .. } | Check::Equal(..) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Load,
    Store,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorUse {
    pub name: String,
    pub elem_bytes: u64,
    pub role: TensorRole,
    /// Extent class of each axis.
    pub axes: Vec<usize>,
    pub full: Vec<u64>,
}

impl TensorUse {
    pub fn tile_bytes(&self, ext: &[u64]) -> u64 {
        self.axes.iter().map(|&c| ext[c]).product::<u64>() * self.elem_bytes
    }

    pub fn tile(&self, ext: &[u64]) -> Vec<u64> {
        self.axes.iter().map(|&c| ext[c]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkShape {
    Gemm { m: usize, n: usize, k: usize },
    Eltwise { out: Vec<usize> },
    Conv { f: usize, h: usize, w: usize, c: usize, kh: u64, kw: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeUse {
    pub name: String,
    pub engine: Engine,
    pub kind: OpKind,
    pub shape: WorkShape,
}

impl NodeUse {
    pub fn work(&self, ext: &[u64]) -> KernelWork {
        match (&self.shape, self.kind) {
            (&WorkShape::Gemm { m, n, k }, _) => KernelWork::Gemm {
                m: ext[m],
                n: ext[n],
                k: ext[k],
            },
            (WorkShape::Eltwise { out }, kind) => KernelWork::Eltwise {
                func: match kind {
                    OpKind::Unary { func } => func.into(),
                    _ => crate::hw::EltwiseFn::Add,
                },
                elems: out.iter().map(|&c| ext[c]).product(),
            },
            (&WorkShape::Conv { f, h, w, c, kh, kw }, _) => KernelWork::Conv2D {
                f: ext[f],
                h: ext[h],
                w: ext[w],
                c: ext[c],
                kh,
                kw,
            },
        }
    }
}

/// Rows per transferred tile beyond the contiguous run, capped at a 3-D
/// command.
pub fn transfer_dims(tile: &[u64], full: &[u64]) -> u8 {
    let mut dims = 1u8;
    let mut outer = 1u64;
    for i in 0..tile.len() {
        if i > 0 && tile[i] < full[i] && outer > 1 {
            dims += 1;
        }
        outer = outer.saturating_mul(tile[i]);
    }
    dims.min(3)
}

/// Per-iteration cost, split by DMA engine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TileCost {
    pub load: [u64; 3],
    pub store: [u64; 3],
    pub compute: u64,
    pub transfers: u64,
    pub bytes: [u64; 3],
    /// Indexed like [`Compiled::tensors`].
    pub tensor_bytes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compiled {
    pub group: String,
    /// Ordered by representative id.
    pub classes: Vec<Class>,
    pub class_of: BTreeMap<VarId, usize>,
    pub links: Vec<Option<Link>>,
    /// Dependent classes in resolution order.
    pub resolve_order: Vec<usize>,
    /// Free classes, outermost loop first.
    pub loops: Vec<usize>,
    pub hard: Vec<Check>,
    pub soft: Vec<(Constraint, Check)>,
    pub tensors: Vec<TensorUse>,
    pub nodes: Vec<NodeUse>,
    pub full: Vec<u64>,
    pub var_labels: BTreeMap<VarId, String>,
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
        }
        self.0[x]
    }
}

impl Compiled {
    pub fn new(problem: &BoundProblem) -> Result<Self, SolveError> {
        let group = problem.group.name();
        let reps: Vec<VarId> = problem.vars.iter().map(|v| v.id).collect();
        let idx: BTreeMap<VarId, usize> = reps.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut dsu = Dsu((0..reps.len()).collect());
        for c in &problem.constraints.constraints {
            if let (true, ConstraintKind::Equal(a, b)) = (c.is_hard(), c.kind) {
                let (ra, rb) = (dsu.find(idx[&a]), dsu.find(idx[&b]));
                let (lo, hi) = (ra.min(rb), ra.max(rb));
                dsu.0[hi] = lo;
            }
        }
        let mut class_index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut classes: Vec<Class> = Vec::new();
        let mut rep_class = vec![0; reps.len()];
        for i in 0..reps.len() {
            let root = dsu.find(i);
            let ci = *class_index.entry(root).or_insert_with(|| {
                let v = &problem.vars[root];
                classes.push(Class {
                    rep: v.id,
                    full: v.full_extent,
                    label: v.label(),
                    members: Vec::new(),
                });
                classes.len() - 1
            });
            if classes[ci].full != problem.vars[i].full_extent {
                return Err(SolveError::Malformed {
                    group,
                    reason: format!("{} and {} are equal but have different extents", classes[ci].label, problem.vars[i].label()),
                });
            }
            rep_class[i] = ci;
        }
        let class_of: BTreeMap<VarId, usize> = problem
            .representative
            .iter()
            .map(|(&v, r)| (v, rep_class[idx[r]]))
            .collect();
        for (&v, &c) in &class_of {
            classes[c].members.push(v);
        }
        let cls = |v: VarId| class_of[&v];

        let mut links: Vec<Option<Link>> = vec![None; classes.len()];
        let mut hard = Vec::new();
        let mut soft = Vec::new();
        for c in &problem.constraints.constraints {
            let check = match c.kind {
                ConstraintKind::Geometric(l) => {
                    let (input, from) = (cls(l.input), cls(l.output));
                    let link = Link {
                        from,
                        scale: l.scale,
                        offset: l.offset,
                    };
                    if input == from || links[input].is_some_and(|old| old != link) {
                        return Err(SolveError::Malformed {
                            group,
                            reason: format!("conflicting affine links into {}", classes[input].label),
                        });
                    }
                    links[input] = Some(link);
                    Check::Link { input, link }
                }
                ConstraintKind::Equal(a, b) => Check::Equal(cls(a), cls(b)),
                ConstraintKind::Fixed(v, x) => Check::Fixed(cls(v), x),
                ConstraintKind::MultipleOf(v, k) => Check::Multiple(cls(v), k),
                ConstraintKind::MinValue(v, k) => Check::Min(cls(v), k),
            };
            if c.is_hard() {
                hard.push(check);
            } else {
                soft.push((*c, check));
            }
        }

        let loops: Vec<usize> = (0..classes.len()).filter(|&c| links[c].is_none()).collect();
        let mut resolved = vec![false; classes.len()];
        for &l in &loops {
            resolved[l] = true;
        }
        let mut resolve_order = Vec::new();
        loop {
            let ready: Vec<usize> = (0..classes.len())
                .filter(|&c| !resolved[c] && links[c].is_some_and(|l| resolved[l.from]))
                .collect();
            if ready.is_empty() {
                break;
            }
            for c in ready {
                resolved[c] = true;
                resolve_order.push(c);
            }
        }
        if let Some(c) = resolved.iter().position(|r| !r) {
            return Err(SolveError::Malformed {
                group,
                reason: format!("cyclic affine links through {}", classes[c].label),
            });
        }

        let var_class = |set: usize, slot: Slot, axis: usize| -> usize {
            let v = problem.member_sets[set]
                .vars
                .iter()
                .find(|v| v.slot == slot && v.axis_index == axis)
                .expect("attributed");
            cls(v.id)
        };
        let produced: Vec<&String> = problem.nodes.iter().flat_map(|n| &n.outputs).collect();
        let mut tensors: Vec<TensorUse> = Vec::new();
        let mut nodes = Vec::new();
        for (si, node) in problem.nodes.iter().enumerate() {
            let slots = node
                .inputs
                .iter()
                .enumerate()
                .map(|(i, t)| (Slot::Input(i), t))
                .chain(node.outputs.iter().enumerate().map(|(i, t)| (Slot::Output(i), t)));
            for (slot, t) in slots {
                // First touch decides the tile shape of a tensor.
                if tensors.iter().any(|u| u.name == *t) {
                    continue;
                }
                let vars: Vec<_> = problem.member_sets[si].vars.iter().filter(|v| v.slot == slot).collect();
                let elem_bytes = tensor_elem_bytes(problem, node, t);
                let role = if problem.internal_tensors.contains(t) {
                    TensorRole::Internal
                } else if produced.contains(&t) {
                    TensorRole::Store
                } else {
                    TensorRole::Load
                };
                tensors.push(TensorUse {
                    name: t.clone(),
                    elem_bytes,
                    role,
                    axes: (0..vars.len()).map(|a| var_class(si, slot, a)).collect(),
                    full: vars.iter().map(|v| v.full_extent).collect(),
                });
            }
            let (o, i0) = (Slot::Output(0), Slot::Input(0));
            let shape = match node.kind {
                OpKind::Gemm { .. } => WorkShape::Gemm {
                    m: var_class(si, o, 0),
                    n: var_class(si, o, 1),
                    k: var_class(si, i0, 1),
                },
                OpKind::Unary { .. } | OpKind::Add => {
                    let rank = problem.member_sets[si].vars.iter().filter(|v| v.slot == o).count();
                    WorkShape::Eltwise {
                        out: (0..rank).map(|a| var_class(si, o, a)).collect(),
                    }
                }
                OpKind::Conv2D { kernel_h, kernel_w, .. } => WorkShape::Conv {
                    f: var_class(si, o, 0),
                    h: var_class(si, o, 1),
                    w: var_class(si, o, 2),
                    c: var_class(si, i0, 0),
                    kh: kernel_h,
                    kw: kernel_w,
                },
            };
            nodes.push(NodeUse {
                name: node.name.clone(),
                engine: problem.engines.engine_for(node.kind.category()),
                kind: node.kind,
                shape,
            });
        }
        let full = classes.iter().map(|c| c.full).collect();
        Ok(Self {
            group,
            classes,
            class_of,
            links,
            resolve_order,
            loops,
            hard,
            soft,
            tensors,
            nodes,
            full,
            var_labels: problem.all_vars().map(|v| (v.id, v.label())).collect(),
        })
    }

    /// Class extents given (possibly clamped) loop extents.
    pub fn class_extents(&self, loop_ext: &[u64]) -> Vec<u64> {
        let mut ext = vec![0; self.classes.len()];
        for (&c, &e) in self.loops.iter().zip(loop_ext) {
            ext[c] = e;
        }
        for &c in &self.resolve_order {
            let l = self.links[c].expect("dependent");
            ext[c] = l.eval(ext[l.from]).min(self.full[c]);
        }
        ext
    }

    /// Class origins given loop origins; an affine input starts at
    /// `scale · output origin`.
    pub fn class_origins(&self, loop_origin: &[u64]) -> Vec<u64> {
        let mut org = vec![0; self.classes.len()];
        for (&c, &o) in self.loops.iter().zip(loop_origin) {
            org[c] = o;
        }
        for &c in &self.resolve_order {
            let l = self.links[c].expect("dependent");
            org[c] = l.scale * org[l.from];
        }
        org
    }

    /// Priorities of soft constraints, ascending and unique.
    pub fn priorities(&self) -> Vec<u32> {
        let mut p: Vec<u32> = self.soft.iter().filter_map(|(c, _)| c.priority()).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    /// Soft constraints kept when dropping every priority `<= dropped`.
    pub fn kept_soft(&self, dropped: Option<u32>) -> impl Iterator<Item = &(Constraint, Check)> {
        self.soft
            .iter()
            .filter(move |(c, _)| dropped.is_none_or(|d| c.priority().is_some_and(|p| p > d)))
    }

    pub fn satisfies(&self, ext: &[u64], dropped: Option<u32>) -> bool {
        self.hard.iter().all(|c| c.holds(ext, &self.full))
            && self.kept_soft(dropped).all(|(_, c)| c.holds(ext, &self.full))
    }

    /// Candidate lattice of each loop class: divisors of the full extent,
    /// multiples of every divisibility factor on the class, and the full
    /// extent. A fixed class has only its pinned value.
    pub fn lattice(&self) -> Vec<Vec<u64>> {
        self.loops
            .iter()
            .map(|&c| {
                let full = self.full[c];
                let checks = self.hard.iter().chain(self.soft.iter().map(|(_, ch)| ch));
                let mut fixed = None;
                let mut factors = Vec::new();
                for ch in checks {
                    match *ch {
                        Check::Fixed(cc, x) if cc == c => fixed = Some(x),
                        Check::Multiple(cc, k) if cc == c => factors.push(k),
                        _ => {}
                    }
                }
                if let Some(x) = fixed {
                    return if (1..=full).contains(&x) { vec![x] } else { Vec::new() };
                }
                let mut cand = divisors(full);
                for k in factors {
                    cand.extend((1..=full / k).map(|j| j * k));
                }
                cand.push(full);
                cand.sort_unstable();
                cand.dedup();
                cand
            })
            .collect()
    }

    /// Lattice filtered by the single-class constraints that apply at a
    /// relaxation level.
    pub fn filtered_lattice(&self, dropped: Option<u32>) -> Vec<Vec<u64>> {
        let unary: Vec<Check> = self
            .hard
            .iter()
            .copied()
            .chain(self.kept_soft(dropped).map(|(_, c)| *c))
            .filter(|c| c.unary_class().is_some())
            .collect();
        self.lattice()
            .into_iter()
            .zip(&self.loops)
            .map(|(cands, &c)| {
                cands
                    .into_iter()
                    .filter(|&e| {
                        unary.iter().filter(|ch| ch.unary_class() == Some(c)).all(|ch| {
                            let mut ext = vec![1; self.classes.len()];
                            ext[c] = e;
                            ch.holds(&ext, &self.full)
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// L1 bytes needed with every operand double buffered except internal
    /// tensors.
    pub fn footprint(&self, ext: &[u64]) -> u64 {
        self.tensors
            .iter()
            .map(|t| t.tile_bytes(ext) * if t.role == TensorRole::Internal { 1 } else { 2 })
            .sum()
    }

    pub fn tile_cost(
        &self,
        ext: &[u64],
        placement: &BTreeMap<String, Level>,
        hw: &HardwareConfig,
    ) -> Result<TileCost, SolveError> {
        let mut cost = TileCost {
            tensor_bytes: vec![0; self.tensors.len()],
            ..TileCost::default()
        };
        for node in &self.nodes {
            cost.compute += kernel_cost(&node.work(ext), node.engine, hw).map_err(|e| SolveError::Hardware {
                group: self.group.clone(),
                source: e,
            })?;
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.role == TensorRole::Internal {
                continue;
            }
            let level = placement.get(&t.name).copied().unwrap_or(Level::L3);
            let Some(pair) = LevelPair::to_l1(level) else { continue };
            let tile = t.tile(ext);
            let bytes = t.tile_bytes(ext);
            let c = dma_cost(
                hw,
                &TransferShape {
                    bytes,
                    dims: transfer_dims(&tile, &t.full),
                    pair,
                },
            );
            let p = pair.index();
            match t.role {
                TensorRole::Load => cost.load[p] += c,
                _ => cost.store[p] += c,
            }
            cost.transfers += 1;
            cost.bytes[p] += bytes;
            cost.tensor_bytes[i] += bytes;
        }
        Ok(cost)
    }

    /// `(num_tiles, last_tile_extent)` along a loop class.
    pub fn grid(&self, loop_pos: usize, extent: u64) -> (u64, u64) {
        let full = self.full[self.loops[loop_pos]];
        let n = full.div_ceil(extent);
        (n, full - (n - 1) * extent)
    }
}

fn tensor_elem_bytes(problem: &BoundProblem, node: &OperatorNode, tensor: &str) -> u64 {
    problem
        .elem_bytes
        .get(tensor)
        .copied()
        .unwrap_or_else(|| panic!("tensor {tensor} of {} missing from problem", node.name))
}

pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}
