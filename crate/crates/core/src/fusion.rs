//! Fusion group selection and shared-dimension binding.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::constraints::{
    build_constraint_set, Constraint, ConstraintError, ConstraintSet, DimVar, KernelTable, Slot, VarId, VarIdGen,
};
use crate::graph::{NetworkGraph, OperatorNode, TensorKind};
use crate::hw::{EngineSelection, HardwareConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FusionError {
    #[error("unknown node `{0}` in fusion chain")]
    UnknownNode(String),
    #[error("empty fusion chain")]
    EmptyChain,
    #[error("node `{0}` appears in more than one fusion group")]
    DuplicateMembership(String),
    #[error("`{consumer}` does not consume the output of `{producer}`; fused nodes must be consecutive")]
    NotConsecutive { producer: String, consumer: String },
    #[error("tensor `{tensor}` has {consumers} consumers and cannot be fused through")]
    MultiConsumer { tensor: String, consumers: usize },
    #[error("tensor `{0}` is a graph output and cannot be kept internal to a group")]
    GraphOutput(String),
    #[error("fusion groups depend on each other cyclically (involving `{0}`)")]
    CyclicGroups(String),
    #[error("shared tensor `{tensor}`: producer has {producer} axes, consumer has {consumer}")]
    AxisCountMismatch {
        tensor: String,
        producer: usize,
        consumer: usize,
    },
    #[error("constraint sets do not match group `{0}`")]
    SetMismatch(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FusionPolicy {
    #[default]
    Auto,
    None,
    /// Node-name chains; nodes not listed run unfused.
    Explicit(Vec<Vec<String>>),
}

impl FusionPolicy {
    /// `auto`, `none`, or chains like `a,b;c,d`.
    pub fn parse(text: &str) -> Self {
        match text.trim() {
            "auto" => FusionPolicy::Auto,
            "none" => FusionPolicy::None,
            chains => FusionPolicy::Explicit(
                chains
                    .split(';')
                    .map(|c| c.split(',').map(|n| n.trim().to_string()).filter(|n| !n.is_empty()).collect())
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SharedTensor {
    pub tensor: String,
    pub producer_output: usize,
    pub consumer_input: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct FusionGroup {
    pub nodes: Vec<String>,
    /// `shared[i]` links `nodes[i]` to `nodes[i + 1]`.
    pub shared: Vec<SharedTensor>,
}

impl FusionGroup {
    pub fn singleton(node: impl Into<String>) -> Self {
        Self {
            nodes: vec![node.into()],
            shared: Vec::new(),
        }
    }

    pub fn name(&self) -> String {
        self.nodes.join("+")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_fused(&self) -> bool {
        self.nodes.len() > 1
    }

    /// Splits between `nodes[pair]` and `nodes[pair + 1]`.
    pub fn split_at(&self, pair: usize) -> (FusionGroup, FusionGroup) {
        let left = FusionGroup {
            nodes: self.nodes[..=pair].to_vec(),
            shared: self.shared[..pair].to_vec(),
        };
        let right = FusionGroup {
            nodes: self.nodes[pair + 1..].to_vec(),
            shared: self.shared[pair + 1..].to_vec(),
        };
        (left, right)
    }
}

/// Shared tensor between two nodes if `consumer` may be fused after `producer`.
fn fusable_edge(graph: &NetworkGraph, producer: &OperatorNode, consumer: &OperatorNode) -> Result<SharedTensor, FusionError> {
    let not_consecutive = || FusionError::NotConsecutive {
        producer: producer.name.clone(),
        consumer: consumer.name.clone(),
    };
    let (producer_output, tensor) = producer
        .outputs
        .iter()
        .enumerate()
        .find(|(_, t)| consumer.inputs.contains(t))
        .ok_or_else(not_consecutive)?;
    let spec = graph.tensor(tensor).expect("validated graph");
    if spec.kind == TensorKind::Output {
        return Err(FusionError::GraphOutput(tensor.clone()));
    }
    let consumers = graph.consumers(tensor).len();
    if consumers != 1 {
        return Err(FusionError::MultiConsumer {
            tensor: tensor.clone(),
            consumers,
        });
    }
    let consumer_input = consumer.inputs.iter().position(|t| t == tensor).expect("found above");
    Ok(SharedTensor {
        tensor: tensor.clone(),
        producer_output,
        consumer_input,
    })
}

fn chain(graph: &NetworkGraph, names: &[String]) -> Result<FusionGroup, FusionError> {
    let mut shared = Vec::new();
    for pair in names.windows(2) {
        let p = graph.node(&pair[0]).ok_or_else(|| FusionError::UnknownNode(pair[0].clone()))?;
        let c = graph.node(&pair[1]).ok_or_else(|| FusionError::UnknownNode(pair[1].clone()))?;
        shared.push(fusable_edge(graph, p, c)?);
    }
    Ok(FusionGroup {
        nodes: names.to_vec(),
        shared,
    })
}

/// Orders groups so every group runs after the producers of its inputs.
/// Ties go to the group whose first node comes earliest.
fn order_groups(graph: &NetworkGraph, groups: Vec<FusionGroup>) -> Result<Vec<FusionGroup>, FusionError> {
    let group_of: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| grp.nodes.iter().map(move |n| (n.as_str(), g)))
        .collect();
    let first = |g: &FusionGroup| graph.node_index(&g.nodes[0]).expect("validated");
    let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); groups.len()];
    for (g, grp) in groups.iter().enumerate() {
        for n in &grp.nodes {
            for t in &graph.node(n).expect("validated").inputs {
                if let Some(p) = graph.producer(t) {
                    let pg = group_of[p.name.as_str()];
                    if pg != g {
                        deps[g].insert(pg);
                    }
                }
            }
        }
    }
    let mut done = vec![false; groups.len()];
    let mut order = Vec::with_capacity(groups.len());
    while order.len() < groups.len() {
        let next = (0..groups.len())
            .filter(|&g| !done[g] && deps[g].iter().all(|&d| done[d]))
            .min_by_key(|&g| first(&groups[g]));
        match next {
            Some(g) => {
                done[g] = true;
                order.push(g);
            }
            None => {
                let stuck = (0..groups.len()).find(|&g| !done[g]).expect("some left");
                return Err(FusionError::CyclicGroups(groups[stuck].name()));
            }
        }
    }
    let mut slots: Vec<Option<FusionGroup>> = groups.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|g| slots[g].take().expect("once")).collect())
}

/// Partitions the graph into fusion groups, in execution order.
pub fn select_fusion_groups(graph: &NetworkGraph, policy: &FusionPolicy) -> Result<Vec<FusionGroup>, FusionError> {
    let nodes = graph.nodes();
    let groups = match policy {
        FusionPolicy::None => nodes.iter().map(|n| FusionGroup::singleton(&n.name)).collect(),
        FusionPolicy::Auto => {
            // Greedy chains from the earliest unassigned node. A consumer is
            // only appended when its other inputs come from sources or from
            // already assigned nodes, so each group depends only on groups
            // started before it.
            let mut assigned = vec![false; nodes.len()];
            let mut groups = Vec::new();
            for start in 0..nodes.len() {
                if assigned[start] {
                    continue;
                }
                assigned[start] = true;
                let mut members = vec![start];
                let mut group = FusionGroup::singleton(&nodes[start].name);
                loop {
                    let cur = &nodes[*members.last().expect("non-empty")];
                    let Some(t) = cur.outputs.first() else { break };
                    let consumers = graph.consumers(t);
                    let [next] = consumers.as_slice() else { break };
                    let ni = graph.node_index(&next.name).expect("validated");
                    if assigned[ni] {
                        break;
                    }
                    let Ok(edge) = fusable_edge(graph, cur, next) else { break };
                    let others_ready = next.inputs.iter().filter(|i| *i != t).all(|i| match graph.producer(i) {
                        None => true,
                        Some(p) => assigned[graph.node_index(&p.name).expect("validated")],
                    });
                    if !others_ready {
                        break;
                    }
                    assigned[ni] = true;
                    members.push(ni);
                    group.nodes.push(next.name.clone());
                    group.shared.push(edge);
                }
                groups.push(group);
            }
            groups
        }
        FusionPolicy::Explicit(chains) => {
            let mut seen = BTreeSet::new();
            let mut groups = Vec::new();
            for names in chains {
                if names.is_empty() {
                    return Err(FusionError::EmptyChain);
                }
                for n in names {
                    if graph.node(n).is_none() {
                        return Err(FusionError::UnknownNode(n.clone()));
                    }
                    if !seen.insert(n.clone()) {
                        return Err(FusionError::DuplicateMembership(n.clone()));
                    }
                }
                groups.push(chain(graph, names)?);
            }
            for n in nodes {
                if !seen.contains(&n.name) {
                    groups.push(FusionGroup::singleton(&n.name));
                }
            }
            groups
        }
    };
    order_groups(graph, groups)
}

/// A fusion group's constraint problem after unifying shared-tensor axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoundProblem {
    pub group: FusionGroup,
    pub nodes: Vec<OperatorNode>,
    /// Per-node constraint sets as emitted, in group order.
    pub member_sets: Vec<ConstraintSet>,
    /// Representative variable of each equivalence class.
    pub vars: Vec<DimVar>,
    /// Every member variable to its representative.
    pub representative: BTreeMap<VarId, VarId>,
    /// Merged constraints over representatives.
    pub constraints: ConstraintSet,
    pub internal_tensors: BTreeSet<String>,
    pub bindings: Vec<(VarId, VarId)>,
    pub engines: EngineSelection,
    /// Element size of every tensor a member touches.
    pub elem_bytes: BTreeMap<String, u64>,
}

struct UnionFind(BTreeMap<VarId, VarId>);

impl UnionFind {
    fn find(&mut self, v: VarId) -> VarId {
        let p = *self.0.get(&v).unwrap_or(&v);
        if p == v {
            return v;
        }
        let root = self.find(p);
        self.0.insert(v, root);
        root
    }

    fn union(&mut self, a: VarId, b: VarId) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smallest id represents the class.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        if lo != hi {
            self.0.insert(hi, lo);
        }
    }
}

impl BoundProblem {
    /// Unfused problem: one node, no bindings.
    pub fn single(node: OperatorNode, set: ConstraintSet, graph: &NetworkGraph, engines: EngineSelection) -> Self {
        let elem_bytes = node
            .inputs
            .iter()
            .chain(&node.outputs)
            .map(|t| (t.clone(), graph.tensor(t).expect("validated graph").elem_bytes))
            .collect();
        let group = FusionGroup::singleton(&node.name);
        Self::assemble(group, vec![node], vec![set], Vec::new(), BTreeSet::new(), engines, elem_bytes)
    }

    fn assemble(
        group: FusionGroup,
        nodes: Vec<OperatorNode>,
        member_sets: Vec<ConstraintSet>,
        bindings: Vec<(VarId, VarId)>,
        internal_tensors: BTreeSet<String>,
        engines: EngineSelection,
        elem_bytes: BTreeMap<String, u64>,
    ) -> Self {
        let mut uf = UnionFind(BTreeMap::new());
        for &(a, b) in &bindings {
            uf.union(a, b);
        }
        let all: Vec<&DimVar> = member_sets.iter().flat_map(|s| &s.vars).collect();
        let representative: BTreeMap<VarId, VarId> = all.iter().map(|v| (v.id, uf.find(v.id))).collect();
        let vars: Vec<DimVar> = all
            .iter()
            .filter(|v| representative[&v.id] == v.id)
            .map(|v| (*v).clone())
            .collect();
        let constraints: Vec<Constraint> = member_sets
            .iter()
            .flat_map(|s| &s.constraints)
            .map(|c| c.map_vars(|id| representative[&id]))
            .collect();
        let constraints = ConstraintSet {
            owner: group.name(),
            vars: vars.clone(),
            constraints,
        };
        Self {
            group,
            nodes,
            member_sets,
            vars,
            representative,
            constraints,
            internal_tensors,
            bindings,
            engines,
            elem_bytes,
        }
    }

    pub fn all_vars(&self) -> impl Iterator<Item = &DimVar> {
        self.member_sets.iter().flat_map(|s| &s.vars)
    }

    pub fn repr(&self, id: VarId) -> VarId {
        self.representative[&id]
    }

    /// Equivalence classes with more than one member, keyed by representative.
    pub fn classes(&self) -> BTreeMap<VarId, Vec<VarId>> {
        let mut out: BTreeMap<VarId, Vec<VarId>> = BTreeMap::new();
        for (&v, &r) in &self.representative {
            out.entry(r).or_default().push(v);
        }
        out
    }
}

/// Appends `right` after `left`, unifying the producer-output and
/// consumer-input variables of `shared` axis by axis.
pub fn bind_pair(left: BoundProblem, right: BoundProblem, shared: SharedTensor) -> Result<BoundProblem, FusionError> {
    let producer_set = left.member_sets.last().ok_or_else(|| FusionError::SetMismatch(left.group.name()))?;
    let consumer_set = right.member_sets.first().ok_or_else(|| FusionError::SetMismatch(right.group.name()))?;
    let axes_of = |set: &ConstraintSet, slot: Slot| -> Vec<VarId> {
        let mut v: Vec<&DimVar> = set.vars.iter().filter(|v| v.slot == slot).collect();
        v.sort_by_key(|v| v.axis_index);
        v.into_iter().map(|v| v.id).collect()
    };
    let produced = axes_of(producer_set, Slot::Output(shared.producer_output));
    let consumer_node = &right.nodes[0];
    let mut bindings = left.bindings.clone();
    bindings.extend(right.bindings.iter().copied());
    for (i, t) in consumer_node.inputs.iter().enumerate() {
        if *t != shared.tensor {
            continue;
        }
        let consumed = axes_of(consumer_set, Slot::Input(i));
        if consumed.len() != produced.len() {
            return Err(FusionError::AxisCountMismatch {
                tensor: shared.tensor.clone(),
                producer: produced.len(),
                consumer: consumed.len(),
            });
        }
        bindings.extend(produced.iter().copied().zip(consumed));
    }
    let mut group = left.group.clone();
    group.nodes.extend(right.group.nodes.iter().cloned());
    group.shared.push(shared.clone());
    group.shared.extend(right.group.shared.iter().cloned());
    let mut internal = left.internal_tensors.clone();
    internal.extend(right.internal_tensors.iter().cloned());
    internal.insert(shared.tensor);
    let mut nodes = left.nodes;
    nodes.extend(right.nodes);
    let mut sets = left.member_sets;
    sets.extend(right.member_sets);
    let mut elem_bytes = left.elem_bytes;
    elem_bytes.extend(right.elem_bytes);
    Ok(BoundProblem::assemble(group, nodes, sets, bindings, internal, left.engines, elem_bytes))
}

/// Folds [`bind_pair`] over the group's member sets, left to right.
pub fn bind_shared_dims(
    group: &FusionGroup,
    graph: &NetworkGraph,
    sets: Vec<ConstraintSet>,
    engines: EngineSelection,
) -> Result<BoundProblem, FusionError> {
    if sets.len() != group.nodes.len() || sets.iter().zip(&group.nodes).any(|(s, n)| s.owner != *n) {
        return Err(FusionError::SetMismatch(group.name()));
    }
    let mut parts = group.nodes.iter().zip(sets).map(|(n, set)| {
        let node = graph.node(n).cloned().ok_or_else(|| FusionError::UnknownNode(n.clone()))?;
        Ok::<_, FusionError>(BoundProblem::single(node, set, graph, engines))
    });
    let mut acc = parts.next().ok_or(FusionError::EmptyChain)??;
    for (part, shared) in parts.zip(&group.shared) {
        acc = bind_pair(acc, part?, shared.clone())?;
    }
    Ok(acc)
}

/// Emits every member's constraints and binds them.
pub fn build_problem(
    group: &FusionGroup,
    graph: &NetworkGraph,
    hw: &HardwareConfig,
    kernels: &KernelTable,
    engines: EngineSelection,
) -> Result<BoundProblem, FusionError> {
    let mut ids = VarIdGen::new();
    let mut sets = Vec::with_capacity(group.len());
    for n in &group.nodes {
        let node = graph.node(n).ok_or_else(|| FusionError::UnknownNode(n.clone()))?;
        sets.push(build_constraint_set(node, graph, hw, kernels, engines, &mut ids)?);
    }
    bind_shared_dims(group, graph, sets, engines)
}
