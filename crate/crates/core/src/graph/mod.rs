//! Named-axis tensor graphs and the operators the planner understands.
//!
//! A [`NetworkGraph`] is immutable once built: construction validates arity,
//! tensor references, producer uniqueness and shape consistency, and fixes a
//! topological node order.

mod model_file;
mod shape;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model_file::{parse_network, to_model_text, MODEL_FORMAT_VERSION};
pub use shape::{infer_shapes, output_extents};

/// Byte sizes are checked against this bound.
pub const MAX_TENSOR_BYTES: u64 = 1 << 48;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported model format version {0} (expected {MODEL_FORMAT_VERSION})")]
    UnsupportedVersion(i64),
    #[error("node `{node}`: unknown operator kind `{kind}`")]
    UnknownOperator { node: String, kind: String },
    #[error("node `{node}`: reference to undeclared tensor `{tensor}`")]
    DanglingTensor { node: String, tensor: String },
    #[error("tensor `{0}` declared more than once")]
    DuplicateTensor(String),
    #[error("node `{0}` declared more than once")]
    DuplicateNode(String),
    #[error("node `{node}`: {kind} expects {expected} {what}, found {found}")]
    Arity {
        node: String,
        kind: String,
        what: &'static str,
        expected: String,
        found: usize,
    },
    #[error("node `{node}`: shape mismatch on axis {axis} ({expected} ≠ {found})")]
    ShapeMismatch {
        node: String,
        axis: String,
        expected: u64,
        found: u64,
    },
    #[error("node `{node}`: tensor `{tensor}` has rank {found}, expected {expected}")]
    RankMismatch {
        node: String,
        tensor: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor `{tensor}`: extent of axis `{axis}` is underdetermined")]
    Underdetermined { tensor: String, axis: String },
    #[error("tensor `{0}` is produced by more than one node")]
    MultipleProducers(String),
    #[error("tensor `{0}` is declared {1} but has no producer")]
    NoProducer(String, TensorKind),
    #[error("tensor `{0}` is declared {1} but is produced by node `{2}`")]
    ProducedSource(String, TensorKind, String),
    #[error("graph contains a cycle through node `{0}`")]
    Cycle(String),
    #[error("tensor `{tensor}`: {reason}")]
    InvalidTensor { tensor: String, reason: String },
    #[error("node `{node}`: {reason}")]
    InvalidAttribute { node: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Input,
    Weight,
    Intermediate,
    Output,
}

impl TensorKind {
    /// Inputs and weights exist before execution starts.
    pub fn is_source(self) -> bool {
        matches!(self, TensorKind::Input | TensorKind::Weight)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Input => "input",
            TensorKind::Weight => "weight",
            TensorKind::Intermediate => "intermediate",
            TensorKind::Output => "output",
        }
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Axis {
    pub name: String,
    pub extent: u64,
}

impl Axis {
    pub fn new(name: impl Into<String>, extent: u64) -> Self {
        Self {
            name: name.into(),
            extent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub axes: Vec<Axis>,
    pub elem_bytes: u64,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn new(
        name: impl Into<String>,
        axes: Vec<Axis>,
        elem_bytes: u64,
        kind: TensorKind,
    ) -> Result<Self, GraphError> {
        let spec = Self {
            name: name.into(),
            axes,
            elem_bytes,
            kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let invalid = |reason: String| GraphError::InvalidTensor {
            tensor: self.name.clone(),
            reason,
        };
        if self.axes.is_empty() {
            return Err(invalid("a tensor needs at least one axis".into()));
        }
        if self.elem_bytes == 0 {
            return Err(invalid("elem_bytes must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for axis in &self.axes {
            if axis.extent == 0 {
                return Err(invalid(format!("axis `{}` has extent 0", axis.name)));
            }
            if !seen.insert(axis.name.as_str()) {
                return Err(invalid(format!("axis name `{}` repeated", axis.name)));
            }
        }
        let mut bytes = self.elem_bytes;
        for axis in &self.axes {
            bytes = bytes
                .checked_mul(axis.extent)
                .filter(|b| *b <= MAX_TENSOR_BYTES)
                .ok_or_else(|| invalid("byte size exceeds 2^48".into()))?;
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn extents(&self) -> Vec<u64> {
        self.axes.iter().map(|a| a.extent).collect()
    }

    pub fn elems(&self) -> u64 {
        self.axes.iter().map(|a| a.extent).product()
    }

    pub fn bytes(&self) -> u64 {
        tensor_bytes(self)
    }
}

/// Product of extents times element size.
pub fn tensor_bytes(spec: &TensorSpec) -> u64 {
    spec.elems() * spec.elem_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryFn {
    Gelu,
    Relu,
    Identity,
}

impl UnaryFn {
    pub fn as_str(self) -> &'static str {
        match self {
            UnaryFn::Gelu => "gelu",
            UnaryFn::Relu => "relu",
            UnaryFn::Identity => "identity",
        }
    }
}

/// Operator kinds. Axis roles are positional: Gemm takes `A: (M, K)`,
/// `B: (K, N)`, optional bias `(N)` and produces `(M, N)`; Conv2D takes
/// `in: (C, H, W)`, `w: (F, C, kh, kw)` and produces `(F, H', W')` with no
/// padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum OpKind {
    Gemm {
        has_bias: bool,
    },
    Unary {
        func: UnaryFn,
    },
    Add,
    Conv2D {
        stride_h: u64,
        stride_w: u64,
        kernel_h: u64,
        kernel_w: u64,
    },
}

/// Coarse operator family used to key kernel descriptors and cost models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpCategory {
    Gemm,
    Eltwise,
    Conv2d,
}

impl OpCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            OpCategory::Gemm => "gemm",
            OpCategory::Eltwise => "eltwise",
            OpCategory::Conv2d => "conv2d",
        }
    }
}

impl fmt::Display for OpCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl OpKind {
    pub fn category(&self) -> OpCategory {
        match self {
            OpKind::Gemm { .. } => OpCategory::Gemm,
            OpKind::Unary { .. } | OpKind::Add => OpCategory::Eltwise,
            OpKind::Conv2D { .. } => OpCategory::Conv2d,
        }
    }

    /// Name used in model files.
    pub fn keyword(&self) -> &'static str {
        match self {
            OpKind::Gemm { .. } => "gemm",
            OpKind::Unary { func } => func.as_str(),
            OpKind::Add => "add",
            OpKind::Conv2D { .. } => "conv2d",
        }
    }

    fn input_arity(&self) -> (usize, usize) {
        match self {
            OpKind::Gemm { .. } => (2, 3),
            OpKind::Unary { .. } => (1, 1),
            OpKind::Add | OpKind::Conv2D { .. } => (2, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperatorNode {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl OperatorNode {
    pub fn new(
        name: impl Into<String>,
        kind: OpKind,
        inputs: &[&str],
        outputs: &[&str],
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn check_arity(&self) -> Result<(), GraphError> {
        let (lo, hi) = self.kind.input_arity();
        if self.inputs.len() < lo || self.inputs.len() > hi {
            return Err(GraphError::Arity {
                node: self.name.clone(),
                kind: self.kind.keyword().into(),
                what: "inputs",
                expected: if lo == hi {
                    lo.to_string()
                } else {
                    format!("{lo} or {hi}")
                },
                found: self.inputs.len(),
            });
        }
        if self.outputs.len() != 1 {
            return Err(GraphError::Arity {
                node: self.name.clone(),
                kind: self.kind.keyword().into(),
                what: "outputs",
                expected: "1".into(),
                found: self.outputs.len(),
            });
        }
        if let OpKind::Gemm { has_bias } = self.kind {
            if has_bias != (self.inputs.len() == 3) {
                return Err(GraphError::InvalidAttribute {
                    node: self.name.clone(),
                    reason: "has_bias must match the presence of a third input".into(),
                });
            }
        }
        if let OpKind::Conv2D {
            stride_h,
            stride_w,
            kernel_h,
            kernel_w,
        } = self.kind
        {
            if stride_h == 0 || stride_w == 0 || kernel_h == 0 || kernel_w == 0 {
                return Err(GraphError::InvalidAttribute {
                    node: self.name.clone(),
                    reason: "stride and kernel sizes must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// Validated, topologically ordered operator graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    tensors: BTreeMap<String, TensorSpec>,
    /// Declaration order, kept for serialization.
    tensor_order: Vec<String>,
    nodes: Vec<OperatorNode>,
    producer: BTreeMap<String, usize>,
    consumers: BTreeMap<String, Vec<usize>>,
}

impl NetworkGraph {
    /// Builds a graph from fully specified tensors. Nodes may be given in any
    /// order; the stored order is topological, ties broken by declaration
    /// order.
    pub fn new(tensors: Vec<TensorSpec>, nodes: Vec<OperatorNode>) -> Result<Self, GraphError> {
        let mut table = BTreeMap::new();
        let mut tensor_order = Vec::with_capacity(tensors.len());
        for t in tensors {
            t.validate()?;
            if table.contains_key(&t.name) {
                return Err(GraphError::DuplicateTensor(t.name));
            }
            tensor_order.push(t.name.clone());
            table.insert(t.name.clone(), t);
        }
        let nodes = topo_sort(&table, nodes)?;
        let (producer, consumers) = index_edges(&nodes);
        for (name, spec) in &table {
            match (spec.kind.is_source(), producer.get(name)) {
                (true, Some(&p)) => {
                    return Err(GraphError::ProducedSource(
                        name.clone(),
                        spec.kind,
                        nodes[p].name.clone(),
                    ))
                }
                (false, None) => return Err(GraphError::NoProducer(name.clone(), spec.kind)),
                _ => {}
            }
        }
        let graph = Self {
            tensors: table,
            tensor_order,
            nodes,
            producer,
            consumers,
        };
        for node in &graph.nodes {
            let inputs: Vec<(&str, Vec<u64>)> = node
                .inputs
                .iter()
                .map(|t| (t.as_str(), graph.tensors[t].extents()))
                .collect();
            let declared = &graph.tensors[node.output()];
            let computed = output_extents(node, &inputs)?;
            check_declared(node, declared, &computed)?;
        }
        Ok(graph)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorSpec> {
        self.tensor_order.iter().map(|n| &self.tensors[n])
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.get(name)
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&OperatorNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn producer(&self, tensor: &str) -> Option<&OperatorNode> {
        self.producer.get(tensor).map(|&i| &self.nodes[i])
    }

    pub fn consumers(&self, tensor: &str) -> Vec<&OperatorNode> {
        self.consumers
            .get(tensor)
            .map(|v| v.iter().map(|&i| &self.nodes[i]).collect())
            .unwrap_or_default()
    }
}

fn check_declared(
    node: &OperatorNode,
    declared: &TensorSpec,
    computed: &[u64],
) -> Result<(), GraphError> {
    if declared.rank() != computed.len() {
        return Err(GraphError::RankMismatch {
            node: node.name.clone(),
            tensor: declared.name.clone(),
            expected: computed.len(),
            found: declared.rank(),
        });
    }
    for (axis, &want) in declared.axes.iter().zip(computed) {
        if axis.extent != want {
            return Err(GraphError::ShapeMismatch {
                node: node.name.clone(),
                axis: format!("{}.{}", declared.name, axis.name),
                expected: want,
                found: axis.extent,
            });
        }
    }
    Ok(())
}

fn index_edges(nodes: &[OperatorNode]) -> (BTreeMap<String, usize>, BTreeMap<String, Vec<usize>>) {
    let mut producer = BTreeMap::new();
    let mut consumers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        for t in &n.outputs {
            producer.insert(t.clone(), i);
        }
        for t in &n.inputs {
            let list = consumers.entry(t.clone()).or_default();
            if list.last() != Some(&i) {
                list.push(i);
            }
        }
    }
    (producer, consumers)
}

/// Kahn's algorithm; among ready nodes the earliest declared goes first.
pub(crate) fn topo_sort<T>(
    tensors: &BTreeMap<String, T>,
    nodes: Vec<OperatorNode>,
) -> Result<Vec<OperatorNode>, GraphError> {
    let mut names = BTreeSet::new();
    let mut producer: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if !names.insert(n.name.as_str()) {
            return Err(GraphError::DuplicateNode(n.name.clone()));
        }
        n.check_arity()?;
        for t in n.inputs.iter().chain(&n.outputs) {
            if !tensors.contains_key(t) {
                return Err(GraphError::DanglingTensor {
                    node: n.name.clone(),
                    tensor: t.clone(),
                });
            }
        }
        for t in &n.outputs {
            if producer.insert(t.as_str(), i).is_some() {
                return Err(GraphError::MultipleProducers(t.clone()));
            }
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        let deps: BTreeSet<usize> = n
            .inputs
            .iter()
            .filter_map(|t| producer.get(t.as_str()).copied())
            .collect();
        for d in deps {
            indegree[i] += 1;
            succ[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| !order.contains(i)).unwrap_or(0);
        return Err(GraphError::Cycle(nodes[stuck].name.clone()));
    }
    let mut slots: Vec<Option<OperatorNode>> = nodes.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}
