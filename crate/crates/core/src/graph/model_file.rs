//! Model file reader and writer.
//!
//! Model files are TOML documents:
//!
//! ```toml
//! version = 1
//!
//! [[tensors]]
//! name = "x"
//! axes = [["M", 196], ["K", 768]]   # [axis name, extent] pairs
//! elem_bytes = 1                    # optional, defaults to 1
//! kind = "input"                    # input | weight | intermediate | output
//!
//! [[tensors]]
//! name = "h"
//! axes = ["M", "N"]                 # produced tensors may omit extents
//! kind = "intermediate"
//!
//! [[nodes]]
//! name = "fc1"
//! kind = "gemm"                     # gemm | gelu | relu | identity | add | conv2d
//! inputs = ["x", "w1"]              # gemm: A, B and an optional bias
//! outputs = ["h"]
//! ```
//!
//! `conv2d` nodes additionally take `stride = [sh, sw]`, `kernel = [kh, kw]`
//! and an optional `pad = "none"`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    output_extents, topo_sort, Axis, GraphError, NetworkGraph, OpKind, OperatorNode, TensorKind,
    TensorSpec, UnaryFn,
};

pub const MODEL_FORMAT_VERSION: i64 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: i64,
    #[serde(default)]
    tensors: Vec<TensorDoc>,
    #[serde(default)]
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    axes: Vec<AxisDoc>,
    #[serde(default = "default_elem_bytes")]
    elem_bytes: u64,
    kind: TensorKind,
}

fn default_elem_bytes() -> u64 {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum AxisDoc {
    Sized(String, u64),
    Named(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    name: String,
    kind: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<String>,
}

struct PartialTensor {
    name: String,
    axes: Vec<(String, Option<u64>)>,
    elem_bytes: u64,
    kind: TensorKind,
}

/// Parses and validates a model file.
pub fn parse_network(text: &str) -> Result<NetworkGraph, GraphError> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| syntax_error(text, &e))?;
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(GraphError::UnsupportedVersion(doc.version));
    }

    let mut order = Vec::with_capacity(doc.tensors.len());
    let mut table: BTreeMap<String, PartialTensor> = BTreeMap::new();
    for t in doc.tensors {
        if table.contains_key(&t.name) {
            return Err(GraphError::DuplicateTensor(t.name));
        }
        let axes = t
            .axes
            .into_iter()
            .map(|a| match a {
                AxisDoc::Sized(n, e) => (n, Some(e)),
                AxisDoc::Named(n) => (n, None),
            })
            .collect();
        order.push(t.name.clone());
        table.insert(
            t.name.clone(),
            PartialTensor {
                name: t.name,
                axes,
                elem_bytes: t.elem_bytes,
                kind: t.kind,
            },
        );
    }

    let nodes = doc
        .nodes
        .into_iter()
        .map(node_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    let nodes = topo_sort(&table, nodes)?;

    for node in &nodes {
        let mut inputs = Vec::with_capacity(node.inputs.len());
        for name in &node.inputs {
            let t = &table[name];
            let mut ext = Vec::with_capacity(t.axes.len());
            for (axis, e) in &t.axes {
                ext.push(e.ok_or_else(|| GraphError::Underdetermined {
                    tensor: t.name.clone(),
                    axis: axis.clone(),
                })?);
            }
            inputs.push((name.as_str(), ext));
        }
        let computed = output_extents(node, &inputs)?;
        let out = table.get_mut(node.output()).expect("checked by topo_sort");
        if out.axes.len() != computed.len() {
            return Err(GraphError::RankMismatch {
                node: node.name.clone(),
                tensor: out.name.clone(),
                expected: computed.len(),
                found: out.axes.len(),
            });
        }
        for ((axis, declared), &want) in out.axes.iter_mut().zip(&computed) {
            match declared {
                Some(d) if *d != want => {
                    return Err(GraphError::ShapeMismatch {
                        node: node.name.clone(),
                        axis: format!("{}.{}", out.name, axis),
                        expected: want,
                        found: *d,
                    })
                }
                Some(_) => {}
                None => *declared = Some(want),
            }
        }
    }

    let produced: std::collections::BTreeSet<&str> =
        nodes.iter().flat_map(|n| n.outputs.iter().map(String::as_str)).collect();
    let mut tensors = Vec::with_capacity(order.len());
    for name in &order {
        let t = &table[name];
        let mut axes = Vec::with_capacity(t.axes.len());
        for (axis, e) in &t.axes {
            match e {
                Some(e) => axes.push(Axis::new(axis.clone(), *e)),
                None if !t.kind.is_source() && !produced.contains(name.as_str()) => {
                    return Err(GraphError::NoProducer(name.clone(), t.kind))
                }
                None => {
                    return Err(GraphError::Underdetermined {
                        tensor: name.clone(),
                        axis: axis.clone(),
                    })
                }
            }
        }
        tensors.push(TensorSpec::new(t.name.clone(), axes, t.elem_bytes, t.kind)?);
    }
    NetworkGraph::new(tensors, nodes)
}

fn node_from_doc(n: NodeDoc) -> Result<OperatorNode, GraphError> {
    let attr_err = |reason: &str| GraphError::InvalidAttribute {
        node: n.name.clone(),
        reason: reason.to_string(),
    };
    let kind = match n.kind.as_str() {
        "gemm" => OpKind::Gemm {
            has_bias: n.inputs.len() == 3,
        },
        "gelu" => OpKind::Unary { func: UnaryFn::Gelu },
        "relu" => OpKind::Unary { func: UnaryFn::Relu },
        "identity" => OpKind::Unary {
            func: UnaryFn::Identity,
        },
        "add" => OpKind::Add,
        "conv2d" => {
            if let Some(pad) = &n.pad {
                if pad != "none" {
                    return Err(attr_err("only pad = \"none\" is supported"));
                }
            }
            let [stride_h, stride_w] = n.stride.unwrap_or([1, 1]);
            let [kernel_h, kernel_w] = n.kernel.ok_or_else(|| attr_err("conv2d requires `kernel`"))?;
            OpKind::Conv2D {
                stride_h,
                stride_w,
                kernel_h,
                kernel_w,
            }
        }
        other => {
            return Err(GraphError::UnknownOperator {
                node: n.name.clone(),
                kind: other.to_string(),
            })
        }
    };
    if !matches!(kind, OpKind::Conv2D { .. }) && (n.stride.is_some() || n.kernel.is_some() || n.pad.is_some()) {
        return Err(attr_err("stride/kernel/pad only apply to conv2d"));
    }
    Ok(OperatorNode {
        name: n.name,
        kind,
        inputs: n.inputs,
        outputs: n.outputs,
    })
}

fn syntax_error(text: &str, err: &toml::de::Error) -> GraphError {
    let offset = err.span().map(|s| s.start).unwrap_or(0).min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    GraphError::Syntax {
        line,
        column,
        message: err.message().trim().to_string(),
    }
}

/// Serializes a graph back to model-file text with every extent written out.
pub fn to_model_text(graph: &NetworkGraph) -> String {
    let doc = ModelDoc {
        version: MODEL_FORMAT_VERSION,
        tensors: graph
            .tensors()
            .map(|t| TensorDoc {
                name: t.name.clone(),
                axes: t
                    .axes
                    .iter()
                    .map(|a| AxisDoc::Sized(a.name.clone(), a.extent))
                    .collect(),
                elem_bytes: t.elem_bytes,
                kind: t.kind,
            })
            .collect(),
        nodes: graph
            .nodes()
            .iter()
            .map(|n| {
                let (stride, kernel) = match n.kind {
                    OpKind::Conv2D {
                        stride_h,
                        stride_w,
                        kernel_h,
                        kernel_w,
                    } => (Some([stride_h, stride_w]), Some([kernel_h, kernel_w])),
                    _ => (None, None),
                };
                NodeDoc {
                    name: n.name.clone(),
                    kind: n.kind.keyword().to_string(),
                    inputs: n.inputs.clone(),
                    outputs: n.outputs.clone(),
                    stride,
                    kernel,
                    pad: None,
                }
            })
            .collect(),
    };
    toml::to_string(&doc).expect("model documents always serialize")
}
