use super::{Axis, GraphError, NetworkGraph, OpKind, OperatorNode, TensorSpec};

/// Computes a node's output extents from its input extents, checking that
/// the inputs agree with the operator's axis roles.
///
/// `inputs` pairs each input tensor name with its extents, in node order.
pub fn output_extents(
    node: &OperatorNode,
    inputs: &[(&str, Vec<u64>)],
) -> Result<Vec<u64>, GraphError> {
    let rank = |i: usize, want: usize| -> Result<&[u64], GraphError> {
        let (name, ext) = &inputs[i];
        if ext.len() != want {
            return Err(GraphError::RankMismatch {
                node: node.name.clone(),
                tensor: name.to_string(),
                expected: want,
                found: ext.len(),
            });
        }
        Ok(ext)
    };
    let agree = |axis: &str, expected: u64, found: u64| -> Result<(), GraphError> {
        if expected != found {
            return Err(GraphError::ShapeMismatch {
                node: node.name.clone(),
                axis: axis.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    };
    match node.kind {
        OpKind::Gemm { has_bias } => {
            let a = rank(0, 2)?;
            let b = rank(1, 2)?;
            agree("K", a[1], b[0])?;
            if has_bias {
                let bias = rank(2, 1)?;
                agree("N", b[1], bias[0])?;
            }
            Ok(vec![a[0], b[1]])
        }
        OpKind::Unary { .. } => Ok(inputs[0].1.clone()),
        OpKind::Add => {
            let lhs = &inputs[0].1;
            let rhs = rank(1, lhs.len())?;
            for (i, (&l, &r)) in lhs.iter().zip(rhs).enumerate() {
                agree(&format!("#{i}"), l, r)?;
            }
            Ok(lhs.clone())
        }
        OpKind::Conv2D {
            stride_h,
            stride_w,
            kernel_h,
            kernel_w,
        } => {
            let x = rank(0, 3)?;
            let w = rank(1, 4)?;
            agree("C", x[0], w[1])?;
            agree("kh", kernel_h, w[2])?;
            agree("kw", kernel_w, w[3])?;
            let out = |extent: u64, kernel: u64, stride: u64, axis: &str| {
                if extent < kernel {
                    Err(GraphError::InvalidAttribute {
                        node: node.name.clone(),
                        reason: format!("axis {axis} extent {extent} smaller than kernel {kernel}"),
                    })
                } else {
                    Ok((extent - kernel) / stride + 1)
                }
            };
            Ok(vec![
                w[0],
                out(x[1], kernel_h, stride_h, "H")?,
                out(x[2], kernel_w, stride_w, "W")?,
            ])
        }
    }
}

/// Recomputes every produced tensor's extents from operator semantics.
///
/// On a validated graph this is the identity; it fails if a declared extent
/// disagrees with the computed one.
pub fn infer_shapes(graph: &NetworkGraph) -> Result<NetworkGraph, GraphError> {
    let mut tensors: std::collections::BTreeMap<String, TensorSpec> = graph
        .tensors()
        .map(|t| (t.name.clone(), t.clone()))
        .collect();
    for node in graph.nodes() {
        let inputs: Vec<(&str, Vec<u64>)> = node
            .inputs
            .iter()
            .map(|t| (t.as_str(), tensors[t].extents()))
            .collect();
        let computed = output_extents(node, &inputs)?;
        let out = tensors.get_mut(node.output()).expect("validated graph");
        if out.rank() != computed.len() {
            return Err(GraphError::RankMismatch {
                node: node.name.clone(),
                tensor: out.name.clone(),
                expected: computed.len(),
                found: out.rank(),
            });
        }
        out.axes = out
            .axes
            .iter()
            .zip(&computed)
            .map(|(a, &e)| Axis::new(a.name.clone(), e))
            .collect();
    }
    let ordered = graph
        .tensors()
        .map(|t| tensors.remove(&t.name).expect("same table"))
        .collect();
    NetworkGraph::new(ordered, graph.nodes().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::UnaryFn;

    fn node(kind: OpKind, n_inputs: usize) -> OperatorNode {
        let names = ["a", "b", "c"];
        OperatorNode::new("n", kind, &names[..n_inputs], &["out"])
    }

    #[test]
    fn gemm_shape_rule() {
        let n = node(OpKind::Gemm { has_bias: false }, 2);
        let out = output_extents(&n, &[("a", vec![196, 768]), ("b", vec![768, 3072])]).unwrap();
        assert_eq!(out, [196, 3072]);
    }

    #[test]
    fn gemm_reports_k_mismatch() {
        let n = node(OpKind::Gemm { has_bias: false }, 2);
        let err = output_extents(&n, &[("a", vec![4, 5]), ("b", vec![6, 7])]).unwrap_err();
        assert_eq!(
            err,
            GraphError::ShapeMismatch {
                node: "n".into(),
                axis: "K".into(),
                expected: 5,
                found: 6
            }
        );
    }

    #[test]
    fn elementwise_preserves_shape() {
        let n = node(OpKind::Unary { func: UnaryFn::Gelu }, 1);
        assert_eq!(output_extents(&n, &[("a", vec![196, 3072])]).unwrap(), [196, 3072]);
    }

    #[test]
    fn conv_output_extent_matches_index_arithmetic() {
        // Oracle: count window origins 0, s, 2s, ... whose window fits.
        let oracle = |input: u64, k: u64, s: u64| (0..input).step_by(s as usize).filter(|o| o + k <= input).count() as u64;
        for (input, k, s) in [(9, 3, 2), (10, 3, 2), (8, 1, 1), (7, 7, 3), (16, 3, 1), (11, 2, 4)] {
            let n = node(
                OpKind::Conv2D {
                    stride_h: s,
                    stride_w: 1,
                    kernel_h: k,
                    kernel_w: 1,
                },
                2,
            );
            let out = output_extents(&n, &[("a", vec![2, input, 5]), ("b", vec![3, 2, k, 1])]).unwrap();
            assert_eq!(out[1], oracle(input, k, s), "in={input} k={k} s={s}");
            assert_eq!(out[0], 3);
            assert_eq!(out[2], 5);
            // No-padding regime bounds.
            assert!((out[1] - 1) * s + k <= input && input < out[1] * s + k);
        }
        let n = node(
            OpKind::Conv2D {
                stride_h: 2,
                stride_w: 2,
                kernel_h: 3,
                kernel_w: 3,
            },
            2,
        );
        let out = output_extents(&n, &[("a", vec![4, 9, 9]), ("b", vec![8, 4, 3, 3])]).unwrap();
        assert_eq!(out, [8, 4, 4]);
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let n = node(
            OpKind::Conv2D {
                stride_h: 1,
                stride_w: 1,
                kernel_h: 5,
                kernel_w: 1,
            },
            2,
        );
        assert!(output_extents(&n, &[("a", vec![1, 4, 4]), ("b", vec![1, 1, 5, 1])]).is_err());
    }
}
