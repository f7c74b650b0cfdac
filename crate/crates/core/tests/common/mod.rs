#![allow(dead_code)]

use std::fmt::Write as _;

use ftl::graph::{parse_network, NetworkGraph};
use ftl::hw::{EngineSelection, HardwareConfig};
use proptest::prelude::*;

pub const VIT_MLP: &str = include_str!("../../../../models/vit_mlp.net");
pub const SIRACUSA: &str = include_str!("../../../../hw/siracusa_like.hw");

pub fn vit() -> NetworkGraph {
    parse_network(VIT_MLP).unwrap()
}

pub struct Net(String);

impl Net {
    pub fn new() -> Self {
        Net("version = 1\n".into())
    }

    pub fn source(mut self, name: &str, axes: &[(&str, u64)], kind: &str) -> Self {
        let axes: Vec<String> = axes.iter().map(|(a, e)| format!("[\"{a}\", {e}]")).collect();
        let _ = writeln!(
            self.0,
            "[[tensors]]\nname = \"{name}\"\naxes = [{}]\nkind = \"{kind}\"",
            axes.join(", ")
        );
        self
    }

    pub fn produced(mut self, name: &str, axes: &[&str], kind: &str) -> Self {
        let axes: Vec<String> = axes.iter().map(|a| format!("\"{a}\"")).collect();
        let _ = writeln!(
            self.0,
            "[[tensors]]\nname = \"{name}\"\naxes = [{}]\nkind = \"{kind}\"",
            axes.join(", ")
        );
        self
    }

    pub fn node(mut self, name: &str, kind: &str, inputs: &[&str], output: &str) -> Self {
        let inputs: Vec<String> = inputs.iter().map(|a| format!("\"{a}\"")).collect();
        let _ = writeln!(
            self.0,
            "[[nodes]]\nname = \"{name}\"\nkind = \"{kind}\"\ninputs = [{}]\noutputs = [\"{output}\"]",
            inputs.join(", ")
        );
        self
    }

    pub fn conv(mut self, name: &str, stride: u64, kernel: u64, inputs: &[&str], output: &str) -> Self {
        self = self.node(name, "conv2d", inputs, output);
        let _ = writeln!(self.0, "stride = [{stride}, {stride}]\nkernel = [{kernel}, {kernel}]");
        self
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn build(&self) -> NetworkGraph {
        parse_network(&self.0).unwrap_or_else(|e| panic!("{e}\n{}", self.0))
    }
}

fn kind_of(i: usize, n: usize) -> &'static str {
    if i + 1 == n {
        "output"
    } else {
        "intermediate"
    }
}

/// Gemm followed by elementwise unary ops.
pub fn gemm_chain(m: u64, k: u64, n: u64, tail: &[&str]) -> NetworkGraph {
    let total = 1 + tail.len();
    let mut net = Net::new()
        .source("x", &[("M", m), ("K", k)], "input")
        .source("w", &[("K", k), ("N", n)], "weight")
        .produced("t0", &["M", "N"], kind_of(0, total));
    for i in 1..total {
        net = net.produced(&format!("t{i}"), &["M", "N"], kind_of(i, total));
    }
    net = net.node("n0", "gemm", &["x", "w"], "t0");
    for (i, op) in tail.iter().enumerate() {
        net = net.node(&format!("n{}", i + 1), op, &[&format!("t{i}")], &format!("t{}", i + 1));
    }
    net.build()
}

/// Gemm whose result is added to a second input.
pub fn residual(m: u64, k: u64, n: u64) -> NetworkGraph {
    Net::new()
        .source("x", &[("M", m), ("K", k)], "input")
        .source("w", &[("K", k), ("N", n)], "weight")
        .source("r", &[("M", m), ("N", n)], "input")
        .produced("h", &["M", "N"], "intermediate")
        .produced("y", &["M", "N"], "output")
        .node("fc", "gemm", &["x", "w"], "h")
        .node("res", "add", &["h", "r"], "y")
        .build()
}

/// Conv2D (no padding) optionally followed by unary ops.
pub fn conv_chain(c: u64, h: u64, w: u64, f: u64, kernel: u64, stride: u64, tail: &[&str]) -> NetworkGraph {
    let total = 1 + tail.len();
    let mut net = Net::new()
        .source("x", &[("C", c), ("H", h), ("W", w)], "input")
        .source("k", &[("F", f), ("C", c), ("kh", kernel), ("kw", kernel)], "weight");
    for i in 0..total {
        net = net.produced(&format!("t{i}"), &["F", "H", "W"], kind_of(i, total));
    }
    net = net.conv("n0", stride, kernel, &["x", "k"], "t0");
    for (i, op) in tail.iter().enumerate() {
        net = net.node(&format!("n{}", i + 1), op, &[&format!("t{i}")], &format!("t{}", i + 1));
    }
    net.build()
}

/// Elementwise-only chain over a 2-D tensor.
pub fn eltwise_chain(m: u64, n: u64, ops: &[&str]) -> NetworkGraph {
    let total = ops.len();
    let mut net = Net::new().source("x", &[("M", m), ("N", n)], "input");
    for i in 0..total {
        net = net.produced(&format!("t{i}"), &["M", "N"], kind_of(i, total));
    }
    for (i, op) in ops.iter().enumerate() {
        let input = if i == 0 { "x".to_string() } else { format!("t{}", i - 1) };
        net = net.node(&format!("n{i}"), op, &[&input], &format!("t{i}"));
    }
    net.build()
}

/// Default profile with a shrunken L1 and L2.
pub fn small_hw(l1: u64, l2: u64) -> HardwareConfig {
    let mut hw = HardwareConfig::siracusa_like();
    hw.levels[0].capacity = l1;
    hw.levels[1].capacity = l2;
    hw
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: NetworkGraph,
    pub hw: HardwareConfig,
    pub engines: EngineSelection,
}

fn unary() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("gelu"), Just("relu"), Just("identity")]
}

pub fn graph_strategy() -> impl Strategy<Value = NetworkGraph> {
    let gemm = (1u64..=64, 1u64..=32, 1u64..=64, prop::collection::vec(unary(), 0..=2))
        .prop_map(|(m, k, n, tail)| gemm_chain(m, k, n, &tail));
    let res = (1u64..=64, 1u64..=32, 1u64..=64).prop_map(|(m, k, n)| residual(m, k, n));
    let conv = (1u64..=4, 1u64..=8, prop_oneof![Just(1u64), Just(3)], 1u64..=2, 0u64..=12, 0u64..=12, prop::collection::vec(unary(), 0..=1))
        .prop_map(|(c, f, kernel, stride, dh, dw, tail)| conv_chain(c, kernel + dh, kernel + dw, f, kernel, stride, &tail));
    let elt = (1u64..=64, 1u64..=64, prop::collection::vec(unary(), 1..=3)).prop_map(|(m, n, ops)| eltwise_chain(m, n, &ops));
    prop_oneof![3 => gemm, 1 => res, 2 => conv, 1 => elt]
}

pub fn instance_strategy() -> impl Strategy<Value = Instance> {
    (
        graph_strategy(),
        prop_oneof![Just(256u64), Just(512), Just(1024), Just(4096), Just(16384)],
        prop_oneof![Just(8192u64), Just(65536)],
        prop_oneof![Just(EngineSelection::Cluster), Just(EngineSelection::NpuForGemm)],
        prop_oneof![Just(1u64), Just(4), Just(16)],
    )
        .prop_map(|(graph, l1, l2, engines, min_tile)| {
            let mut hw = small_hw(l1, l2);
            hw.min_tile_elems = min_tile;
            Instance { graph, hw, engines }
        })
}
