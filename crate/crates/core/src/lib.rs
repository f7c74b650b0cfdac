//! Fused-tiled layer planning for small DNN graphs on a scratchpad memory
//! hierarchy, with a double-buffered schedule simulator.

pub mod constraints;
pub mod fusion;
pub mod graph;
pub mod hw;
pub mod par;
pub mod plan;
pub mod report;
pub mod sim;
pub mod solver;
