//! Memory hierarchy, DMA and kernel cost models.
//!
//! Everything here is loaded from a hardware configuration file (TOML):
//!
//! ```toml
//! version = 1
//! name = "siracusa-like"
//!
//! [cluster]
//! num_cores = 8
//! simd_width = 4
//! min_tile_elems = 64
//!
//! [[levels]]          # exactly one each of L1, L2, L3
//! name = "L1"
//! capacity = 262144   # bytes
//! read_bw = 8         # bytes/cycle toward the adjacent lower level
//! write_bw = 8
//! is_offchip = false
//!
//! [dma.l2_l1]         # also dma.l3_l2 and dma.l3_l1
//! setup_cycles = 100
//! per_dim_overhead = 10
//! bytes_per_cycle = 8
//!
//! [kernels.cluster]   # macs are per core; eltwise costs are per element
//! gemm_macs_per_cycle = 2
//! conv2d_macs_per_cycle = 2
//! gelu_cycles_per_elem = 4.0
//! relu_cycles_per_elem = 1.0
//! identity_cycles_per_elem = 0.5
//! add_cycles_per_elem = 1.0
//!
//! [kernels.npu]       # optional; the NPU never runs elementwise kernels
//! gemm_macs_per_cycle = 256
//! conv2d_macs_per_cycle = 256
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{OpCategory, UnaryFn};

pub const HW_FORMAT_VERSION: i64 = 1;

const SIRACUSA_LIKE: &str = include_str!("../../../hw/siracusa_like.hw");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HwError {
    #[error("hardware config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported hardware config version {0} (expected {HW_FORMAT_VERSION})")]
    UnsupportedVersion(i64),
    #[error("memory level {0} is missing")]
    MissingLevel(Level),
    #[error("memory level {0} declared more than once")]
    DuplicateLevel(Level),
    #[error("capacity ordering violated: need L1 ({l1}) < L2 ({l2}) < L3 ({l3})")]
    CapacityOrdering { l1: u64, l2: u64, l3: u64 },
    #[error("`{0}` must be positive")]
    NonPositive(String),
    #[error("no {kind} kernel for engine {engine}")]
    Unsupported { kind: String, engine: Engine },
    #[error("no DMA model for level pair {0}")]
    UnknownPair(LevelPair),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
        })
    }
}

/// Source/destination pair served by one DMA engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelPair {
    L2L1,
    L3L2,
    L3L1,
}

impl LevelPair {
    pub const ALL: [LevelPair; 3] = [LevelPair::L2L1, LevelPair::L3L2, LevelPair::L3L1];

    pub fn index(self) -> usize {
        match self {
            LevelPair::L2L1 => 0,
            LevelPair::L3L2 => 1,
            LevelPair::L3L1 => 2,
        }
    }

    /// Pair used to move a tile between `level` and L1.
    pub fn to_l1(level: Level) -> Option<LevelPair> {
        match level {
            Level::L1 => None,
            Level::L2 => Some(LevelPair::L2L1),
            Level::L3 => Some(LevelPair::L3L1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LevelPair::L2L1 => "l2_l1",
            LevelPair::L3L2 => "l3_l2",
            LevelPair::L3L1 => "l3_l1",
        }
    }
}

impl fmt::Display for LevelPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Cluster,
    Npu,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Cluster => "cluster",
            Engine::Npu => "npu",
        })
    }
}

/// Which engine runs which operator family. `NpuForGemm` offloads Gemm and
/// Conv2D to the NPU; elementwise kernels always stay on the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineSelection {
    #[default]
    Cluster,
    #[serde(rename = "npu")]
    NpuForGemm,
}

impl EngineSelection {
    pub fn engine_for(self, category: OpCategory) -> Engine {
        match (self, category) {
            (EngineSelection::NpuForGemm, OpCategory::Gemm | OpCategory::Conv2d) => Engine::Npu,
            _ => Engine::Cluster,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EngineSelection::Cluster => "cluster",
            EngineSelection::NpuForGemm => "npu",
        }
    }
}

impl fmt::Display for EngineSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLevel {
    pub name: Level,
    pub capacity: u64,
    pub read_bw: u64,
    pub write_bw: u64,
    pub is_offchip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaModel {
    pub setup_cycles: u64,
    pub per_dim_overhead: u64,
    pub bytes_per_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DmaDoc {
    l2_l1: DmaModel,
    l3_l2: DmaModel,
    l3_l1: DmaModel,
}

/// Elementwise cost in thousandths of a cycle per element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MilliCycles(pub u64);

impl MilliCycles {
    fn from_cycles(field: &str, cycles: f64) -> Result<Self, HwError> {
        let milli = (cycles * 1000.0).round();
        if !(milli >= 1.0 && milli.is_finite()) {
            return Err(HwError::NonPositive(field.to_string()));
        }
        Ok(Self(milli as u64))
    }

    pub fn as_cycles(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterKernels {
    /// Per core.
    pub gemm_macs_per_cycle: u64,
    pub conv2d_macs_per_cycle: u64,
    pub gelu: MilliCycles,
    pub relu: MilliCycles,
    pub identity: MilliCycles,
    pub add: MilliCycles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpuKernels {
    pub gemm_macs_per_cycle: u64,
    pub conv2d_macs_per_cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelModel {
    pub cluster: ClusterKernels,
    pub npu: Option<NpuKernels>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterKernelsDoc {
    gemm_macs_per_cycle: u64,
    conv2d_macs_per_cycle: u64,
    gelu_cycles_per_elem: f64,
    relu_cycles_per_elem: f64,
    identity_cycles_per_elem: f64,
    add_cycles_per_elem: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelsDoc {
    cluster: ClusterKernelsDoc,
    npu: Option<NpuKernels>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    num_cores: u64,
    simd_width: u64,
    min_tile_elems: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HwDoc {
    version: i64,
    #[serde(default)]
    name: Option<String>,
    levels: Vec<MemoryLevel>,
    dma: DmaDoc,
    kernels: KernelsDoc,
    cluster: ClusterDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareConfig {
    pub name: String,
    /// Indexed L1, L2, L3.
    pub levels: [MemoryLevel; 3],
    /// Indexed by [`LevelPair::index`].
    pub dma: [DmaModel; 3],
    pub kernels: KernelModel,
    pub num_cores: u64,
    pub simd_width: u64,
    pub min_tile_elems: u64,
}

/// One DMA command moving a tile between a backing level and L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferShape {
    pub bytes: u64,
    pub dims: u8,
    pub pair: LevelPair,
}

/// Work handed to a kernel for one tile, with clamped extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelWork {
    Gemm { m: u64, n: u64, k: u64 },
    Eltwise { func: EltwiseFn, elems: u64 },
    Conv2D { f: u64, h: u64, w: u64, c: u64, kh: u64, kw: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EltwiseFn {
    Gelu,
    Relu,
    Identity,
    Add,
}

impl From<UnaryFn> for EltwiseFn {
    fn from(f: UnaryFn) -> Self {
        match f {
            UnaryFn::Gelu => EltwiseFn::Gelu,
            UnaryFn::Relu => EltwiseFn::Relu,
            UnaryFn::Identity => EltwiseFn::Identity,
        }
    }
}

impl KernelWork {
    pub fn category(&self) -> OpCategory {
        match self {
            KernelWork::Gemm { .. } => OpCategory::Gemm,
            KernelWork::Eltwise { .. } => OpCategory::Eltwise,
            KernelWork::Conv2D { .. } => OpCategory::Conv2d,
        }
    }
}

impl HardwareConfig {
    pub fn from_toml(text: &str) -> Result<Self, HwError> {
        let doc: HwDoc = toml::from_str(text).map_err(|e| {
            let offset = e.span().map(|s| s.start).unwrap_or(0).min(text.len());
            let before = &text[..offset];
            HwError::Parse {
                line: before.matches('\n').count() + 1,
                column: before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1,
                message: e.message().trim().to_string(),
            }
        })?;
        if doc.version != HW_FORMAT_VERSION {
            return Err(HwError::UnsupportedVersion(doc.version));
        }

        let mut slots: [Option<MemoryLevel>; 3] = [None, None, None];
        for level in doc.levels {
            let i = level.name as usize;
            if slots[i].is_some() {
                return Err(HwError::DuplicateLevel(level.name));
            }
            for (field, v) in [("read_bw", level.read_bw), ("write_bw", level.write_bw), ("capacity", level.capacity)] {
                if v == 0 {
                    return Err(HwError::NonPositive(format!("levels.{}.{field}", level.name)));
                }
            }
            slots[i] = Some(level);
        }
        let [l1, l2, l3] = slots;
        let l1 = l1.ok_or(HwError::MissingLevel(Level::L1))?;
        let l2 = l2.ok_or(HwError::MissingLevel(Level::L2))?;
        let l3 = l3.ok_or(HwError::MissingLevel(Level::L3))?;
        if !(l1.capacity < l2.capacity && l2.capacity < l3.capacity) {
            return Err(HwError::CapacityOrdering {
                l1: l1.capacity,
                l2: l2.capacity,
                l3: l3.capacity,
            });
        }

        let dma = [doc.dma.l2_l1, doc.dma.l3_l2, doc.dma.l3_l1];
        for (pair, model) in LevelPair::ALL.iter().zip(&dma) {
            if model.bytes_per_cycle == 0 {
                return Err(HwError::NonPositive(format!("dma.{pair}.bytes_per_cycle")));
            }
        }

        let c = doc.kernels.cluster;
        let positive = |field: &str, v: u64| {
            if v == 0 {
                Err(HwError::NonPositive(field.to_string()))
            } else {
                Ok(v)
            }
        };
        let cluster = ClusterKernels {
            gemm_macs_per_cycle: positive("kernels.cluster.gemm_macs_per_cycle", c.gemm_macs_per_cycle)?,
            conv2d_macs_per_cycle: positive("kernels.cluster.conv2d_macs_per_cycle", c.conv2d_macs_per_cycle)?,
            gelu: MilliCycles::from_cycles("kernels.cluster.gelu_cycles_per_elem", c.gelu_cycles_per_elem)?,
            relu: MilliCycles::from_cycles("kernels.cluster.relu_cycles_per_elem", c.relu_cycles_per_elem)?,
            identity: MilliCycles::from_cycles(
                "kernels.cluster.identity_cycles_per_elem",
                c.identity_cycles_per_elem,
            )?,
            add: MilliCycles::from_cycles("kernels.cluster.add_cycles_per_elem", c.add_cycles_per_elem)?,
        };
        if let Some(npu) = &doc.kernels.npu {
            positive("kernels.npu.gemm_macs_per_cycle", npu.gemm_macs_per_cycle)?;
            positive("kernels.npu.conv2d_macs_per_cycle", npu.conv2d_macs_per_cycle)?;
        }
        Ok(Self {
            name: doc.name.unwrap_or_else(|| "unnamed".into()),
            levels: [l1, l2, l3],
            dma,
            kernels: KernelModel {
                cluster,
                npu: doc.kernels.npu,
            },
            num_cores: positive("cluster.num_cores", doc.cluster.num_cores)?,
            simd_width: positive("cluster.simd_width", doc.cluster.simd_width)?,
            min_tile_elems: doc.cluster.min_tile_elems,
        })
    }

    /// The shipped `siracusa-like` profile.
    pub fn siracusa_like() -> Self {
        Self::from_toml(SIRACUSA_LIKE).expect("shipped profile is valid")
    }

    pub fn level(&self, level: Level) -> &MemoryLevel {
        &self.levels[level as usize]
    }

    pub fn capacity(&self, level: Level) -> u64 {
        self.level(level).capacity
    }

    pub fn dma_model(&self, pair: LevelPair) -> &DmaModel {
        &self.dma[pair.index()]
    }

}

/// `setup + per_dim_overhead·(dims−1) + ceil(bytes / bytes_per_cycle)`.
pub fn dma_cost(hw: &HardwareConfig, transfer: &TransferShape) -> u64 {
    let model = hw.dma_model(transfer.pair);
    let extra_dims = u64::from(transfer.dims.clamp(1, 3) - 1);
    model.setup_cycles + model.per_dim_overhead * extra_dims + transfer.bytes.div_ceil(model.bytes_per_cycle)
}

/// Analytic kernel runtime for one tile.
///
/// Cluster Gemm/Conv2D split the parallel axis (M, resp. output rows) over
/// the cores, so an uneven split costs `ceil(rows / cores)` row-steps per core.
pub fn kernel_cost(work: &KernelWork, engine: Engine, hw: &HardwareConfig) -> Result<u64, HwError> {
    let unsupported = || HwError::Unsupported {
        kind: work.category().as_str().to_string(),
        engine,
    };
    let k = &hw.kernels;
    let cycles = match (work, engine) {
        (&KernelWork::Gemm { m, n, k: red }, Engine::Cluster) => {
            let rows_per_core = m.div_ceil(hw.num_cores) as u128;
            div_ceil_u128(rows_per_core * n as u128 * red as u128, k.cluster.gemm_macs_per_cycle as u128)
        }
        (&KernelWork::Gemm { m, n, k: red }, Engine::Npu) => {
            let npu = k.npu.as_ref().ok_or_else(unsupported)?;
            div_ceil_u128(m as u128 * n as u128 * red as u128, npu.gemm_macs_per_cycle as u128)
        }
        (&KernelWork::Conv2D { f, h, w, c, kh, kw }, Engine::Cluster) => {
            let rows_per_core = h.div_ceil(hw.num_cores) as u128;
            let macs = rows_per_core * (f * w) as u128 * (c * kh * kw) as u128;
            div_ceil_u128(macs, k.cluster.conv2d_macs_per_cycle as u128)
        }
        (&KernelWork::Conv2D { f, h, w, c, kh, kw }, Engine::Npu) => {
            let npu = k.npu.as_ref().ok_or_else(unsupported)?;
            let macs = (f * h * w) as u128 * (c * kh * kw) as u128;
            div_ceil_u128(macs, npu.conv2d_macs_per_cycle as u128)
        }
        (&KernelWork::Eltwise { func, elems }, Engine::Cluster) => {
            let per = match func {
                EltwiseFn::Gelu => k.cluster.gelu,
                EltwiseFn::Relu => k.cluster.relu,
                EltwiseFn::Identity => k.cluster.identity,
                EltwiseFn::Add => k.cluster.add,
            };
            div_ceil_u128(elems as u128 * per.0 as u128, 1000)
        }
        (KernelWork::Eltwise { .. }, Engine::Npu) => return Err(unsupported()),
    };
    Ok(u64::try_from(cycles).unwrap_or(u64::MAX))
}

fn div_ceil_u128(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> HardwareConfig {
        HardwareConfig::siracusa_like()
    }

    fn custom(edit: impl Fn(String) -> String) -> Result<HardwareConfig, HwError> {
        HardwareConfig::from_toml(&edit(SIRACUSA_LIKE.to_string()))
    }

    #[test]
    fn default_profile_orders_capacities() {
        let hw = profile();
        assert!(hw.capacity(Level::L1) < hw.capacity(Level::L2));
        assert!(hw.capacity(Level::L2) < hw.capacity(Level::L3));
        // The ViT-MLP intermediate does not fit in L2.
        assert!(hw.capacity(Level::L2) < 602_112);
    }

    #[test]
    fn rejects_capacity_inversion() {
        let err = custom(|s| s.replace("capacity = 8388608", "capacity = 4096")).unwrap_err();
        assert!(matches!(err, HwError::CapacityOrdering { .. }));
        assert!(err.to_string().contains("capacity ordering"));
    }

    #[test]
    fn missing_field_is_named() {
        let err = custom(|s| s.replace("min_tile_elems = 64\n", "")).unwrap_err();
        assert!(err.to_string().contains("min_tile_elems"), "{err}");
    }

    #[test]
    fn dma_cost_formula() {
        let mut hw = profile();
        hw.dma[LevelPair::L2L1.index()] = DmaModel {
            setup_cycles: 64,
            per_dim_overhead: 10,
            bytes_per_cycle: 8,
        };
        let one_d = TransferShape {
            bytes: 1024,
            dims: 1,
            pair: LevelPair::L2L1,
        };
        assert_eq!(dma_cost(&hw, &one_d), 192);
        let three_d = TransferShape { dims: 3, ..one_d };
        assert_eq!(dma_cost(&hw, &three_d) - dma_cost(&hw, &one_d), 20);
    }

    #[test]
    fn slow_pair_costs_more_payload_cycles() {
        let mut hw = profile();
        hw.dma[LevelPair::L3L1.index()].bytes_per_cycle = 1;
        hw.dma[LevelPair::L2L1.index()].bytes_per_cycle = 8;
        let l2 = TransferShape {
            bytes: 1024,
            dims: 1,
            pair: LevelPair::L2L1,
        };
        let l3 = TransferShape {
            pair: LevelPair::L3L1,
            ..l2
        };
        let payload = |t: &TransferShape| dma_cost(&hw, t) - hw.dma_model(t.pair).setup_cycles;
        assert!(payload(&l3) >= 8 * payload(&l2));
    }

    #[test]
    fn gemm_kernel_cost() {
        let mut hw = profile();
        hw.kernels.cluster.gemm_macs_per_cycle = 2;
        hw.num_cores = 8;
        let work = KernelWork::Gemm { m: 8, n: 8, k: 8 };
        assert_eq!(kernel_cost(&work, Engine::Cluster, &hw).unwrap(), 32);
        // M = 9 uses 9/16 of the cores: two row-steps instead of one.
        let uneven = KernelWork::Gemm { m: 9, n: 8, k: 8 };
        let c9 = kernel_cost(&uneven, Engine::Cluster, &hw).unwrap() as f64 / 9.0;
        let c8 = 32.0 / 8.0;
        assert!((c9 / c8 - 16.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn npu_to_cluster_ratio() {
        let hw = custom(|s| s.replace("gemm_macs_per_cycle = 256", "gemm_macs_per_cycle = 256")).unwrap();
        assert_eq!(hw.kernels.cluster.gemm_macs_per_cycle * hw.num_cores, 16);
        let work = KernelWork::Gemm { m: 64, n: 64, k: 64 };
        let cluster = kernel_cost(&work, Engine::Cluster, &hw).unwrap();
        let npu = kernel_cost(&work, Engine::Npu, &hw).unwrap();
        assert_eq!(cluster, 16 * npu);
    }

    #[test]
    fn eltwise_cost_and_npu_rejection() {
        let mut hw = profile();
        hw.kernels.cluster.relu = MilliCycles(1000);
        let work = KernelWork::Eltwise {
            func: EltwiseFn::Relu,
            elems: 64,
        };
        assert_eq!(kernel_cost(&work, Engine::Cluster, &hw).unwrap(), 64);
        assert!(kernel_cost(&work, Engine::Npu, &hw).is_err());
        assert!(custom(|s| s.replace("relu_cycles_per_elem = 1.0", "relu_cycles_per_elem = 0.0")).is_err());
    }

    #[test]
    fn engine_selection_keeps_eltwise_on_cluster() {
        let sel = EngineSelection::NpuForGemm;
        assert_eq!(sel.engine_for(OpCategory::Gemm), Engine::Npu);
        assert_eq!(sel.engine_for(OpCategory::Conv2d), Engine::Npu);
        assert_eq!(sel.engine_for(OpCategory::Eltwise), Engine::Cluster);
    }
}
