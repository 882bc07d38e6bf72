//! Static memory accounting and the latency rulebook.
//!
//! The same per-phase rules price schedules here (in closed form) and in
//! the simulator (phase by phase from measured traffic):
//!
//! * compute phase: `ceil(MACs / compute_rate)` for contractions,
//!   `ceil(elements / elementwise_rate)` for elementwise maps, plus one sync;
//! * exchange phase moving `b` bytes per core: `ceil(b / bandwidth)` comm
//!   cycles and one sync per shift-buffer fill, at least one.

mod chip;
mod fit;

use serde::{Deserialize, Serialize};

pub use chip::ChipConfig;
pub use fit::{fit_linear, fit_linear_csv, LinearModel};

use crate::error::{Error, Result};
use crate::rtensor::{dim_axis, Partitioning};
use crate::texpr::{ExprKind, IndexMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub compute_cycles: u64,
    pub comm_cycles: u64,
    pub sync_cycles: u64,
    pub total_cycles: u64,
    /// Bytes each core sends over all shift phases.
    pub bytes_shifted_per_core: u64,
    /// Bytes each core sends during the final partial-sum reduction.
    pub bytes_reduced_per_core: u64,
    pub steps: u64,
}

impl CostEstimate {
    pub fn add_phase(&mut self, c: PhaseCost) {
        self.compute_cycles += c.compute;
        self.comm_cycles += c.comm;
        self.sync_cycles += c.sync;
        self.total_cycles = self.compute_cycles + self.comm_cycles + self.sync_cycles;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub compute: u64,
    pub comm: u64,
    pub sync: u64,
}

impl PhaseCost {
    pub fn total(&self) -> u64 {
        self.compute + self.comm + self.sync
    }
}

/// Shape statistics of one sub-task, the inputs to compute pricing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileStats {
    /// Iteration points (multiply-accumulates for contractions).
    pub points: u64,
    pub out_elems: u64,
    pub in_elems: u64,
}

impl TileStats {
    /// Statistics of a tile with per-axis extents `tile`.
    pub fn of_tile(p: &Partitioning, tile: &[usize]) -> Self {
        let dim_extent = |m: &IndexMap| m.extent(tile) as u64;
        TileStats {
            points: tile.iter().map(|&t| t as u64).product(),
            out_elems: p.op.output.dims.iter().map(dim_extent).product(),
            in_elems: p
                .op
                .inputs
                .iter()
                .map(|t| t.dims.iter().map(dim_extent).product::<u64>())
                .sum(),
        }
    }
}

/// How compute phases are priced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub enum ComputeModel {
    /// Chip throughput rates.
    #[default]
    Rates,
    /// A fitted linear model over tile features.
    Linear(LinearModel),
}

const FEATURES: [&str; 4] = ["macs", "flops", "out_elems", "in_elems"];

impl ComputeModel {
    pub fn linear(model: LinearModel) -> Result<Self> {
        for f in &model.features {
            if !FEATURES.contains(&f.as_str()) {
                return Err(Error::Unknown {
                    kind: "cost-model feature",
                    name: f.clone(),
                });
            }
        }
        Ok(ComputeModel::Linear(model))
    }

    pub fn compute_cycles(&self, chip: &ChipConfig, kind: ExprKind, t: &TileStats) -> u64 {
        match self {
            ComputeModel::Rates => match kind {
                ExprKind::Contraction => t.points.div_ceil(chip.compute_rate),
                ExprKind::Elementwise(_) => t.points.div_ceil(chip.elementwise_rate),
            },
            ComputeModel::Linear(m) => {
                let x: Vec<f64> = m
                    .features
                    .iter()
                    .map(|f| match f.as_str() {
                        "macs" => t.points as f64,
                        "flops" => 2.0 * t.points as f64,
                        "out_elems" => t.out_elems as f64,
                        _ => t.in_elems as f64,
                    })
                    .collect();
                m.predict(&x).max(0.0).ceil() as u64
            }
        }
    }
}

/// Compute phase: local work plus the barrier that closes it.
pub fn compute_phase(
    chip: &ChipConfig,
    model: &ComputeModel,
    kind: ExprKind,
    tile: &TileStats,
) -> PhaseCost {
    PhaseCost {
        compute: model.compute_cycles(chip, kind, tile),
        comm: 0,
        sync: chip.sync_overhead,
    }
}

/// Exchange phase moving `bytes` per core through the shift buffer.
pub fn exchange_phase(chip: &ChipConfig, bytes: u64) -> PhaseCost {
    PhaseCost {
        compute: 0,
        comm: comm_cycles(chip, bytes),
        sync: chip.sync_overhead * bytes.div_ceil(chip.shift_buffer).max(1),
    }
}

/// Reduce-scatter hop: receive `elems` partial sums and add them in.
pub fn reduce_add_phase(chip: &ChipConfig, elems: u64) -> PhaseCost {
    PhaseCost {
        compute: elems.div_ceil(chip.elementwise_rate),
        comm: 0,
        sync: chip.sync_overhead,
    }
}

pub fn comm_cycles(chip: &ChipConfig, bytes: u64) -> u64 {
    if bytes == 0 {
        0
    } else {
        (bytes as f64 / chip.link_bandwidth).ceil() as u64
    }
}

/// One-shot transfer (setup or layout change): 0 when nothing moves.
pub fn transfer_cycles(chip: &ChipConfig, max_incoming_bytes: u64, any_transfer: bool) -> u64 {
    if any_transfer {
        comm_cycles(chip, max_incoming_bytes) + chip.sync_overhead
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorFootprint {
    pub tensor: String,
    pub bytes: u64,
    /// Part of `bytes` spent on compound-dimension halo.
    pub halo_bytes: u64,
    /// Copies of the sub-tensor across its sharing group.
    pub replication: usize,
    /// The output is held as per-core partial sums before reduction.
    pub partial_sums: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub tensors: Vec<TensorFootprint>,
    pub shift_buffer: u64,
    pub total: u64,
}

/// Per-core resident bytes of a plan: one window per tensor plus the
/// shift buffer.
pub fn footprint(p: &Partitioning, chip: &ChipConfig) -> MemoryFootprint {
    let out_slot = p.op.output_slot();
    let tensors: Vec<TensorFootprint> = p
        .configs
        .iter()
        .map(|c| {
            let no_halo: u64 = c
                .window
                .iter()
                .zip(&c.halo)
                .map(|(&w, &h)| (w - h) as u64)
                .product::<u64>()
                * c.elem_size as u64;
            let bytes = c.window_bytes();
            TensorFootprint {
                tensor: c.name.clone(),
                bytes,
                halo_bytes: bytes - no_halo,
                replication: c.replication,
                partial_sums: c.slot == out_slot && c.sharing > 1,
            }
        })
        .collect();
    let total = tensors.iter().map(|t| t.bytes).sum::<u64>() + chip.shift_buffer;
    MemoryFootprint {
        tensors,
        shift_buffer: chip.shift_buffer,
        total,
    }
}

/// Bytes each core sends when the rotation loop at `level` advances.
pub fn level_shift_bytes(p: &Partitioning, level: usize) -> u64 {
    let axis = p.loops[level].axis;
    p.configs
        .iter()
        .flat_map(|c| {
            (0..c.f_t.len())
                .filter(move |&d| {
                    c.f_t[d] > 1 && dim_axis(&p.op, &p.op.slot(c.slot).dims[d]) == axis
                })
                .map(move |d| c.slab_bytes(d))
        })
        .sum()
}

/// Closed-form latency of a plan under the shared rulebook.
pub fn estimate(p: &Partitioning, chip: &ChipConfig, model: &ComputeModel) -> CostEstimate {
    let steps = p.steps as u64;
    let mut e = CostEstimate {
        steps,
        ..Default::default()
    };
    let tile = TileStats::of_tile(p, &p.tile());
    let c = compute_phase(chip, model, p.op.kind, &tile);
    e.add_phase(PhaseCost {
        compute: c.compute * steps,
        comm: 0,
        sync: c.sync * steps,
    });

    if p.loops.is_empty() {
        e.add_phase(exchange_phase(chip, 0));
    } else {
        // Exchange after step s shifts every level whose inner loops wrap at s,
        // so phases fall into classes by the outermost level that moves.
        let n = p.loops.len();
        let bytes: Vec<u64> = (0..n).map(|l| level_shift_bytes(p, l)).collect();
        let mut inner = vec![1u64; n];
        for l in (0..n - 1).rev() {
            inner[l] = inner[l + 1] * p.loops[l + 1].trips as u64;
        }
        for l in 0..n {
            let outer = if l == 0 { 0 } else { steps / inner[l - 1] };
            let count = steps / inner[l] - outer;
            let b: u64 = bytes[l..].iter().sum();
            let ph = exchange_phase(chip, b);
            e.add_phase(PhaseCost {
                compute: 0,
                comm: ph.comm * count,
                sync: ph.sync * count,
            });
            e.bytes_shifted_per_core += b * count;
        }
    }

    let out = &p.configs[p.op.output_slot()];
    if out.replication > 1 {
        let g = out.replication as u64;
        let chunk = out.window_elems().div_ceil(g);
        let chunk_bytes = chunk * out.elem_size as u64;
        for _ in 0..g - 1 {
            e.add_phase(exchange_phase(chip, chunk_bytes));
            e.add_phase(reduce_add_phase(chip, chunk));
        }
        for _ in 0..g - 1 {
            e.add_phase(exchange_phase(chip, chunk_bytes));
        }
        e.bytes_reduced_per_core = 2 * (g - 1) * chunk_bytes;
    }
    e
}

/// Cycles to convert the tensors in `slots` from `from`'s residency to
/// `to`'s. Both plans must share `F_op`.
pub fn estimate_setup(
    from: &Partitioning,
    to: &Partitioning,
    slots: &[usize],
    chip: &ChipConfig,
) -> Result<u64> {
    if from.spec.f_op != to.spec.f_op {
        return Err(Error::PlanMismatch(format!(
            "setup between different partition factors {:?} and {:?}",
            from.spec.f_op, to.spec.f_op
        )));
    }
    let mut incoming = vec![0u64; chip.num_cores.max(from.cores_used())];
    let mut any = false;
    for &slot in slots {
        let a = crate::interop::Residency::of(from, slot);
        let b = crate::interop::Residency::of(to, slot);
        for (core, bytes) in crate::interop::incoming_bytes(&a, &b).into_iter().enumerate() {
            incoming[core] += bytes;
            any |= bytes > 0;
        }
    }
    Ok(transfer_cycles(
        chip,
        incoming.iter().copied().max().unwrap_or(0),
        any,
    ))
}
