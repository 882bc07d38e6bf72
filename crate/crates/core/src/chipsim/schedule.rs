//! Phase sequence of one operator run.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::interop::TransferSet;
use crate::rtensor::{dim_axis, grid_coords, LoopLevel, Partitioning};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftMove {
    pub slot: usize,
    pub tensor: String,
    pub dim: usize,
    pub axis: usize,
    pub rp: usize,
    /// Bytes each core sends for this move.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Sub-task at loop counters `counters`; `offset[a]` is the tile start
    /// along axis `a` relative to each core's initial tile offset.
    Compute {
        step: usize,
        counters: Vec<usize>,
        offset: Vec<usize>,
        tile: Vec<usize>,
    },
    Shift {
        step: usize,
        moves: Vec<ShiftMove>,
    },
    /// Ring reduce-scatter hop of output partial sums.
    ReduceScatter { hop: usize, group: usize, chunk_elems: u64 },
    /// Add the partial sums received in the preceding hop.
    ReduceAdd { hop: usize, chunk_elems: u64 },
    AllGather { hop: usize, group: usize, chunk_elems: u64 },
    Setup { op: String, promote: bool, transfers: Vec<TransferSet> },
    Transition { tensor: String, producer: String, consumer: String, transfers: TransferSet },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub op: String,
    /// Outermost first.
    pub loops: Vec<LoopLevel>,
    pub steps: usize,
    pub phases: Vec<Phase>,
}

/// Compute/shift loop nest for a plan, followed by the partial-sum
/// all-reduce when the output is replicated.
pub fn build_schedule(p: &Partitioning) -> Schedule {
    let op = &p.op;
    let trips: Vec<usize> = p.loops.iter().map(|l| l.trips).collect();
    let mut inner = vec![1usize; trips.len()];
    for l in (0..trips.len().saturating_sub(1)).rev() {
        inner[l] = inner[l + 1] * trips[l + 1];
    }
    let moves_at = |level: usize| -> Vec<ShiftMove> {
        let axis = p.loops[level].axis;
        let mut out = Vec::new();
        for c in &p.configs {
            for d in 0..c.f_t.len() {
                if c.f_t[d] > 1 && dim_axis(op, &op.slot(c.slot).dims[d]) == axis {
                    out.push(ShiftMove {
                        slot: c.slot,
                        tensor: c.name.clone(),
                        dim: d,
                        axis,
                        rp: c.rp[d],
                        bytes: c.slab_bytes(d),
                    });
                }
            }
        }
        out
    };
    let mut phases = Vec::with_capacity(2 * p.steps);
    for step in 0..p.steps {
        let counters = if trips.is_empty() { Vec::new() } else { grid_coords(step, &trips) };
        let mut offset = vec![0usize; op.axes.len()];
        let mut tile = p.sub.clone();
        for (l, lv) in p.loops.iter().enumerate() {
            let rp = p.spec.rp[lv.axis];
            offset[lv.axis] = counters[l] * rp;
            tile[lv.axis] = rp.min(p.sub[lv.axis] - offset[lv.axis]);
        }
        phases.push(Phase::Compute { step, counters, offset, tile });
        // Levels whose inner loops all wrap after this step advance; the
        // final step wraps everything, restoring the initial placement.
        let moves = (0..p.loops.len())
            .filter(|&l| (step + 1) % inner[l] == 0)
            .flat_map(moves_at)
            .collect();
        phases.push(Phase::Shift { step, moves });
    }
    let out = &p.configs[op.output_slot()];
    if out.replication > 1 {
        let g = out.replication;
        let chunk = out.window_elems().div_ceil(g as u64);
        for hop in 0..g - 1 {
            phases.push(Phase::ReduceScatter { hop, group: g, chunk_elems: chunk });
            phases.push(Phase::ReduceAdd { hop, chunk_elems: chunk });
        }
        for hop in 0..g - 1 {
            phases.push(Phase::AllGather { hop, group: g, chunk_elems: chunk });
        }
    }
    Schedule {
        op: op.id.clone(),
        loops: p.loops.clone(),
        steps: p.steps,
        phases,
    }
}

impl Schedule {
    /// Indented text rendering of the loop nest and phases.
    pub fn dump(&self, p: &Partitioning) -> String {
        let names: Vec<&str> = p.op.axes.iter().map(|a| a.name.as_str()).collect();
        let mut s = String::new();
        writeln!(s, "schedule {} plan {}", self.op, p.id()).unwrap();
        writeln!(s, "steps {}", self.steps).unwrap();
        for (l, lv) in self.loops.iter().enumerate() {
            writeln!(
                s,
                "{}loop {} trips {} rp {}",
                "  ".repeat(l),
                names[lv.axis],
                lv.trips,
                p.spec.rp[lv.axis]
            )
            .unwrap();
        }
        for ph in &self.phases {
            match ph {
                Phase::Compute { step, offset, tile, .. } => {
                    writeln!(s, "compute step {step} offset {offset:?} tile {tile:?}").unwrap()
                }
                Phase::Shift { step, moves } => {
                    let m: Vec<String> = moves
                        .iter()
                        .map(|m| format!("{}[{}] along {} by {} ({} B)", m.tensor, m.dim, names[m.axis], m.rp, m.bytes))
                        .collect();
                    writeln!(s, "shift step {step} [{}]", m.join(", ")).unwrap()
                }
                Phase::ReduceScatter { hop, group, chunk_elems } => {
                    writeln!(s, "reduce-scatter hop {hop} group {group} chunk {chunk_elems}").unwrap()
                }
                Phase::ReduceAdd { hop, chunk_elems } => {
                    writeln!(s, "reduce-add hop {hop} chunk {chunk_elems}").unwrap()
                }
                Phase::AllGather { hop, group, chunk_elems } => {
                    writeln!(s, "all-gather hop {hop} group {group} chunk {chunk_elems}").unwrap()
                }
                Phase::Setup { op, promote, transfers } => {
                    let bytes: u64 = transfers.iter().map(|t| t.total_bytes()).sum();
                    writeln!(s, "setup {op} {} {bytes} B", if *promote { "promote" } else { "demote" }).unwrap()
                }
                Phase::Transition { tensor, producer, consumer, transfers } => writeln!(
                    s,
                    "transition {tensor} {producer} -> {consumer} {} B",
                    transfers.total_bytes()
                )
                .unwrap(),
            }
        }
        s
    }
}
