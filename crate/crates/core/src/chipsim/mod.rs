//! Virtual chip: cores with private memory executing schedules in
//! bulk-synchronous phases on real data.
//!
//! Every core holds explicit windows (global index lists per dimension
//! plus values). Shifts physically move slabs between ring neighbours and
//! compute phases look every operand up in local memory, so an invalid
//! plan surfaces as [`Error::NonlocalOperand`] instead of a wrong answer.
//! Cycles are charged from measured traffic with the same per-phase rules
//! as [`crate::costmodel::estimate`].

mod model;
mod placement;
mod schedule;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use model::{op_plans, simulate_model, ModelStats, OpPlans, OpSimRecord};
pub use placement::{place, PlacedPartition, Placement};
pub use schedule::{build_schedule, Phase, Schedule, ShiftMove};

use crate::costmodel::{
    compute_phase, exchange_phase, reduce_add_phase, ChipConfig, ComputeModel, CostEstimate,
    PhaseCost, TileStats,
};
use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::rtensor::Partitioning;
use crate::texpr::ExprKind;

/// Per-core memory accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreState {
    pub capacity: u64,
    pub in_use: u64,
    pub high_water: u64,
}

impl CoreState {
    pub fn new(capacity: u64) -> Self {
        CoreState {
            capacity,
            in_use: 0,
            high_water: 0,
        }
    }

    pub fn alloc(&mut self, core: usize, bytes: u64) -> Result<()> {
        if self.in_use + bytes > self.capacity {
            return Err(Error::CapacityExceeded {
                core,
                requested: bytes,
                in_use: self.in_use,
                capacity: self.capacity,
            });
        }
        self.in_use += bytes;
        self.high_water = self.high_water.max(self.in_use);
        Ok(())
    }

    pub fn free(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.in_use);
        self.in_use -= bytes;
    }
}

/// A window resident on one core: global index list per dimension and the
/// values in row-major window order.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub indices: Vec<Vec<usize>>,
    pub data: Vec<f32>,
}

impl Block {
    pub fn shape(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    /// Window filled from a dense tensor; indices beyond `t.shape` read 0.
    pub fn gather(indices: Vec<Vec<usize>>, t: &DenseTensor) -> Self {
        let shape: Vec<usize> = indices.iter().map(Vec::len).collect();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut pos = vec![0usize; shape.len()];
        if n > 0 {
            loop {
                let real = pos
                    .iter()
                    .enumerate()
                    .all(|(d, &i)| indices[d][i] < t.shape[d]);
                data.push(if real {
                    let flat = pos
                        .iter()
                        .enumerate()
                        .fold(0, |acc, (d, &i)| acc * t.shape[d] + indices[d][i]);
                    t.data[flat]
                } else {
                    0.0
                });
                if !crate::texpr::reference::advance(&mut pos, &shape) {
                    break;
                }
            }
        }
        Block { indices, data }
    }

    pub fn zeros(indices: Vec<Vec<usize>>) -> Self {
        let n = indices.iter().map(Vec::len).product();
        Block {
            indices,
            data: vec![0.0; n],
        }
    }

    /// Position of each global index along each dimension.
    fn lookup(&self) -> Vec<Vec<u32>> {
        self.indices
            .iter()
            .map(|list| {
                let len = list.iter().max().map_or(0, |m| m + 1);
                let mut t = vec![u32::MAX; len];
                for (i, &g) in list.iter().enumerate() {
                    t[g] = i as u32;
                }
                t
            })
            .collect()
    }

    /// Window-order offset of a global index, if resident.
    pub fn offset_of(&self, index: &[usize]) -> Option<usize> {
        let mut off = 0;
        for (list, &g) in self.indices.iter().zip(index) {
            off = off * list.len() + list.iter().position(|&x| x == g)?;
        }
        Some(off)
    }
}

/// Cost and traffic of one executed phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub kind: String,
    pub step: Option<usize>,
    pub compute: u64,
    pub comm: u64,
    pub sync: u64,
    /// Largest per-core inbound bytes.
    pub bytes_in: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub compute_cycles: u64,
    pub comm_cycles: u64,
    pub sync_cycles: u64,
    pub total_cycles: u64,
    pub steps: u64,
    pub bytes_shifted_per_core: u64,
    pub bytes_reduced_per_core: u64,
    /// Inbound shift bytes per core for each step's exchange.
    pub bytes_per_step: Vec<u64>,
    pub high_water: Vec<u64>,
    /// Most bytes carried by one directed core-to-core link in one phase.
    pub per_link_max_bytes: u64,
    /// Every core saw the same work and traffic in every compute and
    /// shift phase.
    pub homogeneous: bool,
    pub phases: Vec<PhaseRecord>,
}

impl SimStats {
    fn charge(&mut self, kind: &str, step: Option<usize>, c: PhaseCost, bytes_in: u64) {
        self.compute_cycles += c.compute;
        self.comm_cycles += c.comm;
        self.sync_cycles += c.sync;
        self.total_cycles = self.compute_cycles + self.comm_cycles + self.sync_cycles;
        self.phases.push(PhaseRecord {
            kind: kind.to_string(),
            step,
            compute: c.compute,
            comm: c.comm,
            sync: c.sync,
            bytes_in,
        });
    }

    /// The measured counterpart of a cost-model estimate.
    pub fn as_estimate(&self) -> CostEstimate {
        CostEstimate {
            compute_cycles: self.compute_cycles,
            comm_cycles: self.comm_cycles,
            sync_cycles: self.sync_cycles,
            total_cycles: self.total_cycles,
            bytes_shifted_per_core: self.bytes_shifted_per_core,
            bytes_reduced_per_core: self.bytes_reduced_per_core,
            steps: self.steps,
        }
    }

    /// Phase-by-phase CSV.
    pub fn write_phase_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["phase", "kind", "step", "compute", "comm", "sync", "bytes_in"])?;
        for (i, p) in self.phases.iter().enumerate() {
            out.write_record([
                i.to_string(),
                p.kind.clone(),
                p.step.map(|s| s.to_string()).unwrap_or_default(),
                p.compute.to_string(),
                p.comm.to_string(),
                p.sync.to_string(),
                p.bytes_in.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Windows of every slot on every core of one running operator.
pub struct Machine<'a> {
    pub p: &'a Partitioning,
    chip: &'a ChipConfig,
    model: &'a ComputeModel,
    /// `blocks[core][slot]`.
    pub blocks: Vec<Vec<Block>>,
    pub stats: SimStats,
}

impl<'a> Machine<'a> {
    /// Machine with the given windows already resident.
    pub fn with_blocks(
        p: &'a Partitioning,
        chip: &'a ChipConfig,
        model: &'a ComputeModel,
        blocks: Vec<Vec<Block>>,
    ) -> Self {
        Machine {
            p,
            chip,
            model,
            blocks,
            stats: SimStats {
                homogeneous: true,
                ..Default::default()
            },
        }
    }

    /// Load inputs per `placement`; outputs start at zero.
    pub fn load(
        p: &'a Partitioning,
        placement: &Placement,
        chip: &'a ChipConfig,
        model: &'a ComputeModel,
        inputs: &[&DenseTensor],
    ) -> Result<Self> {
        check_inputs(p, inputs)?;
        let out = p.op.output_slot();
        let blocks = (0..p.cores_used())
            .map(|core| {
                (0..p.op.num_slots())
                    .map(|slot| {
                        let idx = placement.indices(p, core, slot);
                        if slot == out {
                            Block::zeros(idx)
                        } else {
                            Block::gather(idx, inputs[slot])
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self::with_blocks(p, chip, model, blocks))
    }

    pub fn run(&mut self, schedule: &Schedule) -> Result<()> {
        for ph in &schedule.phases {
            self.execute(ph)?;
        }
        Ok(())
    }

    pub fn execute(&mut self, phase: &Phase) -> Result<()> {
        match phase {
            Phase::Compute { step, offset, tile, .. } => self.compute(*step, offset, tile),
            Phase::Shift { step, moves } => self.shift(*step, moves),
            Phase::ReduceScatter { hop, group, chunk_elems } => {
                self.all_reduce_hop(*hop, *group, *chunk_elems as usize, true)
            }
            Phase::ReduceAdd { .. } => Ok(()),
            Phase::AllGather { hop, group, chunk_elems } => {
                self.all_reduce_hop(*hop, *group, *chunk_elems as usize, false)
            }
            Phase::Setup { .. } | Phase::Transition { .. } => Err(Error::Verification(
                "setup and transition phases run at model level".into(),
            )),
        }
    }

    fn compute(&mut self, step: usize, offset: &[usize], tile: &[usize]) -> Result<()> {
        let p = self.p;
        let op = &p.op;
        let out = op.output_slot();
        let points: Vec<Result<u64>> = self
            .blocks
            .par_iter_mut()
            .enumerate()
            .map(|(core, blocks)| {
                let coords = p.core_coords(core);
                let t0 = p.tile_offset(&coords);
                let axis_idx: Vec<Vec<usize>> = (0..op.axes.len())
                    .map(|a| {
                        let origin = coords[a] * p.sub[a];
                        (0..tile[a])
                            .map(|i| origin + (t0[a] + offset[a] + i) % p.sub[a])
                            .collect()
                    })
                    .collect();
                let lookups: Vec<Vec<Vec<u32>>> = blocks.iter().map(Block::lookup).collect();
                let shapes: Vec<Vec<usize>> = blocks.iter().map(Block::shape).collect();
                let (ins, outs) = blocks.split_at_mut(out);
                let out_block = &mut outs[0];
                let mut pos = vec![0usize; tile.len()];
                let mut g = vec![0usize; tile.len()];
                let mut args = vec![0f32; ins.len()];
                let mut count = 0u64;
                if tile.contains(&0) {
                    return Ok(0);
                }
                let locate = |slot: usize, g: &[usize]| -> Result<usize> {
                    let t = op.slot(slot);
                    let mut off = 0usize;
                    for (d, map) in t.dims.iter().enumerate() {
                        let idx = map.index(g);
                        let at = lookups[slot][d].get(idx).copied().unwrap_or(u32::MAX);
                        if at == u32::MAX {
                            return Err(Error::NonlocalOperand {
                                op: op.id.clone(),
                                core,
                                tensor: t.name.clone(),
                                index: t.dims.iter().map(|m| m.index(g)).collect(),
                            });
                        }
                        off = off * shapes[slot][d] + at as usize;
                    }
                    Ok(off)
                };
                loop {
                    for a in 0..g.len() {
                        g[a] = axis_idx[a][pos[a]];
                    }
                    for (slot, b) in ins.iter().enumerate() {
                        args[slot] = b.data[locate(slot, &g)?];
                    }
                    let o = locate(out, &g)?;
                    match op.kind {
                        ExprKind::Contraction => {
                            out_block.data[o] += args.iter().product::<f32>();
                        }
                        ExprKind::Elementwise(f) => out_block.data[o] = f.apply_f32(&args),
                    }
                    count += 1;
                    if !crate::texpr::reference::advance(&mut pos, tile) {
                        break;
                    }
                }
                Ok(count)
            })
            .collect();
        let mut counts = Vec::with_capacity(points.len());
        for r in points {
            counts.push(r?);
        }
        let max = counts.iter().copied().max().unwrap_or(0);
        if counts.iter().any(|&c| c != max) {
            self.stats.homogeneous = false;
        }
        let mut stats = TileStats::of_tile(p, tile);
        stats.points = max;
        let cost = compute_phase(self.chip, self.model, op.kind, &stats);
        self.stats.steps += 1;
        self.stats.charge("compute", Some(step), cost, 0);
        Ok(())
    }

    fn shift(&mut self, step: usize, moves: &[ShiftMove]) -> Result<()> {
        let p = self.p;
        let n = self.blocks.len();
        let mut inbound = vec![0u64; n];
        let mut links: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for m in moves {
            let es = p.configs[m.slot].elem_size as u64;
            let old: Vec<Block> = self.blocks.iter().map(|b| b[m.slot].clone()).collect();
            for core in 0..n {
                let up = p.upstream(m.slot, &p.core_coords(core), m.dim);
                let (block, elems) = slide(&old[core], &old[up], m.dim, m.rp).map_err(|e| {
                    Error::Verification(format!("shift of `{}` on core {core}: {e}", m.tensor))
                })?;
                self.blocks[core][m.slot] = block;
                inbound[core] += elems * es;
                if up != core {
                    *links.entry((up, core)).or_default() += elems * es;
                }
            }
        }
        let bytes = inbound.iter().copied().max().unwrap_or(0);
        if inbound.iter().any(|&b| b != bytes) {
            self.stats.homogeneous = false;
        }
        self.stats.per_link_max_bytes = self
            .stats
            .per_link_max_bytes
            .max(links.values().copied().max().unwrap_or(0));
        // Slabs are staged through the shift buffer; each fill is a sync.
        let cost = exchange_phase(self.chip, bytes);
        self.stats.bytes_shifted_per_core += bytes;
        self.stats.bytes_per_step.push(bytes);
        self.stats.charge("shift", Some(step), cost, bytes);
        Ok(())
    }

    /// Output replicas grouped by (sub-tensor, ring position), ordered by ring.
    fn reduce_groups(&self) -> Vec<Vec<usize>> {
        let p = self.p;
        let out = p.op.output_slot();
        let mut groups: BTreeMap<(Vec<usize>, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for core in 0..self.blocks.len() {
            let rs = p.ring_slot(out, &p.core_coords(core));
            groups.entry((rs.block, rs.linear)).or_default().push((rs.ring, core));
        }
        groups
            .into_values()
            .map(|mut v| {
                v.sort();
                v.into_iter().map(|(_, c)| c).collect()
            })
            .collect()
    }

    fn all_reduce_hop(&mut self, hop: usize, g: usize, chunk: usize, scatter: bool) -> Result<()> {
        let out = self.p.op.output_slot();
        let es = self.p.configs[out].elem_size as u64;
        let mut max_elems = 0usize;
        let mut links = 0u64;
        for members in self.reduce_groups() {
            if members.len() != g {
                return Err(Error::Verification(format!(
                    "reduction group of {} cores, expected {g}",
                    members.len()
                )));
            }
            let n = self.blocks[members[0]][out].data.len();
            // Member r sends chunk (r - hop) during reduce-scatter and
            // chunk (r + 1 - hop) during all-gather, to member r + 1.
            let sends: Vec<(usize, Vec<f32>)> = (0..g)
                .map(|r| {
                    let c = if scatter { (r + g - hop % g) % g } else { (r + 1 + g - hop % g) % g };
                    let lo = (c * chunk).min(n);
                    let hi = ((c + 1) * chunk).min(n);
                    (lo, self.blocks[members[r]][out].data[lo..hi].to_vec())
                })
                .collect();
            for (r, (lo, vals)) in sends.into_iter().enumerate() {
                let dst = members[(r + 1) % g];
                if self.blocks[dst][out].indices != self.blocks[members[r]][out].indices {
                    return Err(Error::Verification("output replicas hold different windows".into()));
                }
                let target = &mut self.blocks[dst][out].data[lo..lo + vals.len()];
                if scatter {
                    for (t, v) in target.iter_mut().zip(&vals) {
                        *t += v;
                    }
                } else {
                    target.copy_from_slice(&vals);
                }
                max_elems = max_elems.max(vals.len());
                links = links.max(vals.len() as u64 * es);
            }
        }
        let bytes = max_elems as u64 * es;
        self.stats.per_link_max_bytes = self.stats.per_link_max_bytes.max(links);
        self.stats.bytes_reduced_per_core += bytes;
        let step = Some(hop);
        if scatter {
            self.stats.charge("reduce-scatter", step, exchange_phase(self.chip, bytes), bytes);
            self.stats
                .charge("reduce-add", step, reduce_add_phase(self.chip, max_elems as u64), 0);
        } else {
            self.stats.charge("all-gather", step, exchange_phase(self.chip, bytes), bytes);
        }
        Ok(())
    }

    /// Unpadded output assembled from every core; replicas must agree
    /// bit for bit and every element must be covered.
    pub fn gather_output(&self) -> Result<DenseTensor> {
        let p = self.p;
        let t = &p.op.output;
        let shape = t.shape(&p.op.extents());
        let mut out = DenseTensor::zeros(t.dtype, shape.clone());
        let mut seen = vec![false; out.len()];
        let slot = p.op.output_slot();
        for (core, blocks) in self.blocks.iter().enumerate() {
            scatter_block(&blocks[slot], &shape, &mut out.data, &mut seen).map_err(|flat| {
                Error::Verification(format!(
                    "core {core} disagrees on output element {:?}",
                    crate::rtensor::grid_coords(flat, &shape)
                ))
            })?;
        }
        if let Some(flat) = seen.iter().position(|&s| !s) {
            return Err(Error::Verification(format!(
                "output element {:?} was never computed",
                crate::rtensor::grid_coords(flat, &shape)
            )));
        }
        Ok(out)
    }
}

/// Write the unpadded part of a block into a dense buffer. Returns the
/// flat index of the first element that conflicts with an earlier write.
pub(crate) fn scatter_block(
    b: &Block,
    shape: &[usize],
    data: &mut [f32],
    seen: &mut [bool],
) -> std::result::Result<(), usize> {
    let bshape = b.shape();
    if bshape.contains(&0) {
        return Ok(());
    }
    let mut pos = vec![0usize; bshape.len()];
    let mut i = 0;
    loop {
        if pos.iter().enumerate().all(|(d, &k)| b.indices[d][k] < shape[d]) {
            let flat = pos
                .iter()
                .enumerate()
                .fold(0, |acc, (d, &k)| acc * shape[d] + b.indices[d][k]);
            let v = b.data[i];
            if seen[flat] && data[flat].to_bits() != v.to_bits() {
                return Err(flat);
            }
            data[flat] = v;
            seen[flat] = true;
        }
        i += 1;
        if !crate::texpr::reference::advance(&mut pos, &bshape) {
            return Ok(());
        }
    }
}

/// Drop the first `rp` entries of `own` along `d` and append the first `rp`
/// entries of `up`. Returns the new block and the number of elements received.
fn slide(own: &Block, up: &Block, d: usize, rp: usize) -> std::result::Result<(Block, u64), String> {
    let shape = own.shape();
    let len = shape[d];
    if rp > len {
        return Err(format!("pace {rp} exceeds window {len}"));
    }
    for (k, (a, b)) in own.indices.iter().zip(&up.indices).enumerate() {
        if k != d && a != b {
            return Err(format!("neighbour window differs along dimension {k}"));
        }
    }
    let mut indices = own.indices.clone();
    indices[d] = own.indices[d][rp..]
        .iter()
        .chain(&up.indices[d][..rp])
        .copied()
        .collect();
    let outer: usize = shape[..d].iter().product();
    let inner: usize = shape[d + 1..].iter().product();
    let mut data = Vec::with_capacity(own.data.len());
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&own.data[base + rp * inner..base + len * inner]);
        data.extend_from_slice(&up.data[base..base + rp * inner]);
    }
    Ok((Block { indices, data }, (outer * rp * inner) as u64))
}

fn check_inputs(p: &Partitioning, inputs: &[&DenseTensor]) -> Result<()> {
    let extents = p.op.extents();
    if inputs.len() != p.op.inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "operator `{}` takes {} inputs, got {}",
            p.op.id,
            p.op.inputs.len(),
            inputs.len()
        )));
    }
    for (t, x) in p.op.inputs.iter().zip(inputs) {
        let shape = t.shape(&extents);
        if x.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "input `{}` has shape {:?}, expected {shape:?}",
                t.name, x.shape
            )));
        }
    }
    Ok(())
}

/// Execute one operator from its initial placement. Memory is accounted
/// per core: shift buffer plus every resident window.
pub fn simulate(
    p: &Partitioning,
    schedule: &Schedule,
    placement: &Placement,
    chip: &ChipConfig,
    model: &ComputeModel,
    inputs: &[&DenseTensor],
) -> Result<(DenseTensor, SimStats)> {
    let mut mem = vec![CoreState::new(chip.mem_per_core); p.cores_used()];
    for (core, state) in mem.iter_mut().enumerate() {
        state.alloc(core, placement.shift_buffer)?;
        for part in &placement.cores[core] {
            state.alloc(core, part.bytes)?;
        }
    }
    let mut m = Machine::load(p, placement, chip, model, inputs)?;
    m.run(schedule)?;
    let out = m.gather_output()?;
    let mut stats = m.stats;
    stats.high_water = mem.iter().map(|s| s.high_water).collect();
    Ok((out, stats))
}

/// Place, schedule and simulate in one call.
pub fn run_plan(
    p: &Partitioning,
    chip: &ChipConfig,
    model: &ComputeModel,
    inputs: &[&DenseTensor],
) -> Result<(DenseTensor, SimStats)> {
    let placement = place(p, chip)?;
    let schedule = build_schedule(p);
    simulate(p, &schedule, &placement, chip, model, inputs)
}
