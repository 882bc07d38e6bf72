//! Whole-model execution: operators run one after another with their
//! static tensors promoted from idle to active residency and back, and
//! intermediates parked in their producer's layout until last use.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{build_schedule, scatter_block, Block, CoreState, Machine, SimStats};
use crate::costmodel::{transfer_cycles, ChipConfig, ComputeModel};
use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::interop::{diff_placements, incoming_bytes, static_slots, EndToEndPlan, Residency};
use crate::rtensor::Partitioning;
use crate::texpr::ModelGraph;

/// Idle and active plan of one operator.
#[derive(Debug, Clone)]
pub struct OpPlans {
    pub idle: Partitioning,
    pub active: Partitioning,
}

/// Rebuild the partitionings named by an end-to-end plan.
pub fn op_plans(graph: &ModelGraph, plan: &EndToEndPlan) -> Result<Vec<OpPlans>> {
    if plan.ops.len() != graph.operators.len() {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} operators, model has {}",
            plan.ops.len(),
            graph.operators.len()
        )));
    }
    graph
        .operators
        .iter()
        .zip(&plan.ops)
        .map(|(op, a)| {
            if a.op_id != op.id {
                return Err(Error::PlanMismatch(format!(
                    "plan entry `{}` where `{}` was expected",
                    a.op_id, op.id
                )));
            }
            let op = Arc::new(op.clone());
            Ok(OpPlans {
                idle: Partitioning::new(op.clone(), a.idle.spec.clone())?,
                active: Partitioning::new(op, a.active.spec.clone())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSimRecord {
    pub op_id: String,
    pub promote_cycles: u64,
    pub demote_cycles: u64,
    pub transition_cycles: u64,
    pub exec: SimStats,
}

impl OpSimRecord {
    pub fn setup_cycles(&self) -> u64 {
        self.promote_cycles + self.demote_cycles
    }

    pub fn total_cycles(&self) -> u64 {
        self.setup_cycles() + self.transition_cycles + self.exec.total_cycles
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub ops: Vec<OpSimRecord>,
    pub total_cycles: u64,
    /// Per-core high-water mark over the whole run.
    pub high_water: Vec<u64>,
}

/// One tensor's windows across the cores of a plan.
struct Resident {
    tensor: String,
    real_shape: Vec<usize>,
    elem_size: usize,
    blocks: Vec<Option<Block>>,
}

impl Resident {
    fn residency(&self) -> Residency {
        Residency {
            tensor: self.tensor.clone(),
            real_shape: self.real_shape.clone(),
            elem_size: self.elem_size,
            cores: self
                .blocks
                .iter()
                .map(|b| b.as_ref().map(|b| b.indices.clone()))
                .collect(),
        }
    }

    fn bytes(&self, core: usize) -> u64 {
        self.blocks
            .get(core)
            .and_then(|b| b.as_ref())
            .map_or(0, |b| (b.data.len() * self.elem_size) as u64)
    }
}

fn slot_resident(p: &Partitioning, slot: usize, blocks: Vec<Option<Block>>) -> Resident {
    let t = p.op.slot(slot);
    Resident {
        tensor: t.name.clone(),
        real_shape: t.shape(&p.op.extents()),
        elem_size: t.element_size(),
        blocks,
    }
}

fn window_sets(p: &Partitioning, slot: usize) -> Vec<Option<Vec<Vec<usize>>>> {
    (0..p.cores_used())
        .map(|core| Some(p.window_indices(slot, &p.core_coords(core))))
        .collect()
}

/// Move `from` into the windows `to`. Each missing element is copied from
/// the lowest-numbered core holding it; padding reads 0. Returns the new
/// residency and the inbound bytes per core, cross-checked against the
/// planned transfer set and the per-dimension overlap count.
fn relayout(from: &Resident, to: Vec<Option<Vec<Vec<usize>>>>) -> Result<(Resident, Vec<u64>)> {
    let target = Residency {
        tensor: from.tensor.clone(),
        real_shape: from.real_shape.clone(),
        elem_size: from.elem_size,
        cores: to,
    };
    let source = from.residency();
    let planned = diff_placements(&source, &target)?;
    let fast = incoming_bytes(&source, &target);

    let shape = &from.real_shape;
    let total: usize = shape.iter().product();
    let mut owner: Vec<Option<(usize, usize)>> = vec![None; total];
    for (core, b) in from.blocks.iter().enumerate() {
        let Some(b) = b else { continue };
        for_each_position(b, shape, |flat, off| {
            if owner[flat].is_none() {
                owner[flat] = Some((core, off));
            }
        });
    }
    let es = from.elem_size as u64;
    let mut measured = vec![0u64; target.cores.len().max(from.blocks.len())];
    let mut blocks = Vec::with_capacity(target.cores.len());
    for (core, sets) in target.cores.into_iter().enumerate() {
        let Some(sets) = sets else {
            blocks.push(None);
            continue;
        };
        let mut b = Block::zeros(sets);
        let local = from.blocks.get(core).and_then(|x| x.as_ref());
        let local_pos = local.map(Block::lookup);
        let bshape = b.shape();
        let mut pos = vec![0usize; bshape.len()];
        let mut i = 0;
        if !b.data.is_empty() {
            loop {
                let idx: Vec<usize> = pos.iter().enumerate().map(|(d, &k)| b.indices[d][k]).collect();
                if idx.iter().zip(shape).all(|(&g, &e)| g < e) {
                    let here = local.zip(local_pos.as_ref()).and_then(|(blk, lk)| {
                        let mut off = 0usize;
                        for (d, &g) in idx.iter().enumerate() {
                            let at = *lk[d].get(g)?;
                            if at == u32::MAX {
                                return None;
                            }
                            off = off * blk.indices[d].len() + at as usize;
                        }
                        Some(blk.data[off])
                    });
                    b.data[i] = match here {
                        Some(v) => v,
                        None => {
                            let flat = idx.iter().zip(shape).fold(0, |acc, (&g, &e)| acc * e + g);
                            let (src, off) = owner[flat].ok_or_else(|| {
                                Error::PlanMismatch(format!("element {idx:?} of `{}` is not resident", from.tensor))
                            })?;
                            measured[core] += es;
                            from.blocks[src].as_ref().unwrap().data[off]
                        }
                    };
                }
                i += 1;
                if !crate::texpr::reference::advance(&mut pos, &bshape) {
                    break;
                }
            }
        }
        blocks.push(Some(b));
    }
    let mut planned_in = planned.incoming_per_core.clone();
    planned_in.resize(measured.len(), 0);
    let mut fast_in = fast;
    fast_in.resize(measured.len(), 0);
    if planned_in != measured || fast_in != measured {
        return Err(Error::Verification(format!(
            "transfer volume of `{}` disagrees with its transfer plan",
            from.tensor
        )));
    }
    Ok((
        Resident {
            tensor: from.tensor.clone(),
            real_shape: from.real_shape.clone(),
            elem_size: from.elem_size,
            blocks,
        },
        measured,
    ))
}

/// Visit the unpadded elements of a block with their flat tensor index and
/// block offset.
fn for_each_position(b: &Block, shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let bshape = b.shape();
    if bshape.contains(&0) {
        return;
    }
    let mut pos = vec![0usize; bshape.len()];
    let mut i = 0;
    loop {
        if pos.iter().enumerate().all(|(d, &k)| b.indices[d][k] < shape[d]) {
            let flat = pos
                .iter()
                .enumerate()
                .fold(0, |acc, (d, &k)| acc * shape[d] + b.indices[d][k]);
            f(flat, i);
        }
        i += 1;
        if !crate::texpr::reference::advance(&mut pos, &bshape) {
            return;
        }
    }
}

fn alloc_all(mem: &mut [CoreState], cores: usize, bytes: u64) -> Result<()> {
    for (core, m) in mem.iter_mut().enumerate().take(cores) {
        m.alloc(core, bytes)?;
    }
    Ok(())
}

fn free_all(mem: &mut [CoreState], cores: usize, bytes: u64) {
    for m in mem.iter_mut().take(cores) {
        m.free(bytes);
    }
}

fn add_incoming(acc: &mut Vec<u64>, v: &[u64]) {
    if acc.len() < v.len() {
        acc.resize(v.len(), 0);
    }
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn transfer_cost(chip: &ChipConfig, incoming: &[u64]) -> u64 {
    let max = incoming.iter().copied().max().unwrap_or(0);
    transfer_cycles(chip, max, max > 0)
}

/// Run every operator in order under its idle/active plan pair and return
/// the graph outputs. Memory is accounted per core for the whole run.
pub fn simulate_model(
    graph: &ModelGraph,
    plans: &[OpPlans],
    chip: &ChipConfig,
    model: &ComputeModel,
    inputs: &HashMap<String, DenseTensor>,
) -> Result<(BTreeMap<String, DenseTensor>, ModelStats)> {
    let n = graph.operators.len();
    if plans.len() != n {
        return Err(Error::PlanMismatch("one plan pair per operator required".into()));
    }
    for name in &graph.inputs {
        let decl = graph.tensor(name).unwrap();
        let t = inputs.get(name).ok_or_else(|| Error::Undefined {
            kind: "input tensor",
            name: name.clone(),
        })?;
        if t.shape != decl.shape {
            return Err(Error::ShapeMismatch(format!(
                "input `{name}` has shape {:?}, expected {:?}",
                t.shape, decl.shape
            )));
        }
    }
    for pl in plans {
        if pl.idle.cores_used().max(pl.active.cores_used()) > chip.num_cores {
            return Err(Error::PlanMismatch(format!(
                "plan for `{}` needs more cores than the chip has",
                pl.active.op.id
            )));
        }
    }
    let mut mem = vec![CoreState::new(chip.mem_per_core); chip.num_cores];
    let statics: Vec<Vec<usize>> = (0..n).map(|i| static_slots(graph, i)).collect::<Result<_>>()?;

    // Static tensors start resident in their idle layouts.
    let mut idle: Vec<Vec<Resident>> = Vec::with_capacity(n);
    for (i, pl) in plans.iter().enumerate() {
        let p = &pl.idle;
        let mut res = Vec::new();
        for &slot in &statics[i] {
            let t = &inputs[&p.op.slot(slot).name];
            let blocks: Vec<Option<Block>> = window_sets(p, slot)
                .into_iter()
                .map(|s| s.map(|s| Block::gather(s, t)))
                .collect();
            alloc_all(&mut mem, p.cores_used(), p.configs[slot].window_bytes())?;
            res.push(slot_resident(p, slot, blocks));
        }
        idle.push(res);
    }

    let mut parked: HashMap<String, (usize, Resident)> = HashMap::new();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let a = &plans[i].active;
        let op = &a.op;
        let cores = a.cores_used();
        let idle_bytes: u64 = statics[i].iter().map(|&s| plans[i].idle.configs[s].window_bytes()).sum();
        let active_bytes: u64 = statics[i].iter().map(|&s| a.configs[s].window_bytes()).sum();
        let peak = idle_bytes.max(active_bytes);

        // Promote in place: the static region grows to the larger layout
        // for the duration of the copy.
        alloc_all(&mut mem, cores, peak - idle_bytes)?;
        let mut incoming = Vec::new();
        let mut active_static = Vec::with_capacity(statics[i].len());
        for (k, &slot) in statics[i].iter().enumerate() {
            let (r, inc) = relayout(&idle[i][k], window_sets(a, slot))?;
            add_incoming(&mut incoming, &inc);
            active_static.push(r);
        }
        let promote_cycles = transfer_cost(chip, &incoming);
        free_all(&mut mem, cores, peak - active_bytes);

        // Bring parked intermediates into this operator's layout.
        let mut transition_cycles = 0;
        let mut moved: Vec<(usize, Resident)> = Vec::new();
        for slot in 0..op.inputs.len() {
            if statics[i].contains(&slot) {
                continue;
            }
            let name = &op.inputs[slot].name;
            alloc_all(&mut mem, cores, a.configs[slot].window_bytes())?;
            let (_, src) = parked.get(name).ok_or_else(|| {
                Error::PlanMismatch(format!("`{name}` is not available when `{}` runs", op.id))
            })?;
            let (r, inc) = relayout(src, window_sets(a, slot))?;
            transition_cycles += transfer_cost(chip, &inc);
            moved.push((slot, r));
            let last = graph.consumers(name).into_iter().max() == Some(i);
            if last && !graph.is_graph_output(name) {
                let (pc, r) = parked.remove(name).unwrap();
                for core in 0..pc {
                    mem[core].free(r.bytes(core));
                }
            }
        }

        let out = op.output_slot();
        let out_bytes = a.configs[out].window_bytes();
        alloc_all(&mut mem, cores, out_bytes + chip.shift_buffer)?;
        let mut blocks: Vec<Vec<Option<Block>>> = vec![vec![None; op.num_slots()]; cores];
        for (k, &slot) in statics[i].iter().enumerate() {
            for (core, b) in active_static[k].blocks.iter().enumerate().take(cores) {
                blocks[core][slot] = b.clone();
            }
        }
        for (slot, r) in &moved {
            for (core, b) in r.blocks.iter().enumerate().take(cores) {
                blocks[core][*slot] = b.clone();
            }
        }
        for (core, row) in blocks.iter_mut().enumerate() {
            row[out] = Some(Block::zeros(a.window_indices(out, &a.core_coords(core))));
        }
        let blocks: Vec<Vec<Block>> = blocks
            .into_iter()
            .map(|row| row.into_iter().map(|b| b.expect("every slot resident")).collect())
            .collect();
        let schedule = build_schedule(a);
        let mut m = Machine::with_blocks(a, chip, model, blocks);
        m.run(&schedule)?;
        let exec = m.stats;
        let out_blocks: Vec<Option<Block>> = m.blocks.into_iter().map(|mut row| Some(row.swap_remove(out))).collect();

        free_all(&mut mem, cores, chip.shift_buffer);
        for (slot, _) in &moved {
            free_all(&mut mem, cores, a.configs[*slot].window_bytes());
        }
        let out_name = &op.output.name;
        if graph.consumers(out_name).is_empty() && !graph.is_graph_output(out_name) {
            free_all(&mut mem, cores, out_bytes);
        } else {
            parked.insert(out_name.clone(), (cores, slot_resident(a, out, out_blocks)));
        }

        // Demote back to the idle layout.
        alloc_all(&mut mem, cores, peak - active_bytes)?;
        let mut incoming = Vec::new();
        let mut restored = Vec::with_capacity(statics[i].len());
        for (k, &slot) in statics[i].iter().enumerate() {
            let (r, inc) = relayout(&active_static[k], window_sets(&plans[i].idle, slot))?;
            add_incoming(&mut incoming, &inc);
            restored.push(r);
        }
        let demote_cycles = transfer_cost(chip, &incoming);
        free_all(&mut mem, cores, peak - idle_bytes);
        idle[i] = restored;

        records.push(OpSimRecord {
            op_id: op.id.clone(),
            promote_cycles,
            demote_cycles,
            transition_cycles,
            exec,
        });
    }

    let mut outputs = BTreeMap::new();
    for name in &graph.outputs {
        let decl = graph.tensor(name).unwrap();
        let (_, r) = parked.get(name).ok_or_else(|| Error::Undefined {
            kind: "graph output",
            name: name.clone(),
        })?;
        let mut t = DenseTensor::zeros(decl.dtype, decl.shape.clone());
        let mut seen = vec![false; t.len()];
        for b in r.blocks.iter().flatten() {
            scatter_block(b, &decl.shape, &mut t.data, &mut seen)
                .map_err(|_| Error::Verification(format!("replicas of `{name}` disagree")))?;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Verification(format!("`{name}` is not fully computed")));
        }
        outputs.insert(name.clone(), t);
    }
    let total_cycles = records.iter().map(OpSimRecord::total_cycles).sum();
    Ok((
        outputs,
        ModelStats {
            ops: records,
            total_cycles,
            high_water: mem.iter().map(|m| m.high_water).collect(),
        },
    ))
}
