//! Whole-model scheduling: idle/active plan pairs per operator under the
//! per-core memory budget, setup and layout-transition transfers, and
//! tensor liveness.
//!
//! Operators run one at a time. Between runs an operator keeps only its
//! static tensors (graph inputs it consumes) resident in its idle layout;
//! on activation they are re-laid-out in place to the active plan and
//! restored afterwards. Intermediate tensors stay parked in their
//! producer's output layout until their last consumer has copied them.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::costmodel::{estimate_setup, transfer_cycles, ChipConfig};
use crate::error::{Error, Result};
use crate::plangen::{ExecutionPlan, ParetoSet, PlanRecord};
use crate::rtensor::Partitioning;
use crate::texpr::ModelGraph;

/// Which elements of one tensor each core holds, as per-dimension index
/// lists in global tensor coordinates (padding included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residency {
    pub tensor: String,
    /// Unpadded extent per dimension.
    pub real_shape: Vec<usize>,
    pub elem_size: usize,
    pub cores: Vec<Option<Vec<Vec<usize>>>>,
}

impl Residency {
    /// Initial residency of `slot` under a plan.
    pub fn of(p: &Partitioning, slot: usize) -> Self {
        let t = p.op.slot(slot);
        let extents = p.op.extents();
        Residency {
            tensor: t.name.clone(),
            real_shape: t.shape(&extents),
            elem_size: t.element_size(),
            cores: (0..p.cores_used())
                .map(|core| Some(p.window_indices(slot, &p.core_coords(core))))
                .collect(),
        }
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    /// Unpadded elements held by `core`.
    pub fn real_elems(&self, core: usize) -> u64 {
        match self.cores.get(core) {
            Some(Some(sets)) => sets
                .iter()
                .zip(&self.real_shape)
                .map(|(s, &e)| s.iter().filter(|&&i| i < e).count() as u64)
                .product(),
            _ => 0,
        }
    }
}

fn real_overlap(a: &[Vec<usize>], b: &[Vec<usize>], real: &[usize]) -> u64 {
    a.iter()
        .zip(b)
        .zip(real)
        .map(|((x, y), &e)| x.iter().filter(|&&i| i < e && y.contains(&i)).count() as u64)
        .product()
}

/// Bytes each core must receive to go from `from` to `to`, counting only
/// unpadded elements not already held locally.
pub fn incoming_bytes(from: &Residency, to: &Residency) -> Vec<u64> {
    let n = from.num_cores().max(to.num_cores());
    (0..n)
        .map(|core| {
            let Some(Some(need)) = to.cores.get(core) else {
                return 0;
            };
            let needed = to.real_elems(core);
            let local = match from.cores.get(core) {
                Some(Some(have)) => real_overlap(need, have, &to.real_shape),
                _ => 0,
            };
            (needed - local) * to.elem_size as u64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub elems: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSet {
    pub tensor: String,
    /// Sorted by (dst, src).
    pub transfers: Vec<Transfer>,
    pub incoming_per_core: Vec<u64>,
}

impl TransferSet {
    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    pub fn max_incoming(&self) -> u64 {
        self.incoming_per_core.iter().copied().max().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }
}

pub(crate) fn flat_index(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

/// Lowest-numbered core holding each unpadded element.
fn holders(r: &Residency) -> Vec<Option<usize>> {
    let total: usize = r.real_shape.iter().product();
    let mut out = vec![None; total];
    for (core, sets) in r.cores.iter().enumerate() {
        let Some(sets) = sets else { continue };
        for_each_real(sets, &r.real_shape, |flat| {
            if out[flat].is_none() {
                out[flat] = Some(core);
            }
        });
    }
    out
}

fn for_each_real(sets: &[Vec<usize>], real: &[usize], mut f: impl FnMut(usize)) {
    let lists: Vec<Vec<usize>> = sets
        .iter()
        .zip(real)
        .map(|(s, &e)| s.iter().copied().filter(|&i| i < e).collect())
        .collect();
    if lists.iter().any(|l| l.is_empty()) {
        return;
    }
    let mut pos = vec![0usize; lists.len()];
    let mut idx = vec![0usize; lists.len()];
    loop {
        for d in 0..lists.len() {
            idx[d] = lists[d][pos[d]];
        }
        f(flat_index(&idx, real));
        let mut d = lists.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            pos[d] += 1;
            if pos[d] < lists[d].len() {
                break;
            }
            pos[d] = 0;
        }
    }
}

/// Element-level multicast set turning residency `from` into `to`: every
/// unpadded element a core needs and lacks comes from the lowest-numbered
/// core holding it under `from`.
pub fn diff_placements(from: &Residency, to: &Residency) -> Result<TransferSet> {
    if from.real_shape != to.real_shape {
        return Err(Error::PlanMismatch(format!(
            "tensor `{}` has different shapes in the two layouts",
            to.tensor
        )));
    }
    let owner = holders(from);
    let total_cores = from.num_cores().max(to.num_cores());
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut missing = None;
    for (dst, sets) in to.cores.iter().enumerate() {
        let Some(sets) = sets else { continue };
        let have = from.cores.get(dst).and_then(|s| s.as_ref());
        for_each_real(sets, &to.real_shape, |flat| {
            let local = have.is_some_and(|h| {
                let idx = crate::rtensor::grid_coords(flat, &to.real_shape);
                idx.iter().zip(h).all(|(i, s)| s.contains(i))
            });
            if local {
                return;
            }
            match owner[flat] {
                Some(src) => *counts.entry((dst, src)).or_default() += 1,
                None => missing = Some(flat),
            }
        });
    }
    if let Some(flat) = missing {
        return Err(Error::PlanMismatch(format!(
            "element {:?} of `{}` is not resident anywhere",
            crate::rtensor::grid_coords(flat, &to.real_shape),
            to.tensor
        )));
    }
    let mut incoming = vec![0u64; total_cores];
    let es = to.elem_size as u64;
    let transfers = counts
        .into_iter()
        .map(|((dst, src), elems)| {
            incoming[dst] += elems * es;
            Transfer {
                src,
                dst,
                elems,
                bytes: elems * es,
            }
        })
        .collect();
    Ok(TransferSet {
        tensor: to.tensor.clone(),
        transfers,
        incoming_per_core: incoming,
    })
}

/// Re-layout of `tensor` from its producer's output placement to its
/// consumer's input placement, with its cost.
pub fn layout_transition(
    producer: &Partitioning,
    consumer: &Partitioning,
    tensor: &str,
    chip: &ChipConfig,
) -> Result<(TransferSet, u64)> {
    let (from, to) = transition_residencies(producer, consumer, tensor)?;
    let set = diff_placements(&from, &to)?;
    let cycles = transfer_cycles(chip, set.max_incoming(), !set.is_empty());
    Ok((set, cycles))
}

/// Cost of [`layout_transition`] without materializing the transfer set.
pub fn layout_transition_cycles(
    producer: &Partitioning,
    consumer: &Partitioning,
    tensor: &str,
    chip: &ChipConfig,
) -> Result<u64> {
    let (from, to) = transition_residencies(producer, consumer, tensor)?;
    let incoming = incoming_bytes(&from, &to);
    let max = incoming.iter().copied().max().unwrap_or(0);
    Ok(transfer_cycles(chip, max, max > 0))
}

fn transition_residencies(
    producer: &Partitioning,
    consumer: &Partitioning,
    tensor: &str,
) -> Result<(Residency, Residency)> {
    if producer.op.output.name != tensor {
        return Err(Error::PlanMismatch(format!(
            "`{}` does not produce `{tensor}`",
            producer.op.id
        )));
    }
    let slot = consumer
        .op
        .inputs
        .iter()
        .position(|t| t.name == tensor)
        .ok_or_else(|| {
            Error::PlanMismatch(format!("`{}` does not consume `{tensor}`", consumer.op.id))
        })?;
    Ok((
        Residency::of(producer, producer.op.output_slot()),
        Residency::of(consumer, slot),
    ))
}

/// Slots of operator `op` holding graph inputs. Each graph input may feed
/// only one operator, which owns its memory.
pub fn static_slots(graph: &ModelGraph, op: usize) -> Result<Vec<usize>> {
    let o = &graph.operators[op];
    let mut slots = Vec::new();
    for (slot, t) in o.inputs.iter().enumerate() {
        if graph.is_graph_input(&t.name) {
            if graph.consumers(&t.name).len() > 1 {
                return Err(Error::Unsupported(format!(
                    "graph input `{}` feeds more than one operator",
                    t.name
                )));
            }
            slots.push(slot);
        }
    }
    Ok(slots)
}

/// Bytes per core of `slots` under a plan.
pub fn slot_bytes(plan: &ExecutionPlan, slots: &[usize]) -> u64 {
    slots.iter().map(|&s| plan.part.configs[s].window_bytes()).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLife {
    pub tensor: String,
    pub producer: usize,
    /// Last operator reading the tensor, if any.
    pub last_use: Option<usize>,
    pub graph_output: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivenessTable {
    pub tensors: Vec<TensorLife>,
    /// Per operator position: intermediate tensors parked while it runs.
    pub live: Vec<Vec<String>>,
    /// Per operator position: bytes per core of the parked tensors.
    pub live_bytes: Vec<u64>,
}

/// Def/last-use intervals of operator outputs over the sequential schedule.
/// A tensor is parked during operator `i` if it was produced earlier and
/// is read at or after `i`, or is a graph output. `parked[j]` gives the
/// per-core bytes of operator `j`'s output.
pub fn liveness(graph: &ModelGraph, parked: &[u64]) -> LivenessTable {
    let n = graph.operators.len();
    let tensors: Vec<TensorLife> = graph
        .operators
        .iter()
        .enumerate()
        .map(|(i, op)| TensorLife {
            tensor: op.output.name.clone(),
            producer: i,
            last_use: graph.consumers(&op.output.name).into_iter().max(),
            graph_output: graph.is_graph_output(&op.output.name),
        })
        .collect();
    let mut live = vec![Vec::new(); n];
    let mut live_bytes = vec![0u64; n];
    for t in &tensors {
        let end = if t.graph_output {
            n
        } else {
            t.last_use.map_or(t.producer + 1, |u| u + 1)
        };
        for i in t.producer + 1..end.min(n) {
            live[i].push(t.tensor.clone());
            live_bytes[i] += parked[t.producer];
        }
    }
    LivenessTable {
        tensors,
        live,
        live_bytes,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpAssignment {
    pub op_id: String,
    pub idle: PlanRecord,
    pub active: PlanRecord,
    pub static_slots: Vec<usize>,
    pub idle_bytes: u64,
    /// Promotion (idle → active) plus demotion (active → idle).
    pub setup_cycles: u64,
    pub promote_cycles: u64,
    pub demote_cycles: u64,
    pub exec_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub tensor: String,
    pub producer: String,
    pub consumer: String,
    pub cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub idle_mem: u64,
    /// `None` when some operator had no active plan that fits.
    pub total_time: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EndToEndPlan {
    pub ops: Vec<OpAssignment>,
    /// Pareto indices of each operator's idle and active plan.
    pub choice: Vec<(usize, usize)>,
    pub transitions: Vec<TransitionRecord>,
    pub idle_mem_size: u64,
    pub active_mem_budget: u64,
    pub total_time: u64,
    pub trace: Vec<TraceEntry>,
    /// Idle assignments evaluated by the search.
    pub evaluations: usize,
}

/// One evaluated idle assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    /// (idle, active) Pareto index per operator.
    pub choice: Vec<(usize, usize)>,
    pub setup: Vec<(u64, u64)>,
    pub transitions: Vec<u64>,
    pub idle_mem: u64,
    pub total_time: u64,
}

/// Precomputed state for idle/active selection.
pub struct Reconciler<'a> {
    graph: &'a ModelGraph,
    pareto: &'a [ParetoSet],
    chip: &'a ChipConfig,
    statics: Vec<Vec<usize>>,
    /// Per operator: distinct idle byte levels, ascending, with the Pareto
    /// index representing each.
    levels: Vec<Vec<(u64, usize)>>,
    /// Per operator: bytes reserved for parked intermediates while it runs.
    reserve: Vec<u64>,
    setup_cache: std::sync::Mutex<HashMap<(usize, usize, usize), (u64, u64)>>,
    transition_cache: std::sync::Mutex<HashMap<(usize, usize, usize), u64>>,
}

impl<'a> Reconciler<'a> {
    pub fn new(graph: &'a ModelGraph, pareto: &'a [ParetoSet], chip: &'a ChipConfig) -> Result<Self> {
        if pareto.len() != graph.operators.len() {
            return Err(Error::PlanMismatch(
                "one Pareto set per operator required".into(),
            ));
        }
        let mut statics = Vec::with_capacity(pareto.len());
        let mut levels = Vec::with_capacity(pareto.len());
        for (i, set) in pareto.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::NoFeasiblePlan(graph.operators[i].id.clone()));
            }
            let st = static_slots(graph, i)?;
            let mut lv: Vec<(u64, usize)> = Vec::new();
            for (k, p) in set.iter().enumerate() {
                let b = slot_bytes(p, &st);
                if !lv.iter().any(|&(x, _)| x == b) {
                    lv.push((b, k));
                }
            }
            lv.sort_by_key(|&(b, k)| (b, k));
            levels.push(lv);
            statics.push(st);
        }
        // Parked bytes are not known until actives are chosen; reserve the
        // largest output window any Pareto plan of the producer could park.
        let parked: Vec<u64> = pareto
            .iter()
            .map(|set| {
                set.iter()
                    .map(|p| p.part.configs[p.part.op.output_slot()].window_bytes())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let reserve = liveness(graph, &parked).live_bytes;
        Ok(Reconciler {
            graph,
            pareto,
            chip,
            statics,
            levels,
            reserve,
            setup_cache: Default::default(),
            transition_cache: Default::default(),
        })
    }

    pub fn levels(&self, op: usize) -> &[(u64, usize)] {
        &self.levels[op]
    }

    pub fn reserve(&self, op: usize) -> u64 {
        self.reserve[op]
    }

    fn setup(&self, op: usize, idle: usize, active: usize) -> Result<(u64, u64)> {
        if let Some(&v) = self.setup_cache.lock().unwrap().get(&(op, idle, active)) {
            return Ok(v);
        }
        let v = if idle == active || self.statics[op].is_empty() {
            (0, 0)
        } else {
            let i = &self.pareto[op][idle].part;
            let a = &self.pareto[op][active].part;
            (
                estimate_setup(i, a, &self.statics[op], self.chip)?,
                estimate_setup(a, i, &self.statics[op], self.chip)?,
            )
        };
        self.setup_cache.lock().unwrap().insert((op, idle, active), v);
        Ok(v)
    }

    /// Peak per-core bytes while `op` runs `active` with idle plan `idle`,
    /// given the other operators' idle bytes.
    pub fn active_peak(&self, op: usize, idle: usize, active: usize, others_idle: u64) -> u64 {
        let st = &self.statics[op];
        let i = slot_bytes(&self.pareto[op][idle], st);
        let a_plan = &self.pareto[op][active];
        let a = slot_bytes(a_plan, st);
        others_idle + i.max(a) + (a_plan.mem() - a) + self.reserve[op]
    }

    /// Fastest (setup + execution) active plan sharing the idle plan's
    /// partition factor that fits next to everything else.
    fn pick_active(&self, op: usize, idle: usize, others_idle: u64) -> Result<Option<(usize, (u64, u64))>> {
        let f_op = &self.pareto[op][idle].spec().f_op;
        let mut best: Option<(u64, usize, (u64, u64))> = None;
        for (k, p) in self.pareto[op].iter().enumerate() {
            if &p.spec().f_op != f_op {
                continue;
            }
            if self.active_peak(op, idle, k, others_idle) > self.chip.mem_per_core {
                continue;
            }
            let s = self.setup(op, idle, k)?;
            let t = p.time() + s.0 + s.1;
            if best.as_ref().is_none_or(|b| t < b.0) {
                best = Some((t, k, s));
            }
        }
        Ok(best.map(|(_, k, s)| (k, s)))
    }

    fn transition(&self, edge: usize, prod_active: usize, cons_active: usize) -> Result<u64> {
        let key = (edge, prod_active, cons_active);
        if let Some(&v) = self.transition_cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let e = &self.graph.edges[edge];
        let v = layout_transition_cycles(
            &self.pareto[e.producer][prod_active].part,
            &self.pareto[e.consumer][cons_active].part,
            &e.tensor,
            self.chip,
        )?;
        self.transition_cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Evaluate one idle assignment (level index per operator). `None` when
    /// it does not fit.
    pub fn evaluate(&self, level: &[usize]) -> Result<Option<Evaluation>> {
        let idle: Vec<usize> = level
            .iter()
            .enumerate()
            .map(|(i, &l)| self.levels[i][l].1)
            .collect();
        let idle_bytes: Vec<u64> = level
            .iter()
            .enumerate()
            .map(|(i, &l)| self.levels[i][l].0)
            .collect();
        let idle_mem: u64 = idle_bytes.iter().sum();
        if idle_mem > self.chip.mem_per_core {
            return Ok(None);
        }
        let mut choice = Vec::with_capacity(idle.len());
        let mut setup = Vec::with_capacity(idle.len());
        let mut total = 0u64;
        for i in 0..idle.len() {
            let others = idle_mem - idle_bytes[i];
            let Some((a, s)) = self.pick_active(i, idle[i], others)? else {
                return Ok(None);
            };
            total += s.0 + s.1 + self.pareto[i][a].time();
            choice.push((idle[i], a));
            setup.push(s);
        }
        let mut transitions = Vec::with_capacity(self.graph.edges.len());
        for (k, e) in self.graph.edges.iter().enumerate() {
            let c = self.transition(k, choice[e.producer].1, choice[e.consumer].1)?;
            total += c;
            transitions.push(c);
        }
        Ok(Some(Evaluation {
            choice,
            setup,
            transitions,
            idle_mem,
            total_time: total,
        }))
    }

    /// Greedy memory reconciliation.
    pub fn run(&self) -> Result<EndToEndPlan> {
        let n = self.graph.operators.len();
        let mut level = vec![0usize; n];
        let Some(first) = self.evaluate(&level)? else {
            return Err(Error::ModelDoesNotFit(
                "the minimum-memory idle assignment leaves no room to run every operator".into(),
            ));
        };
        let mut best = first.clone();
        let mut current = first;
        let mut trace = vec![TraceEntry {
            step: 0,
            idle_mem: current.idle_mem,
            total_time: Some(current.total_time),
        }];
        let mut evaluations = 1;
        loop {
            // Operator whose next idle level saves the most setup per byte.
            let mut pick: Option<(usize, f64)> = None;
            for i in 0..n {
                let next = level[i] + 1;
                if next >= self.levels[i].len() {
                    continue;
                }
                let (bytes, plan) = self.levels[i][next];
                let dm = bytes - self.levels[i][level[i]].0;
                let others = current.idle_mem - self.levels[i][level[i]].0;
                let Some((_, s)) = self.pick_active(i, plan, others)? else {
                    continue;
                };
                let cur_setup = current.setup[i].0 + current.setup[i].1;
                let ratio = (cur_setup as f64 - (s.0 + s.1) as f64) / dm as f64;
                if pick.is_none_or(|(_, r)| ratio > r) {
                    pick = Some((i, ratio));
                }
            }
            let Some((op, _)) = pick else { break };
            level[op] += 1;
            let idle_mem: u64 = (0..n).map(|i| self.levels[i][level[i]].0).sum();
            if idle_mem > self.chip.mem_per_core {
                break;
            }
            evaluations += 1;
            match self.evaluate(&level)? {
                Some(ev) => {
                    trace.push(TraceEntry {
                        step: trace.len(),
                        idle_mem: ev.idle_mem,
                        total_time: Some(ev.total_time),
                    });
                    if ev.total_time < best.total_time {
                        best = ev.clone();
                    }
                    current = ev;
                }
                None => {
                    trace.push(TraceEntry {
                        step: trace.len(),
                        idle_mem,
                        total_time: None,
                    });
                    break;
                }
            }
        }
        self.finish(best, trace, evaluations)
    }

    fn finish(&self, ev: Evaluation, trace: Vec<TraceEntry>, evaluations: usize) -> Result<EndToEndPlan> {
        let ops = ev
            .choice
            .iter()
            .enumerate()
            .map(|(i, &(idle, active))| {
                let ip = &self.pareto[i][idle];
                let ap = &self.pareto[i][active];
                OpAssignment {
                    op_id: self.graph.operators[i].id.clone(),
                    idle: ip.record(),
                    active: ap.record(),
                    static_slots: self.statics[i].clone(),
                    idle_bytes: slot_bytes(ip, &self.statics[i]),
                    setup_cycles: ev.setup[i].0 + ev.setup[i].1,
                    promote_cycles: ev.setup[i].0,
                    demote_cycles: ev.setup[i].1,
                    exec_cycles: ap.time(),
                }
            })
            .collect();
        let transitions = self
            .graph
            .edges
            .iter()
            .zip(&ev.transitions)
            .map(|(e, &cycles)| TransitionRecord {
                tensor: e.tensor.clone(),
                producer: self.graph.operators[e.producer].id.clone(),
                consumer: self.graph.operators[e.consumer].id.clone(),
                cycles,
            })
            .collect();
        Ok(EndToEndPlan {
            ops,
            choice: ev.choice,
            transitions,
            idle_mem_size: ev.idle_mem,
            active_mem_budget: self.chip.mem_per_core.saturating_sub(ev.idle_mem),
            total_time: ev.total_time,
            trace,
            evaluations,
        })
    }
}

/// Choose idle and active plans for every operator.
pub fn reconcile(graph: &ModelGraph, pareto: &[ParetoSet], chip: &ChipConfig) -> Result<EndToEndPlan> {
    Reconciler::new(graph, pareto, chip)?.run()
}
