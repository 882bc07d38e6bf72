//! Whole-model compilation and its on-disk artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! plan.json             model, chip, constraints and the end-to-end plan
//! trace.csv             reconciliation search trace
//! pareto/<op>.csv       per-operator frontier
//! schedules/<op>.txt    active-plan schedule dump
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chipsim::{build_schedule, OpPlans};
use crate::costmodel::{ChipConfig, ComputeModel};
use crate::error::{Error, Result};
use crate::interop::{reconcile, EndToEndPlan, TraceEntry, TransitionRecord};
use crate::plangen::{relax_and_retry, PlanRecord, SearchConstraints, SearchResult};
use crate::rtensor::Partitioning;
use crate::texpr::{parse_model, serialize_model, ModelDoc, ModelGraph};

/// Compiled model held in memory.
pub struct Compiled {
    pub graph: ModelGraph,
    pub chip: ChipConfig,
    pub constraints: SearchConstraints,
    pub cost_model: ComputeModel,
    pub searches: Vec<SearchResult>,
    pub plan: EndToEndPlan,
}

/// Search every operator's frontier and reconcile the model's memory.
pub fn compile(
    graph: &ModelGraph,
    chip: &ChipConfig,
    constraints: &SearchConstraints,
    cost_model: &ComputeModel,
) -> Result<Compiled> {
    chip.validate()?;
    constraints.validate()?;
    let searches = graph
        .operators
        .iter()
        .map(|op| relax_and_retry(&Arc::new(op.clone()), chip, constraints, cost_model))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<_> = searches.iter().map(|s| s.pareto.clone()).collect();
    let plan = reconcile(graph, &sets, chip)?;
    Ok(Compiled {
        graph: graph.clone(),
        chip: chip.clone(),
        constraints: *constraints,
        cost_model: cost_model.clone(),
        searches,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEntry {
    pub op_id: String,
    pub idle: PlanRecord,
    pub active: PlanRecord,
    pub static_slots: Vec<usize>,
    pub idle_bytes: u64,
    pub setup_cycles: u64,
    pub promote_cycles: u64,
    pub demote_cycles: u64,
    pub exec_cycles: u64,
    /// Constraints the frontier was searched under.
    pub constraints: SearchConstraints,
    pub relaxed: bool,
    pub evaluated: usize,
    pub pareto: Vec<PlanRecord>,
}

/// Contents of `plan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub model: ModelDoc,
    pub chip: ChipConfig,
    pub constraints: SearchConstraints,
    pub cost_model: ComputeModel,
    pub ops: Vec<OpEntry>,
    pub transitions: Vec<TransitionRecord>,
    pub idle_mem_size: u64,
    pub active_mem_budget: u64,
    pub total_time: u64,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

impl PlanFile {
    pub fn of(c: &Compiled) -> Self {
        let ops = c
            .plan
            .ops
            .iter()
            .zip(&c.searches)
            .map(|(a, s)| OpEntry {
                op_id: a.op_id.clone(),
                idle: a.idle.clone(),
                active: a.active.clone(),
                static_slots: a.static_slots.clone(),
                idle_bytes: a.idle_bytes,
                setup_cycles: a.setup_cycles,
                promote_cycles: a.promote_cycles,
                demote_cycles: a.demote_cycles,
                exec_cycles: a.exec_cycles,
                constraints: s.constraints,
                relaxed: s.relaxed,
                evaluated: s.evaluated,
                pareto: s.pareto.iter().map(|p| p.record()).collect(),
            })
            .collect();
        PlanFile {
            model: serialize_model(&c.graph),
            chip: c.chip.clone(),
            constraints: c.constraints,
            cost_model: c.cost_model.clone(),
            ops,
            transitions: c.plan.transitions.clone(),
            idle_mem_size: c.plan.idle_mem_size,
            active_mem_budget: c.plan.active_mem_budget,
            total_time: c.plan.total_time,
            evaluations: c.plan.evaluations,
            trace: c.plan.trace.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        parse_model(&self.model)
    }

    /// Rebuild and re-validate the idle/active partitionings.
    pub fn op_plans(&self, graph: &ModelGraph) -> Result<Vec<OpPlans>> {
        if self.ops.len() != graph.operators.len() {
            return Err(Error::PlanMismatch(format!(
                "plan covers {} operators, model has {}",
                self.ops.len(),
                graph.operators.len()
            )));
        }
        graph
            .operators
            .iter()
            .zip(&self.ops)
            .map(|(op, e)| {
                if e.op_id != op.id {
                    return Err(Error::PlanMismatch(format!(
                        "plan entry `{}` where `{}` was expected",
                        e.op_id, op.id
                    )));
                }
                let op = Arc::new(op.clone());
                Ok(OpPlans {
                    idle: Partitioning::new(op.clone(), e.idle.spec.clone())?,
                    active: Partitioning::new(op, e.active.spec.clone())?,
                })
            })
            .collect()
    }

    pub fn op(&self, id: &str) -> Result<&OpEntry> {
        self.ops.iter().find(|e| e.op_id == id).ok_or_else(|| Error::Unknown {
            kind: "operator",
            name: id.to_string(),
        })
    }
}

pub const PARETO_HEADER: [&str; 10] = [
    "op_id",
    "plan_id",
    "F_op",
    "mem_bytes_per_core",
    "compute_cycles",
    "comm_cycles",
    "sync_cycles",
    "total_cycles",
    "steps",
    "cores_used",
];

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

pub fn write_pareto_csv(w: impl Write, op_id: &str, plans: &[PlanRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PARETO_HEADER)?;
    for p in plans {
        out.write_record([
            op_id.to_string(),
            p.plan_id.clone(),
            join(&p.spec.f_op),
            p.mem_bytes_per_core.to_string(),
            p.cost.compute_cycles.to_string(),
            p.cost.comm_cycles.to_string(),
            p.cost.sync_cycles.to_string(),
            p.cost.total_cycles.to_string(),
            p.cost.steps.to_string(),
            p.cores_used.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace_csv(w: impl Write, trace: &[TraceEntry]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "idle_mem_bytes", "total_cycles"])?;
    for t in trace {
        out.write_record([
            t.step.to_string(),
            t.idle_mem.to_string(),
            t.total_time.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Write every artifact of `plan` under `dir`.
pub fn write_artifacts(dir: impl AsRef<Path>, plan: &PlanFile) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("pareto"))?;
    fs::create_dir_all(dir.join("schedules"))?;
    let mut json = serde_json::to_string_pretty(plan)?;
    json.push('\n');
    fs::write(dir.join("plan.json"), json)?;
    write_trace_csv(fs::File::create(dir.join("trace.csv"))?, &plan.trace)?;
    let graph = plan.graph()?;
    let pairs = plan.op_plans(&graph)?;
    for (e, pair) in plan.ops.iter().zip(&pairs) {
        write_pareto_csv(
            fs::File::create(dir.join("pareto").join(format!("{}.csv", e.op_id)))?,
            &e.op_id,
            &e.pareto,
        )?;
        let dump = build_schedule(&pair.active).dump(&pair.active);
        fs::write(dir.join("schedules").join(format!("{}.txt", e.op_id)), dump)?;
    }
    Ok(())
}

/// Human-readable summary of a plan file.
pub fn report(plan: &PlanFile) -> String {
    let mut s = String::new();
    writeln!(s, "chip {} ({} cores, {} B per core)", plan.chip.name, plan.chip.num_cores, plan.chip.mem_per_core).unwrap();
    writeln!(
        s,
        "{:<16} {:>8} {:>12} {:>12} {:>12} {:>8}  active plan",
        "op", "pareto", "idle_bytes", "setup", "exec", "relaxed"
    )
    .unwrap();
    for e in &plan.ops {
        writeln!(
            s,
            "{:<16} {:>8} {:>12} {:>12} {:>12} {:>8}  {}",
            e.op_id,
            e.pareto.len(),
            e.idle_bytes,
            e.setup_cycles,
            e.exec_cycles,
            e.relaxed,
            e.active.plan_id
        )
        .unwrap();
    }
    let transitions: u64 = plan.transitions.iter().map(|t| t.cycles).sum();
    writeln!(s, "layout transitions {transitions} cycles").unwrap();
    writeln!(s, "idle memory {} B, active budget {} B", plan.idle_mem_size, plan.active_mem_budget).unwrap();
    writeln!(s, "search evaluated {} idle assignments", plan.evaluations).unwrap();
    writeln!(s, "total {} cycles", plan.total_time).unwrap();
    s
}
