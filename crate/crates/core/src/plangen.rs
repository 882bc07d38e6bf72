//! Intra-operator plan search: enumerate partition factors under the
//! parallelism and padding constraints, expand temporal factors and paces,
//! price every candidate and keep the (memory, latency) Pareto frontier.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{estimate, footprint, ChipConfig, ComputeModel, CostEstimate, MemoryFootprint};
use crate::error::{Error, Result};
use crate::rtensor::{
    default_rp, dim_axis, enumerate_temporal_factors, padded_extent, valid_rps, Partitioning,
    PlanSpec,
};
use crate::texpr::Operator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    #[default]
    None,
    IterativeDoubling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConstraints {
    /// Fraction of the usable cores a plan must occupy.
    pub min_core_utilization: f64,
    /// Lower bound on original/padded extent, per axis.
    pub min_padding_ratio: f64,
    pub relaxation: Relaxation,
    /// Enumerate every admissible pace instead of the default one.
    pub search_rp: bool,
}

impl Default for SearchConstraints {
    fn default() -> Self {
        SearchConstraints {
            min_core_utilization: 0.9,
            min_padding_ratio: 0.75,
            relaxation: Relaxation::None,
            search_rp: false,
        }
    }
}

impl SearchConstraints {
    pub fn validate(&self) -> Result<()> {
        let in_range = |x: f64| x > 0.0 && x <= 1.0;
        if !in_range(self.min_core_utilization) || !in_range(self.min_padding_ratio) {
            return Err(Error::Schema(
                "constraint fractions must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub part: Partitioning,
    pub footprint: MemoryFootprint,
    pub cost: CostEstimate,
    /// Found only after relaxing the search constraints.
    pub relaxed: bool,
}

impl ExecutionPlan {
    pub fn new(part: Partitioning, chip: &ChipConfig, model: &ComputeModel) -> Self {
        let footprint = footprint(&part, chip);
        let cost = estimate(&part, chip, model);
        ExecutionPlan {
            part,
            footprint,
            cost,
            relaxed: false,
        }
    }

    pub fn id(&self) -> String {
        self.part.id()
    }

    pub fn spec(&self) -> &PlanSpec {
        &self.part.spec
    }

    pub fn mem(&self) -> u64 {
        self.footprint.total
    }

    pub fn time(&self) -> u64 {
        self.cost.total_cycles
    }

    pub fn cores_used(&self) -> usize {
        self.part.cores_used()
    }

    pub fn record(&self) -> PlanRecord {
        PlanRecord {
            plan_id: self.id(),
            spec: self.spec().clone(),
            mem_bytes_per_core: self.mem(),
            cost: self.cost,
            cores_used: self.cores_used(),
            relaxed: self.relaxed,
        }
    }
}

/// Serializable summary of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan_id: String,
    pub spec: PlanSpec,
    pub mem_bytes_per_core: u64,
    pub cost: CostEstimate,
    pub cores_used: usize,
    pub relaxed: bool,
}

/// Plans sorted by footprint ascending with strictly decreasing latency.
pub type ParetoSet = Vec<ExecutionPlan>;

/// Largest useful core count: every axis split down to single elements.
pub fn max_parallelism(op: &Operator) -> u128 {
    op.axes.iter().map(|a| a.extent as u128).product()
}

/// Axes that appear as a minor term of some compound dimension; they are
/// never split spatially.
fn minor_axes(op: &Operator) -> Vec<bool> {
    let mut minor = vec![false; op.axes.len()];
    for t in op.slots() {
        for m in &t.dims {
            if m.is_compound() {
                let dom = dim_axis(op, m);
                for &a in m.terms() {
                    if a != dom {
                        minor[a] = true;
                    }
                }
            }
        }
    }
    minor
}

pub fn padding_ratio(extent: usize, factor: usize) -> f64 {
    extent as f64 / padded_extent(extent, factor) as f64
}

/// Does a core count pass the parallelism constraint?
pub fn utilization_ok(cores: usize, target: usize, min_util: f64) -> bool {
    // "At least u" is read as "idle fraction strictly below 1 - u".
    cores == target || cores as f64 > min_util * target as f64
}

/// All partition factors within the core budget that pass the parallelism
/// and padding constraints, in lexicographic order.
pub fn enumerate_fop(op: &Operator, chip: &ChipConfig, c: &SearchConstraints) -> Vec<Vec<usize>> {
    let target = max_parallelism(op).min(chip.num_cores as u128) as usize;
    let minor = minor_axes(op);
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(op.axes.len());
    fn rec(
        a: usize,
        prod: usize,
        op: &Operator,
        minor: &[bool],
        cores: usize,
        target: usize,
        c: &SearchConstraints,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if a == op.axes.len() {
            if utilization_ok(prod, target, c.min_core_utilization) {
                out.push(cur.clone());
            }
            return;
        }
        let extent = op.axes[a].extent;
        let max_f = if minor[a] { 1 } else { extent.min(cores / prod) };
        for f in 1..=max_f {
            if padding_ratio(extent, f) < c.min_padding_ratio {
                continue;
            }
            cur.push(f);
            rec(a + 1, prod * f, op, minor, cores, target, c, cur, out);
            cur.pop();
        }
    }
    rec(0, 1, op, &minor, chip.num_cores, target, c, &mut cur, &mut out);
    out
}

/// Every valid plan for one partition factor that fits in core memory.
pub fn plans_for_fop(
    op: &Arc<Operator>,
    f_op: &[usize],
    chip: &ChipConfig,
    model: &ComputeModel,
    search_rp: bool,
) -> Vec<ExecutionPlan> {
    let Ok(spatial) = crate::rtensor::derive_spatial_factors(op, f_op) else {
        return Vec::new();
    };
    let sub: Vec<usize> = op
        .axes
        .iter()
        .zip(f_op)
        .map(|(ax, &f)| padded_extent(ax.extent, f) / f)
        .collect();

    // Temporal factor options per slot; only shared tensors may rotate.
    let options: Vec<Vec<Vec<usize>>> = spatial
        .iter()
        .enumerate()
        .map(|(slot, sf)| {
            let t = op.slot(slot);
            if sf.sharing == 1 {
                return vec![vec![1; t.dims.len()]];
            }
            let shape: Vec<usize> = t
                .dims
                .iter()
                .map(|m| {
                    let dom = dim_axis(op, m);
                    sub[dom]
                        + m.terms()
                            .iter()
                            .filter(|&&x| x != dom)
                            .map(|&x| sub[x] - 1)
                            .sum::<usize>()
                })
                .collect();
            let rotatable: Vec<bool> = t.dims.iter().map(|m| !m.is_compound()).collect();
            enumerate_temporal_factors(&shape, &rotatable, sf.sharing)
        })
        .collect();

    let mut plans = Vec::new();
    let mut choice = vec![0usize; options.len()];
    loop {
        let f_t: Vec<Vec<usize>> = choice
            .iter()
            .enumerate()
            .map(|(s, &i)| options[s][i].clone())
            .collect();
        for rp in rp_choices(op, &sub, &f_t, search_rp) {
            let spec = PlanSpec {
                f_op: f_op.to_vec(),
                f_t: f_t.clone(),
                rp,
            };
            if let Ok(part) = Partitioning::new(op.clone(), spec) {
                let plan = ExecutionPlan::new(part, chip, model);
                if plan.mem() <= chip.mem_per_core {
                    plans.push(plan);
                }
            }
        }
        // Odometer over the option lists.
        let mut s = options.len();
        loop {
            if s == 0 {
                return plans;
            }
            s -= 1;
            choice[s] += 1;
            if choice[s] < options[s].len() {
                break;
            }
            choice[s] = 0;
        }
    }
}

fn rp_choices(op: &Operator, sub: &[usize], f_t: &[Vec<usize>], search: bool) -> Vec<Vec<usize>> {
    if !search {
        return vec![default_rp(op, sub, f_t)];
    }
    let mut per_axis: Vec<Vec<usize>> = vec![Vec::new(); op.axes.len()];
    for (slot, ft) in f_t.iter().enumerate() {
        for (d, &f) in ft.iter().enumerate() {
            if f > 1 {
                per_axis[dim_axis(op, &op.slot(slot).dims[d])].push(f);
            }
        }
    }
    let options: Vec<Vec<usize>> = per_axis
        .iter()
        .enumerate()
        .map(|(a, fts)| {
            if fts.is_empty() {
                vec![0]
            } else {
                valid_rps(sub[a], fts)
            }
        })
        .collect();
    let mut out = vec![Vec::new()];
    for opts in &options {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                opts.iter().map(move |&r| {
                    let mut v = prefix.clone();
                    v.push(r);
                    v
                })
            })
            .collect();
    }
    out
}

/// All constrained plans that fit in memory, ordered by plan identity.
pub fn enumerate_plans(
    op: &Arc<Operator>,
    chip: &ChipConfig,
    c: &SearchConstraints,
    model: &ComputeModel,
) -> Vec<ExecutionPlan> {
    let fops = enumerate_fop(op, chip, c);
    let mut plans: Vec<ExecutionPlan> = fops
        .par_iter()
        .flat_map_iter(|f| plans_for_fop(op, f, chip, model, c.search_rp))
        .collect();
    plans.sort_by(|a, b| a.spec().cmp(b.spec()));
    plans
}

/// Keep exactly the plans not dominated in (footprint, latency). Among
/// plans equal on both, the one with the smallest identity survives.
pub fn pareto_filter(mut plans: Vec<ExecutionPlan>) -> ParetoSet {
    plans.sort_by(|a, b| {
        a.mem()
            .cmp(&b.mem())
            .then(a.time().cmp(&b.time()))
            .then_with(|| a.spec().cmp(b.spec()))
    });
    let mut out: ParetoSet = Vec::new();
    for p in plans {
        if out.last().is_none_or(|best| p.time() < best.time()) {
            out.push(p);
        }
    }
    out
}

/// Outcome of a plan search.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub pareto: ParetoSet,
    /// Constraints that produced the result (after any relaxation).
    pub constraints: SearchConstraints,
    pub relaxed: bool,
    /// Candidate plans priced.
    pub evaluated: usize,
}

/// Frontier of the constrained plan space, reduced per partition factor in
/// parallel and merged deterministically.
pub fn search_pareto(
    op: &Arc<Operator>,
    chip: &ChipConfig,
    c: &SearchConstraints,
    model: &ComputeModel,
) -> (ParetoSet, usize) {
    let fops = enumerate_fop(op, chip, c);
    let partial: Vec<(ParetoSet, usize)> = fops
        .par_iter()
        .map(|f| {
            let plans = plans_for_fop(op, f, chip, model, c.search_rp);
            let n = plans.len();
            (pareto_filter(plans), n)
        })
        .collect();
    let evaluated = partial.iter().map(|(_, n)| n).sum();
    let merged = pareto_filter(partial.into_iter().flat_map(|(p, _)| p).collect());
    (merged, evaluated)
}

/// Search, loosening the constraints when nothing qualifies: rounds
/// alternately halve the utilization bound and the padding bound until a
/// plan appears or both reach their floors (any core count; ratio 0.25).
pub fn relax_and_retry(
    op: &Arc<Operator>,
    chip: &ChipConfig,
    c: &SearchConstraints,
    model: &ComputeModel,
) -> Result<SearchResult> {
    c.validate()?;
    let (pareto, evaluated) = search_pareto(op, chip, c, model);
    if !pareto.is_empty() || c.relaxation == Relaxation::None {
        if pareto.is_empty() {
            return Err(Error::NoFeasiblePlan(op.id.clone()));
        }
        return Ok(SearchResult {
            pareto,
            constraints: *c,
            relaxed: false,
            evaluated,
        });
    }
    let target = max_parallelism(op).min(chip.num_cores as u128) as f64;
    let mut cur = *c;
    let mut total = evaluated;
    let mut round = 0usize;
    loop {
        let util_floor = cur.min_core_utilization * target <= 1.0;
        let pad_floor = cur.min_padding_ratio <= 0.25;
        if util_floor && pad_floor {
            return Err(Error::NoFeasiblePlan(op.id.clone()));
        }
        let relax_util = if util_floor {
            false
        } else if pad_floor {
            true
        } else {
            round % 2 == 0
        };
        if relax_util {
            cur.min_core_utilization /= 2.0;
        } else {
            cur.min_padding_ratio = (cur.min_padding_ratio / 2.0).max(0.25);
        }
        round += 1;
        let (mut pareto, n) = search_pareto(op, chip, &cur, model);
        total += n;
        if !pareto.is_empty() {
            for p in &mut pareto {
                p.relaxed = true;
            }
            return Ok(SearchResult {
                pareto,
                constraints: cur,
                relaxed: true,
                evaluated: total,
            });
        }
    }
}
