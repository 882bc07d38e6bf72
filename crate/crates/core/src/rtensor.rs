//! Partitioning algebra for compute-shift plans.
//!
//! An operator is split over a core grid of shape `F_op` (row-major, first
//! axis slowest). Every tensor inherits a spatial factor `f_s` from the axes
//! it references; cores that differ only on axes a tensor does not reference
//! share one sub-tensor. Those sharing cores are cut into rings of
//! `∏f_t` cores, each ring holding one copy of the sub-tensor split into
//! `f_t` windows that slide around the ring by `rp` elements per step.
//!
//! Window placement: along a rotated axis `a`, core `c` starts at
//! `t_a(c) = Σ_Y ρ_{Y,a}(c) · L_{Y,a} (mod S_a)` summed over the tensors `Y`
//! rotating on `a`, where `ρ` is the core's ring position and `L` the window
//! length. Every rotating tensor's window starts at that offset, so the
//! first `rp` elements of each window form the current sub-task tile.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::texpr::{dominant_axis, IndexMap, Operator};

/// Operator partition factor, one entry per operator axis.
pub type OpPartitionFactor = Vec<usize>;

/// The tuple that identifies a plan: `F_op`, per-slot `f_t`, per-axis `rp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanSpec {
    pub f_op: Vec<usize>,
    /// Indexed by slot (inputs first, output last), then by tensor dimension.
    pub f_t: Vec<Vec<usize>>,
    /// Shared rotating pace per operator axis; 0 when no tensor rotates on it.
    pub rp: Vec<usize>,
}

impl PlanSpec {
    pub fn id(&self, op: &Operator) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = format!("F[{}]", list(&self.f_op));
        for (i, ft) in self.f_t.iter().enumerate() {
            let _ = write!(s, ";{}[{}]", op.slot(i).name, list(ft));
        }
        let _ = write!(s, ";rp[{}]", list(&self.rp));
        s
    }
}

/// Spatial factors of one tensor slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialFactors {
    pub f_s: Vec<usize>,
    /// Number of cores holding the same sub-tensor.
    pub sharing: usize,
    /// Axes with `F > 1` that the tensor does not reference, ascending.
    pub missing_axes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RTensorConfig {
    pub slot: usize,
    pub name: String,
    pub f_s: Vec<usize>,
    pub f_t: Vec<usize>,
    /// Per dimension; 0 for dimensions that do not rotate.
    pub rp: Vec<usize>,
    pub sharing: usize,
    pub replication: usize,
    pub ring_size: usize,
    pub missing_axes: Vec<usize>,
    /// Sub-tensor extent per dimension, halo included.
    pub sub_shape: Vec<usize>,
    /// Extra elements carried by compound dimensions.
    pub halo: Vec<usize>,
    /// Partition (window) extent per dimension.
    pub window: Vec<usize>,
    pub elem_size: usize,
}

impl RTensorConfig {
    pub fn window_elems(&self) -> u64 {
        self.window.iter().map(|&w| w as u64).product()
    }

    pub fn window_bytes(&self) -> u64 {
        self.window_elems() * self.elem_size as u64
    }

    pub fn sub_bytes(&self) -> u64 {
        self.sub_shape.iter().map(|&w| w as u64).product::<u64>() * self.elem_size as u64
    }

    pub fn rotates(&self) -> bool {
        self.ring_size > 1
    }

    /// Bytes sent per core when this tensor shifts along dimension `d`.
    pub fn slab_bytes(&self, d: usize) -> u64 {
        let others: u64 = self
            .window
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != d)
            .map(|(_, &w)| w as u64)
            .product();
        others * self.rp[d] as u64 * self.elem_size as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopLevel {
    pub axis: usize,
    pub trips: usize,
}

/// A fully derived compute-shift partitioning of one operator.
#[derive(Debug, Clone)]
pub struct Partitioning {
    pub op: Arc<Operator>,
    pub spec: PlanSpec,
    /// Axis extents rounded up to a multiple of their factor.
    pub padded: Vec<usize>,
    /// Per-core sub-operator extent per axis.
    pub sub: Vec<usize>,
    pub configs: Vec<RTensorConfig>,
    /// Rotation loops, outermost first.
    pub loops: Vec<LoopLevel>,
    pub steps: usize,
}

/// How strictly to validate rotating paces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpCheck {
    /// Divisibility plus the alignment inequality.
    Full,
    /// Only `1 ≤ rp ≤ S`; steps round up. Used to run deliberately broken
    /// plans through the simulator.
    Structural,
}

pub fn padded_extent(extent: usize, factor: usize) -> usize {
    extent.div_ceil(factor) * factor
}

/// Axis driving the partitioning of one tensor dimension.
pub fn dim_axis(op: &Operator, map: &IndexMap) -> usize {
    match map {
        IndexMap::Axis(a) => *a,
        IndexMap::Sum(_) => dominant_axis(map, &op.axes),
    }
}

fn check_factors(op: &Operator, f_op: &[usize]) -> Result<()> {
    if f_op.len() != op.axes.len() {
        return Err(Error::InvalidFactor(format!(
            "operator `{}` has {} axes, factor has {} entries",
            op.id,
            op.axes.len(),
            f_op.len()
        )));
    }
    for (ax, &f) in op.axes.iter().zip(f_op) {
        if f == 0 || f > ax.extent {
            return Err(Error::InvalidFactor(format!(
                "factor {f} on axis `{}` of extent {}",
                ax.name, ax.extent
            )));
        }
    }
    Ok(())
}

/// `f_s` and sharing count for every slot (inputs first, output last).
pub fn derive_spatial_factors(op: &Operator, f_op: &[usize]) -> Result<Vec<SpatialFactors>> {
    check_factors(op, f_op)?;
    let total: usize = f_op.iter().product();
    op.slots()
        .map(|t| {
            let mut f_s = Vec::with_capacity(t.dims.len());
            for map in &t.dims {
                let dom = dim_axis(op, map);
                for &term in map.terms() {
                    if term != dom && f_op[term] > 1 {
                        return Err(Error::InvalidFactor(format!(
                            "axis `{}` is a minor term of a compound dimension of `{}` and cannot be split spatially",
                            op.axes[term].name, t.name
                        )));
                    }
                }
                f_s.push(f_op[dom]);
            }
            let missing_axes: Vec<usize> = (0..op.axes.len())
                .filter(|&a| f_op[a] > 1 && !t.references(a))
                .collect();
            let owned: usize = f_s.iter().product();
            Ok(SpatialFactors {
                f_s,
                sharing: total / owned,
                missing_axes,
            })
        })
        .collect()
}

/// Per-slot sub-tensor extents and halo, given per-axis sub extents.
fn sub_shape(op: &Operator, slot: usize, sub: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let t = op.slot(slot);
    let mut shape = Vec::with_capacity(t.dims.len());
    let mut halo = Vec::with_capacity(t.dims.len());
    for map in &t.dims {
        let dom = dim_axis(op, map);
        let h: usize = map
            .terms()
            .iter()
            .filter(|&&a| a != dom)
            .map(|&a| sub[a] - 1)
            .sum();
        shape.push(sub[dom] + h);
        halo.push(h);
    }
    (shape, halo)
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// All temporal factor vectors for a sub-tensor of `sub_shape` shared by
/// `sharing` cores: each entry divides its dimension, the product divides
/// `sharing`, and dimensions marked not rotatable stay at 1. Sorted
/// lexicographically; always contains the all-ones vector.
pub fn enumerate_temporal_factors(
    sub_shape: &[usize],
    rotatable: &[bool],
    sharing: usize,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(sub_shape.len());
    fn rec(
        d: usize,
        prod: usize,
        sub_shape: &[usize],
        rotatable: &[bool],
        sharing: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if d == sub_shape.len() {
            out.push(cur.clone());
            return;
        }
        let options = if rotatable[d] {
            divisors(sub_shape[d])
        } else {
            vec![1]
        };
        for f in options {
            if sharing % (prod * f) != 0 {
                continue;
            }
            cur.push(f);
            rec(d + 1, prod * f, sub_shape, rotatable, sharing, cur, out);
            cur.pop();
        }
    }
    rec(0, 1, sub_shape, rotatable, sharing, &mut cur, &mut out);
    out
}

/// The alignment inequality for one tensor: with sub-tensor extent `k`
/// split `f` ways, `rp ≤ k/(2f) + 1/2` or `rp = k/f`. Exact in integers.
pub fn rp_satisfies_bound(k: usize, f: usize, rp: usize) -> bool {
    2 * f * rp <= k + f || rp * f == k
}

/// Paces admissible on an axis of sub extent `k` rotated by tensors with
/// temporal factors `fts` along it, ascending.
pub fn valid_rps(k: usize, fts: &[usize]) -> Vec<usize> {
    let min_len = fts.iter().map(|&f| k / f).min().unwrap_or(k);
    (1..=min_len)
        .filter(|&rp| k % rp == 0 && fts.iter().all(|&f| rp_satisfies_bound(k, f, rp)))
        .collect()
}

/// For each axis, the temporal factors of the tensors rotating along it.
fn rotating_factors(op: &Operator, f_t: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut per_axis = vec![Vec::new(); op.axes.len()];
    for (slot, ft) in f_t.iter().enumerate() {
        for (d, &f) in ft.iter().enumerate() {
            if f > 1 {
                per_axis[dim_axis(op, &op.slot(slot).dims[d])].push(f);
            }
        }
    }
    per_axis
}

/// The designated pace: the smallest window length along each rotated axis,
/// stepping down to the largest admissible pace when that length violates
/// the alignment bound for another tensor on the same axis.
pub fn default_rp(op: &Operator, sub: &[usize], f_t: &[Vec<usize>]) -> Vec<usize> {
    rotating_factors(op, f_t)
        .iter()
        .enumerate()
        .map(|(a, fts)| {
            if fts.is_empty() {
                0
            } else {
                *valid_rps(sub[a], fts)
                    .last()
                    .expect("rp = 1 is always admissible")
            }
        })
        .collect()
}

/// Validate that the per-dimension paces in `configs` agree per axis and
/// satisfy divisibility and the alignment bound. Returns the shared pace
/// per axis (0 for axes nobody rotates on).
pub fn check_rp_alignment(
    op: &Operator,
    sub: &[usize],
    configs: &[RTensorConfig],
) -> Result<Vec<usize>> {
    let mut shared = vec![0usize; op.axes.len()];
    for c in configs {
        for (d, &f) in c.f_t.iter().enumerate() {
            let a = dim_axis(op, &op.slot(c.slot).dims[d]);
            let rp = c.rp[d];
            if f == 1 {
                if rp != 0 {
                    return Err(Error::RpAlignment(format!(
                        "`{}` does not rotate on dimension {d} but has pace {rp}",
                        c.name
                    )));
                }
                continue;
            }
            if shared[a] == 0 {
                shared[a] = rp;
            } else if shared[a] != rp {
                return Err(Error::RpAlignment(format!(
                    "tensors rotating on `{}` disagree on pace ({} vs {rp})",
                    op.axes[a].name, shared[a]
                )));
            }
            let k = sub[a];
            if rp == 0 || k % rp != 0 {
                return Err(Error::RpAlignment(format!(
                    "pace {rp} does not divide extent {k} of `{}` on `{}`",
                    c.name, op.axes[a].name
                )));
            }
            if !rp_satisfies_bound(k, f, rp) {
                return Err(Error::RpAlignment(format!(
                    "pace {rp} on `{}` violates the bound for `{}` (extent {k}, factor {f}): needs rp <= {k}/(2*{f}) + 1/2 or rp = {}",
                    op.axes[a].name,
                    c.name,
                    k / f
                )));
            }
        }
    }
    Ok(shared)
}

impl Partitioning {
    /// Derive and fully validate a plan.
    pub fn new(op: Arc<Operator>, spec: PlanSpec) -> Result<Self> {
        Self::build(op, spec, RpCheck::Full)
    }

    pub fn build(op: Arc<Operator>, spec: PlanSpec, check: RpCheck) -> Result<Self> {
        let spatial = derive_spatial_factors(&op, &spec.f_op)?;
        if spec.f_t.len() != op.num_slots() || spec.rp.len() != op.axes.len() {
            return Err(Error::InvalidFactor(format!(
                "plan for `{}` has wrong arity",
                op.id
            )));
        }
        let padded: Vec<usize> = op
            .axes
            .iter()
            .zip(&spec.f_op)
            .map(|(ax, &f)| padded_extent(ax.extent, f))
            .collect();
        let sub: Vec<usize> = padded.iter().zip(&spec.f_op).map(|(p, f)| p / f).collect();

        let mut configs = Vec::with_capacity(op.num_slots());
        for (slot, sf) in spatial.into_iter().enumerate() {
            let t = op.slot(slot);
            let f_t = &spec.f_t[slot];
            if f_t.len() != t.dims.len() {
                return Err(Error::InvalidFactor(format!(
                    "temporal factor of `{}` has {} entries for {} dimensions",
                    t.name,
                    f_t.len(),
                    t.dims.len()
                )));
            }
            let (sub_shape, halo) = sub_shape(&op, slot, &sub);
            let mut rp = vec![0; f_t.len()];
            let mut window = Vec::with_capacity(f_t.len());
            for (d, map) in t.dims.iter().enumerate() {
                let f = f_t[d];
                if f == 0 || sub_shape[d] % f != 0 {
                    return Err(Error::InvalidFactor(format!(
                        "temporal factor {f} does not divide extent {} of `{}`",
                        sub_shape[d], t.name
                    )));
                }
                if f > 1 {
                    if map.is_compound() {
                        return Err(Error::InvalidFactor(format!(
                            "compound dimension {d} of `{}` cannot rotate",
                            t.name
                        )));
                    }
                    rp[d] = spec.rp[dim_axis(&op, map)];
                }
                window.push(sub_shape[d] / f);
            }
            let ring_size: usize = f_t.iter().product();
            if sf.sharing % ring_size != 0 {
                return Err(Error::InvalidFactor(format!(
                    "ring size {ring_size} of `{}` does not divide its sharing count {}",
                    t.name, sf.sharing
                )));
            }
            configs.push(RTensorConfig {
                slot,
                name: t.name.clone(),
                f_s: sf.f_s,
                f_t: f_t.clone(),
                rp,
                sharing: sf.sharing,
                replication: sf.sharing / ring_size,
                ring_size,
                missing_axes: sf.missing_axes,
                sub_shape,
                halo,
                window,
                elem_size: t.element_size(),
            });
        }

        // Tensors rotating on one axis must have disjoint missing-axis sets;
        // otherwise their ring positions are not constant across each
        // other's rings and the windows stop tiling the sub-tensor.
        for a in 0..op.axes.len() {
            let on_axis: Vec<&RTensorConfig> = configs
                .iter()
                .filter(|c| c.rotates_on(&op, a))
                .collect();
            for (i, x) in on_axis.iter().enumerate() {
                for y in &on_axis[i + 1..] {
                    if x.missing_axes.iter().any(|m| y.missing_axes.contains(m)) {
                        return Err(Error::InvalidFactor(format!(
                            "`{}` and `{}` both rotate on `{}` but are shared over a common axis",
                            x.name, y.name, op.axes[a].name
                        )));
                    }
                }
            }
        }

        let per_axis = rotating_factors(&op, &spec.f_t);
        for a in 0..op.axes.len() {
            if per_axis[a].is_empty() && spec.rp[a] != 0 {
                return Err(Error::RpAlignment(format!(
                    "pace {} on `{}`, which nothing rotates on",
                    spec.rp[a], op.axes[a].name
                )));
            }
        }
        match check {
            RpCheck::Full => {
                check_rp_alignment(&op, &sub, &configs)?;
            }
            RpCheck::Structural => {
                for a in 0..op.axes.len() {
                    if !per_axis[a].is_empty() && (spec.rp[a] == 0 || spec.rp[a] > sub[a]) {
                        return Err(Error::RpAlignment(format!(
                            "pace {} out of range on `{}`",
                            spec.rp[a], op.axes[a].name
                        )));
                    }
                }
            }
        }

        // Loop order: the axis carrying more rotating bytes goes outside.
        let mut rotated: Vec<(usize, u64)> = (0..op.axes.len())
            .filter(|&a| !per_axis[a].is_empty())
            .map(|a| {
                let bytes = configs
                    .iter()
                    .filter(|c| c.rotates_on(&op, a))
                    .map(|c| c.sub_bytes())
                    .sum();
                (a, bytes)
            })
            .collect();
        rotated.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        let loops: Vec<LoopLevel> = rotated
            .iter()
            .map(|&(a, _)| LoopLevel {
                axis: a,
                trips: sub[a].div_ceil(spec.rp[a]),
            })
            .collect();
        let steps = loops.iter().map(|l| l.trips).product();

        Ok(Partitioning {
            op,
            spec,
            padded,
            sub,
            configs,
            loops,
            steps,
        })
    }

    pub fn id(&self) -> String {
        self.spec.id(&self.op)
    }

    pub fn cores_used(&self) -> usize {
        self.spec.f_op.iter().product()
    }

    pub fn is_rotated(&self, axis: usize) -> bool {
        self.spec.rp[axis] > 0
    }

    /// Sub-task tile extent per axis.
    pub fn tile(&self) -> Vec<usize> {
        (0..self.op.axes.len())
            .map(|a| {
                if self.is_rotated(a) {
                    self.spec.rp[a]
                } else {
                    self.sub[a]
                }
            })
            .collect()
    }

    pub fn core_coords(&self, core: usize) -> Vec<usize> {
        grid_coords(core, &self.spec.f_op)
    }

    pub fn core_id(&self, coords: &[usize]) -> usize {
        grid_index(coords, &self.spec.f_op)
    }

    /// Where core `coords` sits in the rings of `slot`.
    pub fn ring_slot(&self, slot: usize, coords: &[usize]) -> RingSlot {
        let c = &self.configs[slot];
        let g = c
            .missing_axes
            .iter()
            .fold(0, |acc, &a| acc * self.spec.f_op[a] + coords[a]);
        let ring = g / c.ring_size;
        let linear = g % c.ring_size;
        RingSlot {
            block: self.block_coords(slot, coords),
            ring,
            linear,
            position: grid_coords(linear, &c.f_t),
        }
    }

    /// Sub-tensor coordinates of `slot` on core `coords`.
    pub fn block_coords(&self, slot: usize, coords: &[usize]) -> Vec<usize> {
        self.op
            .slot(slot)
            .dims
            .iter()
            .map(|m| coords[dim_axis(&self.op, m)])
            .collect()
    }

    /// Core holding ring position `linear` of the same ring as `coords`.
    pub fn ring_member(&self, slot: usize, coords: &[usize], linear: usize) -> usize {
        let c = &self.configs[slot];
        let here = self.ring_slot(slot, coords);
        let mut g = here.ring * c.ring_size + linear;
        let mut out = coords.to_vec();
        for &a in c.missing_axes.iter().rev() {
            out[a] = g % self.spec.f_op[a];
            g /= self.spec.f_op[a];
        }
        self.core_id(&out)
    }

    /// Ring neighbour that core `coords` receives from when `slot` shifts
    /// along dimension `d`.
    pub fn upstream(&self, slot: usize, coords: &[usize], d: usize) -> usize {
        let c = &self.configs[slot];
        let mut pos = self.ring_slot(slot, coords).position;
        pos[d] = (pos[d] + 1) % c.f_t[d];
        self.ring_member(slot, coords, grid_index(&pos, &c.f_t))
    }

    /// Initial tile offset along every axis (0 for axes that do not rotate).
    pub fn tile_offset(&self, coords: &[usize]) -> Vec<usize> {
        let mut t = vec![0usize; self.op.axes.len()];
        for c in &self.configs {
            if !c.rotates() {
                continue;
            }
            let pos = self.ring_slot(c.slot, coords).position;
            for (d, &f) in c.f_t.iter().enumerate() {
                if f > 1 {
                    let a = dim_axis(&self.op, &self.op.slot(c.slot).dims[d]);
                    t[a] += pos[d] * c.window[d];
                }
            }
        }
        for (a, off) in t.iter_mut().enumerate() {
            *off %= self.sub[a];
        }
        t
    }

    /// Initial window start of `slot` on core `coords`, per dimension,
    /// relative to the sub-tensor origin.
    pub fn window_start(&self, slot: usize, coords: &[usize]) -> Vec<usize> {
        let t = self.tile_offset(coords);
        let c = &self.configs[slot];
        self.op
            .slot(slot)
            .dims
            .iter()
            .enumerate()
            .map(|(d, m)| {
                if c.f_t[d] > 1 {
                    t[dim_axis(&self.op, m)]
                } else {
                    0
                }
            })
            .collect()
    }

    /// Origin of the sub-tensor of `slot` on core `coords` in padded
    /// tensor coordinates.
    pub fn block_origin(&self, slot: usize, coords: &[usize]) -> Vec<usize> {
        self.op
            .slot(slot)
            .dims
            .iter()
            .map(|m| {
                let a = dim_axis(&self.op, m);
                coords[a] * self.sub[a]
            })
            .collect()
    }

    /// Padded extent of every dimension of `slot`.
    pub fn padded_shape(&self, slot: usize) -> Vec<usize> {
        self.op
            .slot(slot)
            .dims
            .iter()
            .map(|m| m.extent(&self.padded))
            .collect()
    }

    /// Global (padded) indices of the window of `slot` on core `coords`
    /// along each dimension, in window order.
    pub fn window_indices(&self, slot: usize, coords: &[usize]) -> Vec<Vec<usize>> {
        let c = &self.configs[slot];
        let origin = self.block_origin(slot, coords);
        let start = self.window_start(slot, coords);
        (0..c.window.len())
            .map(|d| {
                (0..c.window[d])
                    .map(|i| origin[d] + (start[d] + i) % c.sub_shape[d])
                    .collect()
            })
            .collect()
    }

    /// Ring layout of every slot.
    pub fn rings(&self) -> RingLayout {
        build_rings(self)
    }
}

impl RTensorConfig {
    pub fn rotates_on(&self, op: &Operator, axis: usize) -> bool {
        self.f_t
            .iter()
            .enumerate()
            .any(|(d, &f)| f > 1 && dim_axis(op, &op.slot(self.slot).dims[d]) == axis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingSlot {
    pub block: Vec<usize>,
    pub ring: usize,
    pub linear: usize,
    /// Position per dimension (radix `f_t`).
    pub position: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ring {
    /// Cores ordered by ring position.
    pub cores: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTensorRings {
    pub block: Vec<usize>,
    pub rings: Vec<Ring>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRings {
    pub tensor: String,
    /// Partition shape of each ring slot.
    pub partition: Vec<usize>,
    pub sub_tensors: Vec<SubTensorRings>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingLayout {
    pub tensors: Vec<TensorRings>,
}

/// Group the cores sharing each sub-tensor into rings, contiguously in
/// row-major grid order.
pub fn build_rings(p: &Partitioning) -> RingLayout {
    let cores = p.cores_used();
    let tensors = p
        .configs
        .iter()
        .map(|c| {
            let mut subs: Vec<SubTensorRings> = Vec::new();
            for core in 0..cores {
                let coords = p.core_coords(core);
                let rs = p.ring_slot(c.slot, &coords);
                let idx = match subs.iter().position(|s| s.block == rs.block) {
                    Some(i) => i,
                    None => {
                        subs.push(SubTensorRings {
                            block: rs.block.clone(),
                            rings: (0..c.replication)
                                .map(|_| Ring {
                                    cores: vec![usize::MAX; c.ring_size],
                                })
                                .collect(),
                        });
                        subs.len() - 1
                    }
                };
                subs[idx].rings[rs.ring].cores[rs.linear] = core;
            }
            subs.sort_by(|a, b| a.block.cmp(&b.block));
            TensorRings {
                tensor: c.name.clone(),
                partition: c.window.clone(),
                sub_tensors: subs,
            }
        })
        .collect();
    RingLayout { tensors }
}

pub fn grid_coords(mut index: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        out[d] = index % shape[d];
        index /= shape[d];
    }
    out
}

pub fn grid_index(coords: &[usize], shape: &[usize]) -> usize {
    coords.iter().zip(shape).fold(0, |acc, (&c, &s)| acc * s + c)
}
