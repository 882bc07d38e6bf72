//! Tensor-expression IR.
//!
//! An [`Operator`] is an einsum-style expression over named axes: every
//! tensor dimension is indexed either by one axis or by a unit-stride sum
//! of axes (the `h+kh` dimension of a convolution input). Axes that do not
//! index the output are reduction axes and are summed over.

pub(crate) mod reference;
mod schema;

use serde::{Deserialize, Serialize};

pub use reference::{execute_operator, reference_execute};
pub use schema::{parse_model, parse_model_str, serialize_model, ModelDoc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisKind {
    SpatialOutput,
    Reduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub extent: usize,
    pub kind: AxisKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }
}

/// How one tensor dimension is indexed, in terms of operator-local axis ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndexMap {
    Axis(usize),
    /// Unit-stride sum of two or more axes.
    Sum(Vec<usize>),
}

impl IndexMap {
    pub fn terms(&self) -> &[usize] {
        match self {
            IndexMap::Axis(a) => std::slice::from_ref(a),
            IndexMap::Sum(terms) => terms,
        }
    }

    pub fn is_compound(&self) -> bool {
        matches!(self, IndexMap::Sum(_))
    }

    /// Extent of the dimension given per-axis extents.
    pub fn extent(&self, extents: &[usize]) -> usize {
        let terms = self.terms();
        terms.iter().map(|&a| extents[a]).sum::<usize>() + 1 - terms.len()
    }

    /// Index into the dimension for one assignment of axis indices.
    #[inline]
    pub fn index(&self, axis_index: &[usize]) -> usize {
        match self {
            IndexMap::Axis(a) => axis_index[*a],
            IndexMap::Sum(terms) => terms.iter().map(|&a| axis_index[a]).sum(),
        }
    }
}

/// Term of a compound dimension that represents it for partitioning: the
/// term with the largest extent, ties going to the earlier-declared axis.
pub fn dominant_axis(map: &IndexMap, axes: &[Axis]) -> usize {
    let mut best = map.terms()[0];
    for &a in &map.terms()[1..] {
        if axes[a].extent > axes[best].extent || (axes[a].extent == axes[best].extent && a < best) {
            best = a;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorRef {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<IndexMap>,
    pub dtype: DType,
}

impl TensorRef {
    pub fn element_size(&self) -> usize {
        self.dtype.size()
    }

    pub fn shape(&self, extents: &[usize]) -> Vec<usize> {
        self.dims.iter().map(|d| d.extent(extents)).collect()
    }

    /// True when any dimension is indexed by `axis` (including as a compound term).
    pub fn references(&self, axis: usize) -> bool {
        self.dims.iter().any(|d| d.terms().contains(&axis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementwiseFn {
    Copy,
    Relu,
    Add,
    Sub,
    Mul,
}

impl ElementwiseFn {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseFn::Copy | ElementwiseFn::Relu => 1,
            ElementwiseFn::Add | ElementwiseFn::Sub | ElementwiseFn::Mul => 2,
        }
    }

    #[inline]
    pub fn apply_f64(self, args: &[f64]) -> f64 {
        match self {
            ElementwiseFn::Copy => args[0],
            ElementwiseFn::Relu => args[0].max(0.0),
            ElementwiseFn::Add => args[0] + args[1],
            ElementwiseFn::Sub => args[0] - args[1],
            ElementwiseFn::Mul => args[0] * args[1],
        }
    }

    #[inline]
    pub fn apply_f32(self, args: &[f32]) -> f32 {
        match self {
            ElementwiseFn::Copy => args[0],
            ElementwiseFn::Relu => args[0].max(0.0),
            ElementwiseFn::Add => args[0] + args[1],
            ElementwiseFn::Sub => args[0] - args[1],
            ElementwiseFn::Mul => args[0] * args[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "func")]
pub enum ExprKind {
    /// `out[...] += in0[...] * in1[...] * ...` summed over reduction axes.
    Contraction,
    Elementwise(ElementwiseFn),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReductionOp {
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operator {
    pub id: String,
    pub kind: ExprKind,
    /// Operator-local axes in model declaration order.
    pub axes: Vec<Axis>,
    pub inputs: Vec<TensorRef>,
    pub output: TensorRef,
    pub reduction: ReductionOp,
}

impl Operator {
    pub fn extents(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.extent).collect()
    }

    pub fn num_slots(&self) -> usize {
        self.inputs.len() + 1
    }

    /// Tensor slot `i`: inputs first, output last.
    pub fn slot(&self, i: usize) -> &TensorRef {
        if i < self.inputs.len() {
            &self.inputs[i]
        } else {
            &self.output
        }
    }

    pub fn output_slot(&self) -> usize {
        self.inputs.len()
    }

    pub fn slots(&self) -> impl Iterator<Item = &TensorRef> {
        self.inputs.iter().chain(std::iter::once(&self.output))
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    pub fn reduction_axes(&self) -> Vec<usize> {
        (0..self.axes.len())
            .filter(|&a| self.axes[a].kind == AxisKind::Reduction)
            .collect()
    }

    /// Number of points in the full iteration space.
    pub fn iteration_points(&self) -> u128 {
        self.axes.iter().map(|a| a.extent as u128).product()
    }
}

/// Producer → consumer link through a named tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub tensor: String,
    pub producer: usize,
    pub consumer: usize,
}

/// Dimension of a declared tensor, by axis name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimSpec {
    Axis(String),
    Sum { sum: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<DimSpec>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisDecl {
    pub name: String,
    pub extent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub axes: Vec<AxisDecl>,
    /// Topologically ordered.
    pub operators: Vec<Operator>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tensors: Vec<TensorDecl>,
}

impl ModelGraph {
    pub fn operator(&self, id: &str) -> Option<(usize, &Operator)> {
        self.operators.iter().enumerate().find(|(_, op)| op.id == id)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_graph_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|n| n == name)
    }

    pub fn is_graph_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|n| n == name)
    }

    pub fn producer(&self, name: &str) -> Option<usize> {
        self.operators.iter().position(|op| op.output.name == name)
    }

    pub fn consumers(&self, name: &str) -> Vec<usize> {
        self.operators
            .iter()
            .enumerate()
            .filter(|(_, op)| op.inputs.iter().any(|t| t.name == name))
            .map(|(i, _)| i)
            .collect()
    }
}
