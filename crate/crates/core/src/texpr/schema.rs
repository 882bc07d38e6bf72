//! JSON model format.
//!
//! ```json
//! {
//!   "axes": [{"name": "m", "extent": 3}, ...],
//!   "tensors": [{"name": "I", "dtype": "f32", "dims": ["b", "c", {"sum": ["h", "kh"]}]}],
//!   "operators": [{"id": "conv0", "output": "O", "inputs": ["I", "W"], "kind": "contraction"}],
//!   "graph_inputs": ["I", "W"],
//!   "graph_outputs": ["O"]
//! }
//! ```

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{
    Axis, AxisDecl, AxisKind, DType, DimSpec, Edge, ElementwiseFn, ExprKind, IndexMap, ModelGraph,
    Operator, ReductionOp, TensorDecl, TensorRef, TensorRole,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub axes: Vec<AxisDoc>,
    pub tensors: Vec<TensorDoc>,
    pub operators: Vec<OperatorDoc>,
    #[serde(default)]
    pub graph_inputs: Vec<String>,
    #[serde(default)]
    pub graph_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisDoc {
    pub name: String,
    pub extent: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDoc {
    pub name: String,
    #[serde(default)]
    pub dtype: DType,
    pub dims: Vec<DimDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimDoc {
    Axis(String),
    Sum {
        sum: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dilation: Option<i64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorDoc {
    pub id: String,
    pub output: String,
    pub inputs: Vec<String>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub func: Option<String>,
}

pub fn parse_model_str(text: &str) -> Result<ModelGraph> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    parse_model(&doc)
}

fn schema<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Schema(msg.into()))
}

/// Validate a model document and resolve it into a [`ModelGraph`].
pub fn parse_model(doc: &ModelDoc) -> Result<ModelGraph> {
    let mut axis_ids: HashMap<&str, usize> = HashMap::new();
    let mut axes = Vec::with_capacity(doc.axes.len());
    for ax in &doc.axes {
        if ax.extent < 1 {
            return Err(Error::NonPositiveExtent {
                axis: ax.name.clone(),
                extent: ax.extent,
            });
        }
        if axis_ids.insert(ax.name.as_str(), axes.len()).is_some() {
            return schema(format!("duplicate axis `{}`", ax.name));
        }
        axes.push(AxisDecl {
            name: ax.name.clone(),
            extent: ax.extent as usize,
        });
    }

    let mut tensors: HashMap<&str, (&TensorDoc, Vec<Vec<usize>>)> = HashMap::new();
    let mut decls = Vec::with_capacity(doc.tensors.len());
    for t in &doc.tensors {
        if t.dims.is_empty() {
            return schema(format!("tensor `{}` has no dimensions", t.name));
        }
        let mut dims = Vec::with_capacity(t.dims.len());
        let mut specs = Vec::with_capacity(t.dims.len());
        let mut seen = HashSet::new();
        for d in &t.dims {
            let (names, spec) = match d {
                DimDoc::Axis(name) => (vec![name.as_str()], DimSpec::Axis(name.clone())),
                DimDoc::Sum {
                    sum,
                    stride,
                    dilation,
                } => {
                    if stride.is_some_and(|s| s != 1) || dilation.is_some_and(|s| s != 1) {
                        return Err(Error::Unsupported(format!(
                            "tensor `{}`: strided or dilated compound dimensions",
                            t.name
                        )));
                    }
                    if sum.len() < 2 {
                        return schema(format!(
                            "tensor `{}`: compound dimension needs at least two axes",
                            t.name
                        ));
                    }
                    (
                        sum.iter().map(String::as_str).collect(),
                        DimSpec::Sum { sum: sum.clone() },
                    )
                }
            };
            let mut ids = Vec::with_capacity(names.len());
            for n in names {
                let id = *axis_ids.get(n).ok_or_else(|| Error::Undefined {
                    kind: "axis",
                    name: n.to_string(),
                })?;
                if !seen.insert(id) {
                    return Err(Error::Unsupported(format!(
                        "tensor `{}` indexes axis `{n}` more than once",
                        t.name
                    )));
                }
                ids.push(id);
            }
            dims.push(ids);
            specs.push(spec);
        }
        let shape = dims
            .iter()
            .map(|ids| ids.iter().map(|&a| axes[a].extent).sum::<usize>() + 1 - ids.len())
            .collect();
        if tensors.insert(t.name.as_str(), (t, dims)).is_some() {
            return schema(format!("duplicate tensor `{}`", t.name));
        }
        decls.push(TensorDecl {
            name: t.name.clone(),
            dtype: t.dtype,
            dims: specs,
            shape,
        });
    }

    for name in doc.graph_inputs.iter().chain(&doc.graph_outputs) {
        if !tensors.contains_key(name.as_str()) {
            return Err(Error::Undefined {
                kind: "tensor",
                name: name.clone(),
            });
        }
    }

    let mut ops = Vec::with_capacity(doc.operators.len());
    let mut ids = HashSet::new();
    for od in &doc.operators {
        if !ids.insert(od.id.as_str()) {
            return schema(format!("duplicate operator id `{}`", od.id));
        }
        ops.push(build_operator(od, &axes, &tensors)?);
    }

    let mut producer: HashMap<&str, usize> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        if doc.graph_inputs.contains(&op.output.name) {
            return schema(format!(
                "tensor `{}` is a graph input but produced by `{}`",
                op.output.name, op.id
            ));
        }
        if producer.insert(op.output.name.as_str(), i).is_some() {
            return schema(format!("tensor `{}` has more than one producer", op.output.name));
        }
    }
    for op in &ops {
        for t in &op.inputs {
            if !producer.contains_key(t.name.as_str()) && !doc.graph_inputs.contains(&t.name) {
                return Err(Error::Undefined {
                    kind: "producer for tensor",
                    name: t.name.clone(),
                });
            }
        }
    }
    for name in &doc.graph_outputs {
        if !producer.contains_key(name.as_str()) {
            return schema(format!("graph output `{name}` is not produced by any operator"));
        }
    }

    let order = topo_order(&ops, &producer)?;
    let operators: Vec<Operator> = order.iter().map(|&i| ops[i].clone()).collect();
    let mut edges = Vec::new();
    for (ci, op) in operators.iter().enumerate() {
        for t in &op.inputs {
            if let Some(pi) = operators.iter().position(|p| p.output.name == t.name) {
                edges.push(Edge {
                    tensor: t.name.clone(),
                    producer: pi,
                    consumer: ci,
                });
            }
        }
    }

    Ok(ModelGraph {
        axes,
        operators,
        edges,
        inputs: doc.graph_inputs.clone(),
        outputs: doc.graph_outputs.clone(),
        tensors: decls,
    })
}

fn build_operator(
    od: &OperatorDoc,
    axes: &[AxisDecl],
    tensors: &HashMap<&str, (&TensorDoc, Vec<Vec<usize>>)>,
) -> Result<Operator> {
    let kind = match od.kind.as_str() {
        "contraction" => {
            if od.func.is_some() {
                return schema(format!("operator `{}`: contraction takes no func", od.id));
            }
            ExprKind::Contraction
        }
        "elementwise" => {
            let func = match od.func.as_deref() {
                Some("copy") => ElementwiseFn::Copy,
                Some("relu") => ElementwiseFn::Relu,
                Some("add") => ElementwiseFn::Add,
                Some("sub") => ElementwiseFn::Sub,
                Some("mul") => ElementwiseFn::Mul,
                Some(other) => {
                    return Err(Error::Unsupported(format!(
                        "operator `{}`: elementwise function `{other}`",
                        od.id
                    )))
                }
                None => return schema(format!("operator `{}`: elementwise needs func", od.id)),
            };
            ExprKind::Elementwise(func)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "operator `{}`: kind `{other}` is not expressible as a tensor expression",
                od.id
            )))
        }
    };
    if od.inputs.is_empty() {
        return schema(format!("operator `{}` has no inputs", od.id));
    }
    if let ExprKind::Elementwise(f) = kind {
        if f.arity() != od.inputs.len() {
            return schema(format!(
                "operator `{}`: `{:?}` takes {} inputs, got {}",
                od.id,
                f,
                f.arity(),
                od.inputs.len()
            ));
        }
    }

    let lookup = |name: &str| {
        tensors.get(name).ok_or_else(|| Error::Undefined {
            kind: "tensor",
            name: name.to_string(),
        })
    };
    let mut names = HashSet::new();
    for n in od.inputs.iter().chain(std::iter::once(&od.output)) {
        lookup(n)?;
        if !names.insert(n.as_str()) {
            return schema(format!("operator `{}` names tensor `{n}` twice", od.id));
        }
    }

    // Operator axes: every referenced global axis, in declaration order.
    let mut used = vec![false; axes.len()];
    for n in od.inputs.iter().chain(std::iter::once(&od.output)) {
        for ids in &lookup(n)?.1 {
            for &a in ids {
                used[a] = true;
            }
        }
    }
    let global_ids: Vec<usize> = (0..axes.len()).filter(|&a| used[a]).collect();
    let local = |g: usize| global_ids.iter().position(|&x| x == g).unwrap();

    let (out_doc, out_dims) = lookup(&od.output)?;
    let mut in_output = vec![false; global_ids.len()];
    for ids in out_dims {
        if ids.len() > 1 {
            return Err(Error::Unsupported(format!(
                "operator `{}`: compound dimension in output `{}`",
                od.id, out_doc.name
            )));
        }
        in_output[local(ids[0])] = true;
    }
    let op_axes: Vec<Axis> = global_ids
        .iter()
        .enumerate()
        .map(|(l, &g)| Axis {
            name: axes[g].name.clone(),
            extent: axes[g].extent,
            kind: if in_output[l] {
                AxisKind::SpatialOutput
            } else {
                AxisKind::Reduction
            },
        })
        .collect();
    if matches!(kind, ExprKind::Elementwise(_)) && op_axes.iter().any(|a| a.kind == AxisKind::Reduction) {
        return schema(format!(
            "operator `{}`: elementwise inputs may only use output axes",
            od.id
        ));
    }

    let to_ref = |name: &str, role: TensorRole| -> Result<TensorRef> {
        let (doc, dims) = lookup(name)?;
        Ok(TensorRef {
            name: doc.name.clone(),
            role,
            dtype: doc.dtype,
            dims: dims
                .iter()
                .map(|ids| {
                    if ids.len() == 1 {
                        IndexMap::Axis(local(ids[0]))
                    } else {
                        IndexMap::Sum(ids.iter().map(|&g| local(g)).collect())
                    }
                })
                .collect(),
        })
    };

    Ok(Operator {
        id: od.id.clone(),
        kind,
        axes: op_axes,
        inputs: od
            .inputs
            .iter()
            .map(|n| to_ref(n, TensorRole::Input))
            .collect::<Result<_>>()?,
        output: to_ref(&od.output, TensorRole::Output)?,
        reduction: ReductionOp::Sum,
    })
}

/// Kahn's algorithm, breaking ties by document order.
fn topo_order(ops: &[Operator], producer: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let n = ops.len();
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (c, op) in ops.iter().enumerate() {
        for t in &op.inputs {
            if let Some(&p) = producer.get(t.name.as_str()) {
                indeg[c] += 1;
                succ[p].push(c);
            }
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !done[i] && indeg[i] == 0) else {
            let stuck = (0..n).find(|&i| !done[i]).unwrap();
            return Err(Error::Cyclic(ops[stuck].id.clone()));
        };
        done[next] = true;
        order.push(next);
        for &s in &succ[next] {
            indeg[s] -= 1;
        }
    }
    Ok(order)
}

/// Inverse of [`parse_model`].
pub fn serialize_model(graph: &ModelGraph) -> ModelDoc {
    ModelDoc {
        axes: graph
            .axes
            .iter()
            .map(|a| AxisDoc {
                name: a.name.clone(),
                extent: a.extent as i64,
            })
            .collect(),
        tensors: graph
            .tensors
            .iter()
            .map(|t| TensorDoc {
                name: t.name.clone(),
                dtype: t.dtype,
                dims: t
                    .dims
                    .iter()
                    .map(|d| match d {
                        DimSpec::Axis(n) => DimDoc::Axis(n.clone()),
                        DimSpec::Sum { sum } => DimDoc::Sum {
                            sum: sum.clone(),
                            stride: None,
                            dilation: None,
                        },
                    })
                    .collect(),
            })
            .collect(),
        operators: graph
            .operators
            .iter()
            .map(|op| {
                let (kind, func) = match op.kind {
                    ExprKind::Contraction => ("contraction", None),
                    ExprKind::Elementwise(f) => (
                        "elementwise",
                        Some(serde_json::to_value(f).unwrap().as_str().unwrap().to_string()),
                    ),
                };
                OperatorDoc {
                    id: op.id.clone(),
                    output: op.output.name.clone(),
                    inputs: op.inputs.iter().map(|t| t.name.clone()).collect(),
                    kind: kind.to_string(),
                    func,
                }
            })
            .collect(),
        graph_inputs: graph.inputs.clone(),
        graph_outputs: graph.outputs.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MATMUL3: &str = r#"{
        "axes": [{"name": "m", "extent": 3}, {"name": "k", "extent": 3}, {"name": "n", "extent": 3}],
        "tensors": [
            {"name": "A", "dims": ["m", "k"]},
            {"name": "B", "dims": ["k", "n"]},
            {"name": "C", "dims": ["m", "n"]}
        ],
        "operators": [{"id": "matmul0", "output": "C", "inputs": ["A", "B"], "kind": "contraction"}],
        "graph_inputs": ["A", "B"],
        "graph_outputs": ["C"]
    }"#;

    const CONV2D: &str = r#"{
        "axes": [
            {"name": "b", "extent": 2}, {"name": "c", "extent": 3}, {"name": "f", "extent": 4},
            {"name": "h", "extent": 6}, {"name": "w", "extent": 6},
            {"name": "kh", "extent": 3}, {"name": "kw", "extent": 3}
        ],
        "tensors": [
            {"name": "I", "dims": ["b", "c", {"sum": ["h", "kh"]}, {"sum": ["w", "kw"]}]},
            {"name": "W", "dims": ["f", "c", "kh", "kw"]},
            {"name": "O", "dims": ["b", "f", "h", "w"]}
        ],
        "operators": [{"id": "conv0", "output": "O", "inputs": ["I", "W"], "kind": "contraction"}],
        "graph_inputs": ["I", "W"],
        "graph_outputs": ["O"]
    }"#;

    #[test]
    fn matmul_axes_and_reduction() {
        let g = parse_model_str(MATMUL3).unwrap();
        let op = &g.operators[0];
        let names: Vec<_> = op.axes.iter().map(|a| (a.name.as_str(), a.extent)).collect();
        assert_eq!(names, [("m", 3), ("k", 3), ("n", 3)]);
        assert_eq!(op.axes[1].kind, AxisKind::Reduction);
        assert_eq!(op.axes[0].kind, AxisKind::SpatialOutput);
        assert_eq!(op.reduction_axes(), vec![1]);
    }

    #[test]
    fn conv2d_compound_dims() {
        let g = parse_model_str(CONV2D).unwrap();
        let op = &g.operators[0];
        let names: Vec<_> = op.axes.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["b", "c", "f", "h", "w", "kh", "kw"]);
        let i = &op.inputs[0];
        assert_eq!(i.dims[0], IndexMap::Axis(0));
        assert_eq!(i.dims[2], IndexMap::Sum(vec![3, 5]));
        assert_eq!(i.dims[3], IndexMap::Sum(vec![4, 6]));
        assert_eq!(g.tensor("I").unwrap().shape, vec![2, 3, 8, 8]);
        for r in ["c", "kh", "kw"] {
            assert_eq!(op.axes[op.axis_index(r).unwrap()].kind, AxisKind::Reduction);
        }
    }

    #[test]
    fn empty_operator_list_is_fine() {
        let g = parse_model_str(r#"{"axes": [], "tensors": [], "operators": []}"#).unwrap();
        assert!(g.operators.is_empty());
        assert!(g.edges.is_empty());
    }

    #[test]
    fn rejects_bad_documents() {
        let bad_extent = MATMUL3.replace(r#""extent": 3}, {"name": "k""#, r#""extent": 0}, {"name": "k""#);
        assert!(matches!(
            parse_model_str(&bad_extent),
            Err(Error::NonPositiveExtent { .. })
        ));
        let undefined_axis = MATMUL3.replace(r#"["m", "k"]"#, r#"["m", "q"]"#);
        assert!(matches!(
            parse_model_str(&undefined_axis),
            Err(Error::Undefined { kind: "axis", .. })
        ));
        let undefined_tensor = MATMUL3.replace(r#""inputs": ["A", "B"]"#, r#""inputs": ["A", "Z"]"#);
        assert!(matches!(
            parse_model_str(&undefined_tensor),
            Err(Error::Undefined { .. })
        ));
        let sort = MATMUL3.replace(r#""kind": "contraction""#, r#""kind": "sort""#);
        assert!(matches!(parse_model_str(&sort), Err(Error::Unsupported(_))));
        let strided = CONV2D.replace(r#"{"sum": ["h", "kh"]}"#, r#"{"sum": ["h", "kh"], "stride": 2}"#);
        assert!(matches!(parse_model_str(&strided), Err(Error::Unsupported(_))));
        assert!(matches!(parse_model_str("{"), Err(Error::Schema(_))));
        let extra_field = MATMUL3.replace(r#""graph_outputs""#, r#""bogus": 1, "graph_outputs""#);
        assert!(matches!(parse_model_str(&extra_field), Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_cycles() {
        let doc = r#"{
            "axes": [{"name": "m", "extent": 2}],
            "tensors": [{"name": "X", "dims": ["m"]}, {"name": "Y", "dims": ["m"]}],
            "operators": [
                {"id": "a", "output": "X", "inputs": ["Y"], "kind": "elementwise", "func": "relu"},
                {"id": "b", "output": "Y", "inputs": ["X"], "kind": "elementwise", "func": "relu"}
            ]
        }"#;
        assert!(matches!(parse_model_str(doc), Err(Error::Cyclic(_))));
    }

    #[test]
    fn topological_order_and_edges() {
        let doc = r#"{
            "axes": [{"name": "m", "extent": 2}],
            "tensors": [{"name": "X", "dims": ["m"]}, {"name": "Y", "dims": ["m"]}, {"name": "Z", "dims": ["m"]}],
            "operators": [
                {"id": "second", "output": "Z", "inputs": ["Y"], "kind": "elementwise", "func": "relu"},
                {"id": "first", "output": "Y", "inputs": ["X"], "kind": "elementwise", "func": "copy"}
            ],
            "graph_inputs": ["X"],
            "graph_outputs": ["Z"]
        }"#;
        let g = parse_model_str(doc).unwrap();
        assert_eq!(g.operators[0].id, "first");
        assert_eq!(g.operators[1].id, "second");
        assert_eq!(
            g.edges,
            vec![Edge {
                tensor: "Y".into(),
                producer: 0,
                consumer: 1
            }]
        );
    }

    #[test]
    fn serialize_round_trip() {
        for text in [MATMUL3, CONV2D] {
            let g = parse_model_str(text).unwrap();
            let again = parse_model(&serialize_model(&g)).unwrap();
            assert_eq!(g, again);
        }
    }
}
