//! Single-core nested-loop evaluation used as the correctness oracle.

use std::collections::HashMap;

use super::{ExprKind, ModelGraph, Operator};
use crate::dense::DenseTensor;
use crate::error::{Error, Result};

/// Evaluate one operator densely. Inputs are row-major `f64` buffers shaped
/// per the operator's tensor references; the output is returned the same way.
///
/// Iteration runs over every axis in lexicographic order, so each output
/// element accumulates its reduction terms in a fixed order.
pub fn execute_operator(op: &Operator, inputs: &[&[f64]]) -> Result<Vec<f64>> {
    let extents = op.extents();
    if inputs.len() != op.inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "operator `{}` takes {} inputs, got {}",
            op.id,
            op.inputs.len(),
            inputs.len()
        )));
    }
    let in_shapes: Vec<Vec<usize>> = op.inputs.iter().map(|t| t.shape(&extents)).collect();
    for ((t, shape), buf) in op.inputs.iter().zip(&in_shapes).zip(inputs) {
        let n: usize = shape.iter().product();
        if buf.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{}` expects {n} elements, got {}",
                t.name,
                buf.len()
            )));
        }
    }
    let out_shape = op.output.shape(&extents);
    let mut out = vec![0.0f64; out_shape.iter().product()];
    let in_strides: Vec<Vec<usize>> = in_shapes.iter().map(|s| row_major_strides(s)).collect();
    let out_strides = row_major_strides(&out_shape);

    if extents.contains(&0) {
        return Ok(out);
    }
    let mut idx = vec![0usize; extents.len()];
    let mut args = vec![0.0f64; inputs.len()];
    loop {
        for (i, t) in op.inputs.iter().enumerate() {
            let off: usize = t
                .dims
                .iter()
                .zip(&in_strides[i])
                .map(|(d, s)| d.index(&idx) * s)
                .sum();
            args[i] = inputs[i][off];
        }
        let o: usize = op
            .output
            .dims
            .iter()
            .zip(&out_strides)
            .map(|(d, s)| d.index(&idx) * s)
            .sum();
        match op.kind {
            ExprKind::Contraction => out[o] += args.iter().product::<f64>(),
            ExprKind::Elementwise(f) => out[o] = f.apply_f64(&args),
        }
        if !advance(&mut idx, &extents) {
            break;
        }
    }
    Ok(out)
}

/// Evaluate every operator of `graph` in topological order and return the
/// graph outputs. Accumulation is carried out in `f64`.
pub fn reference_execute(
    graph: &ModelGraph,
    inputs: &HashMap<String, DenseTensor>,
) -> Result<HashMap<String, DenseTensor>> {
    let mut env: HashMap<String, Vec<f64>> = HashMap::new();
    for name in &graph.inputs {
        let decl = graph.tensor(name).expect("validated graph input");
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
        env.insert(name.clone(), t.data.iter().map(|&v| v as f64).collect());
    }
    for op in &graph.operators {
        let args: Vec<&[f64]> = op
            .inputs
            .iter()
            .map(|t| env[&t.name].as_slice())
            .collect();
        let out = execute_operator(op, &args)?;
        env.insert(op.output.name.clone(), out);
    }
    let mut result = HashMap::new();
    for name in &graph.outputs {
        let decl = graph.tensor(name).unwrap();
        result.insert(
            name.clone(),
            DenseTensor::new(
                decl.dtype,
                decl.shape.clone(),
                env[name].iter().map(|&v| v as f32).collect(),
            )?,
        );
    }
    Ok(result)
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Odometer increment; returns false after the last index.
pub(crate) fn advance(idx: &mut [usize], extents: &[usize]) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < extents[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texpr::parse_model_str;

    fn conv1d_graph() -> ModelGraph {
        parse_model_str(
            r#"{
            "axes": [{"name": "n", "extent": 3}, {"name": "k", "extent": 2}],
            "tensors": [
                {"name": "I", "dims": [{"sum": ["n", "k"]}]},
                {"name": "C", "dims": ["k"]},
                {"name": "O", "dims": ["n"]}
            ],
            "operators": [{"id": "conv", "output": "O", "inputs": ["I", "C"], "kind": "contraction"}],
            "graph_inputs": ["I", "C"],
            "graph_outputs": ["O"]
        }"#,
        )
        .unwrap()
    }

    fn matmul(m: usize, k: usize, n: usize) -> ModelGraph {
        parse_model_str(&format!(
            r#"{{
            "axes": [{{"name": "m", "extent": {m}}}, {{"name": "k", "extent": {k}}}, {{"name": "n", "extent": {n}}}],
            "tensors": [{{"name": "A", "dims": ["m", "k"]}}, {{"name": "B", "dims": ["k", "n"]}}, {{"name": "C", "dims": ["m", "n"]}}],
            "operators": [{{"id": "mm", "output": "C", "inputs": ["A", "B"], "kind": "contraction"}}],
            "graph_inputs": ["A", "B"], "graph_outputs": ["C"]
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn matmul_hand_computed() {
        let g = matmul(2, 2, 2);
        let out = execute_operator(&g.operators[0], &[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]).unwrap();
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_matmul() {
        let g = matmul(2, 2, 2);
        let x = [0.5, -1.25, 3.0, 7.5];
        let out = execute_operator(&g.operators[0], &[&[1.0, 0.0, 0.0, 1.0], &x]).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn conv1d_valid_padding() {
        let g = conv1d_graph();
        let out = execute_operator(&g.operators[0], &[&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(out, vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn reference_execute_checks_shapes() {
        let g = matmul(2, 2, 2);
        let mut inputs = HashMap::new();
        inputs.insert("A".into(), DenseTensor::zeros(Default::default(), vec![2, 2]));
        inputs.insert("B".into(), DenseTensor::zeros(Default::default(), vec![3, 2]));
        assert!(matches!(
            reference_execute(&g, &inputs),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
