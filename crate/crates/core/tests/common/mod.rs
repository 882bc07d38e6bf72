#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
#[allow(unused_imports)]
pub use shiftc::dense::random_inputs;
use shiftc::costmodel::{ChipConfig, ComputeModel};
use shiftc::plangen::{enumerate_plans, ExecutionPlan, SearchConstraints};
use shiftc::texpr::{parse_model_str, ModelGraph, Operator};

pub fn matmul(m: usize, k: usize, n: usize) -> ModelGraph {
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

/// O[o, n] = sum_{c, k} I[c, n + k] * W[o, c, k]
pub fn conv1d(o: usize, c: usize, n: usize, k: usize) -> ModelGraph {
    parse_model_str(&format!(
        r#"{{
        "axes": [{{"name": "o", "extent": {o}}}, {{"name": "c", "extent": {c}}}, {{"name": "n", "extent": {n}}}, {{"name": "k", "extent": {k}}}],
        "tensors": [
            {{"name": "I", "dims": ["c", {{"sum": ["n", "k"]}}]}},
            {{"name": "W", "dims": ["o", "c", "k"]}},
            {{"name": "O", "dims": ["o", "n"]}}
        ],
        "operators": [{{"id": "conv1d", "output": "O", "inputs": ["I", "W"], "kind": "contraction"}}],
        "graph_inputs": ["I", "W"], "graph_outputs": ["O"]
    }}"#
    ))
    .unwrap()
}

/// O[h, w] = sum_{c, kh, kw} I[c, h + kh, w + kw] * K[c, kh, kw]
pub fn conv2d(h: usize, w: usize, c: usize, kh: usize, kw: usize) -> ModelGraph {
    parse_model_str(&format!(
        r#"{{
        "axes": [{{"name": "h", "extent": {h}}}, {{"name": "w", "extent": {w}}}, {{"name": "c", "extent": {c}}},
                 {{"name": "kh", "extent": {kh}}}, {{"name": "kw", "extent": {kw}}}],
        "tensors": [
            {{"name": "I", "dims": ["c", {{"sum": ["h", "kh"]}}, {{"sum": ["w", "kw"]}}]}},
            {{"name": "K", "dims": ["c", "kh", "kw"]}},
            {{"name": "O", "dims": ["h", "w"]}}
        ],
        "operators": [{{"id": "conv2d", "output": "O", "inputs": ["I", "K"], "kind": "contraction"}}],
        "graph_inputs": ["I", "K"], "graph_outputs": ["O"]
    }}"#
    ))
    .unwrap()
}

pub fn elementwise(func: &str, m: usize, n: usize) -> ModelGraph {
    let binary = matches!(func, "add" | "sub" | "mul");
    let (tensors, inputs) = if binary {
        (
            r#"{"name": "X", "dims": ["m", "n"]}, {"name": "Y", "dims": ["m", "n"]},"#,
            r#"["X", "Y"]"#,
        )
    } else {
        (r#"{"name": "X", "dims": ["m", "n"]},"#, r#"["X"]"#)
    };
    parse_model_str(&format!(
        r#"{{
        "axes": [{{"name": "m", "extent": {m}}}, {{"name": "n", "extent": {n}}}],
        "tensors": [{tensors} {{"name": "Z", "dims": ["m", "n"]}}],
        "operators": [{{"id": "ew", "output": "Z", "inputs": {inputs}, "kind": "elementwise", "func": "{func}"}}],
        "graph_inputs": {inputs}, "graph_outputs": ["Z"]
    }}"#
    ))
    .unwrap()
}

/// A random single-operator model from the four families.
pub fn random_operator(rng: &mut impl Rng) -> ModelGraph {
    match rng.gen_range(0..4) {
        0 => matmul(rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)),
        1 => conv1d(
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=12),
            rng.gen_range(1..=3),
        ),
        2 => conv2d(
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        ),
        _ => {
            let f = ["copy", "relu", "add", "sub", "mul"][rng.gen_range(0..5)];
            elementwise(f, rng.gen_range(1..=12), rng.gen_range(1..=12))
        }
    }
}

pub fn toy_chip(cores: usize) -> ChipConfig {
    ChipConfig {
        num_cores: cores,
        ..ChipConfig::toy16()
    }
}

/// Constraints admitting every core count, padding and pace.
pub fn unconstrained() -> SearchConstraints {
    SearchConstraints {
        min_core_utilization: f64::MIN_POSITIVE,
        min_padding_ratio: f64::MIN_POSITIVE,
        search_rp: true,
        ..Default::default()
    }
}

pub fn all_plans(op: &Arc<Operator>, chip: &ChipConfig) -> Vec<ExecutionPlan> {
    enumerate_plans(op, chip, &unconstrained(), &ComputeModel::Rates)
}

/// Non-dominated plans by pairwise comparison.
pub fn brute_force_frontier(plans: &[ExecutionPlan]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = plans
        .iter()
        .filter(|p| {
            !plans.iter().any(|q| {
                q.mem() <= p.mem() && q.time() <= p.time() && (q.mem() < p.mem() || q.time() < p.time())
            })
        })
        .map(|p| (p.mem(), p.time()))
        .collect();
    out.sort();
    out.dedup();
    out
}
