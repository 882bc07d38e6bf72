//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use shiftc::artifacts::{compile, write_artifacts, PlanFile};
use shiftc::chipsim::{build_schedule, place, run_plan, simulate_model, OpPlans, Phase};
use shiftc::costmodel::{estimate, footprint, ChipConfig, ComputeModel};
use shiftc::dense::{max_relative_error, DenseTensor};
use shiftc::interop::{reconcile, Reconciler};
use shiftc::plangen::{enumerate_fop, padding_ratio, pareto_filter, search_pareto, ParetoSet, SearchConstraints};
use shiftc::rtensor::{padded_extent, valid_rps, Partitioning, PlanSpec, RpCheck};
use shiftc::texpr::{parse_model_str, reference_execute, ModelGraph, Operator};
use shiftc::Error;

use common::*;

fn spec(f_op: &[usize], f_t: &[&[usize]], rp: &[usize]) -> PlanSpec {
    PlanSpec {
        f_op: f_op.to_vec(),
        f_t: f_t.iter().map(|v| v.to_vec()).collect(),
        rp: rp.to_vec(),
    }
}

fn op0(g: &ModelGraph) -> Arc<Operator> {
    Arc::new(g.operators[0].clone())
}

/// Simulate one plan on seeded inputs; returns the relative error against
/// the dense reference.
fn oracle_error(g: &ModelGraph, p: &Partitioning, chip: &ChipConfig, seed: u64) -> f64 {
    let inputs = random_inputs(g, seed);
    let args: Vec<&DenseTensor> = p.op.inputs.iter().map(|t| &inputs[&t.name]).collect();
    let (out, _) = run_plan(p, chip, &ComputeModel::Rates, &args).unwrap();
    let reference = reference_execute(g, &inputs).unwrap();
    max_relative_error(&out, &reference[&p.op.output.name]).unwrap()
}

fn cannon_emergence() -> String {
    let start = Instant::now();
    let g = matmul(3, 3, 3);
    let chip = toy_chip(9);
    let p = Partitioning::new(op0(&g), spec(&[3, 1, 3], &[&[1, 3], &[3, 1], &[1, 1]], &[0, 1, 0])).unwrap();
    let placement = place(&p, &chip).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let core = p.core_id(&[i, 0, j]);
            assert_eq!(placement.indices(&p, core, 0), vec![vec![i], vec![(i + j) % 3]]);
            assert_eq!(placement.indices(&p, core, 1), vec![vec![(i + j) % 3], vec![j]]);
            assert_eq!(placement.indices(&p, core, 2), vec![vec![i], vec![j]]);
        }
    }
    let schedule = build_schedule(&p);
    let computes = schedule.phases.iter().filter(|ph| matches!(ph, Phase::Compute { .. })).count();
    assert_eq!((p.steps, computes), (3, 3));
    let err = oracle_error(&g, &p, &chip, 1);
    assert!(err <= 1e-6, "relative error {err}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    format!("skewed placement, 3 steps, rel err {err:.1e}")
}

fn rtensor_arithmetic() -> String {
    let g = parse_model_str(
        r#"{
        "axes": [{"name": "x", "extent": 6}, {"name": "y", "extent": 8}, {"name": "z", "extent": 4}],
        "tensors": [{"name": "T", "dims": ["x", "y"]}, {"name": "V", "dims": ["z"]}, {"name": "O", "dims": ["x", "y", "z"]}],
        "operators": [{"id": "outer", "output": "O", "inputs": ["T", "V"], "kind": "contraction"}],
        "graph_inputs": ["T", "V"], "graph_outputs": ["O"]
    }"#,
    )
    .unwrap();
    let op = op0(&g);
    let build = |ft: &[usize], rp: usize| {
        Partitioning::new(op.clone(), spec(&[2, 1, 4], &[ft, &[1], &[1, 1, 1]], &[0, rp, 0])).unwrap()
    };
    let two = build(&[1, 2], 2);
    assert_eq!(two.configs[0].f_s, vec![2, 1]);
    assert_eq!(two.configs[0].sub_shape, vec![3, 8]);
    let rings = two.rings();
    for s in &rings.tensors[0].sub_tensors {
        assert_eq!(s.rings.len(), 2);
        assert!(s.rings.iter().all(|r| r.cores.len() == 2));
    }
    let four = build(&[1, 4], 2);
    for s in &four.rings().tensors[0].sub_tensors {
        assert_eq!(s.rings.len(), 1);
        assert_eq!(s.rings[0].cores.len(), 4);
    }
    assert_eq!(two.steps, 4);
    assert_eq!(build(&[1, 2], 1).steps, 8);
    let chip = toy_chip(8);
    for p in [&two, &four] {
        assert!(oracle_error(&g, p, &chip, 2) <= 1e-5);
    }
    "2 rings of 2, 1 ring of 4, 4 and 8 steps".into()
}

fn alignment_enforcement() -> String {
    let start = Instant::now();
    let k = 6i64;
    let factors = [3i64, 2];
    let oracle: BTreeSet<usize> = (1..=k)
        .filter(|&rp| {
            factors.iter().all(|&f| {
                let r = Ratio::from_integer(rp);
                r <= Ratio::new(k, 2 * f) + Ratio::new(1, 2) || r == Ratio::new(k, f)
            })
        })
        .map(|rp| rp as usize)
        .collect();
    assert_eq!(oracle, BTreeSet::from([1, 2]));
    assert_eq!(valid_rps(6, &[3, 2]).into_iter().collect::<BTreeSet<_>>(), oracle);

    let g = matmul(2, 6, 3);
    let op = op0(&g);
    let chip = toy_chip(6);
    for rp in 1..=6usize {
        let s = spec(&[2, 1, 3], &[&[1, 3], &[2, 1], &[1, 1]], &[0, rp, 0]);
        assert_eq!(Partitioning::new(op.clone(), s.clone()).is_ok(), oracle.contains(&rp));
        let p = Partitioning::build(op.clone(), s, RpCheck::Structural).unwrap();
        let inputs = random_inputs(&g, rp as u64);
        let r = run_plan(&p, &chip, &ComputeModel::Rates, &[&inputs["A"], &inputs["B"]]);
        if oracle.contains(&rp) {
            let (out, _) = r.unwrap();
            let reference = reference_execute(&g, &inputs).unwrap();
            assert!(max_relative_error(&out, &reference["C"]).unwrap() <= 1e-5);
        } else {
            assert!(matches!(r, Err(Error::NonlocalOperand { .. })), "rp {rp} ran without a locality fault");
        }
    }
    assert!(start.elapsed() < Duration::from_secs(1));
    "feasible {1, 2}; paces 3..6 fault on nonlocal reads".into()
}

fn oracle_equivalence_sweep() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    while cases.len() < 200 {
        let g = random_operator(&mut rng);
        let chip = toy_chip(rng.gen_range(4..=16));
        let plans = all_plans(&op0(&g), &chip);
        if plans.len() < 3 {
            continue;
        }
        let picked: Vec<PlanSpec> = plans.choose_multiple(&mut rng, 3).map(|p| p.spec().clone()).collect();
        cases.push((g, chip, picked, rng.gen::<u64>()));
    }
    let runs: usize = cases
        .par_iter()
        .map(|(g, chip, specs, seed)| {
            let op = op0(g);
            let inputs = random_inputs(g, *seed);
            let reference = reference_execute(g, &inputs).unwrap();
            let args: Vec<&DenseTensor> = op.inputs.iter().map(|t| &inputs[&t.name]).collect();
            for s in specs {
                let p = Partitioning::new(op.clone(), s.clone()).unwrap();
                let (out, stats) = run_plan(&p, chip, &ComputeModel::Rates, &args).unwrap();
                let err = max_relative_error(&out, &reference[&op.output.name]).unwrap();
                assert!(err <= 1e-5, "{}: plan {} error {err}", op.id, p.id());
                let fp = footprint(&p, chip).total;
                assert!(stats.high_water.iter().all(|&h| h == fp), "{}: high-water", p.id());
                assert_eq!(stats.as_estimate(), estimate(&p, chip, &ComputeModel::Rates), "{}", p.id());
            }
            specs.len()
        })
        .sum();
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    format!("{} instances, {runs} plan runs in {:.1}s", cases.len(), elapsed.as_secs_f64())
}

fn pareto_correctness() -> String {
    let ops: Vec<(ModelGraph, ChipConfig)> = vec![
        (matmul(8, 8, 8), toy_chip(16)),
        (matmul(12, 6, 10), toy_chip(12)),
        (matmul(16, 16, 16), ChipConfig::toy16()),
        (conv1d(4, 3, 12, 3), toy_chip(16)),
        (conv2d(8, 8, 3, 3, 3), toy_chip(16)),
        (elementwise("add", 12, 12), toy_chip(16)),
        (matmul(24, 24, 24), toy_chip(64)),
    ];
    let mut checked = 0;
    let mut largest = 0;
    for (g, chip) in &ops {
        let start = Instant::now();
        let plans = all_plans(&op0(g), chip);
        if plans.len() > 100_000 {
            continue;
        }
        let front = pareto_filter(plans.clone());
        let got: Vec<(u64, u64)> = front.iter().map(|p| (p.mem(), p.time())).collect();
        assert_eq!(got, brute_force_frontier(&plans), "{}", g.operators[0].id);
        for w in front.windows(2) {
            assert!(w[0].mem() < w[1].mem() && w[0].time() > w[1].time());
        }
        assert!(start.elapsed() < Duration::from_secs(60));
        checked += 1;
        largest = largest.max(plans.len());
    }
    assert!(checked > 0);
    format!("{checked} operators, largest plan space {largest}")
}

/// Random 5-operator chain of contractions and elementwise maps. Every
/// contraction and binary map reads a fresh graph input.
fn random_chain(rng: &mut impl Rng) -> ModelGraph {
    let dims: Vec<usize> = (0..6).map(|_| rng.gen_range(2..=8)).collect();
    let batch = rng.gen_range(2..=6);
    let mut axes = vec![format!(r#"{{"name": "b", "extent": {batch}}}"#)];
    axes.extend(dims.iter().enumerate().map(|(i, d)| format!(r#"{{"name": "d{i}", "extent": {d}}}"#)));
    let mut tensors = vec![r#"{"name": "x0", "dims": ["b", "d0"]}"#.to_string()];
    let mut inputs = vec!["\"x0\"".to_string()];
    let mut ops = Vec::new();
    let mut width = 0;
    for i in 0..5 {
        let cur = format!("x{i}");
        let next = format!("x{}", i + 1);
        match rng.gen_range(0..3) {
            0 if width < 5 => {
                let w = format!("w{i}");
                tensors.push(format!(r#"{{"name": "{w}", "dims": ["d{width}", "d{}"]}}"#, width + 1));
                inputs.push(format!("\"{w}\""));
                width += 1;
                tensors.push(format!(r#"{{"name": "{next}", "dims": ["b", "d{width}"]}}"#));
                ops.push(format!(r#"{{"id": "op{i}", "output": "{next}", "inputs": ["{cur}", "{w}"], "kind": "contraction"}}"#));
            }
            1 => {
                let bias = format!("c{i}");
                tensors.push(format!(r#"{{"name": "{bias}", "dims": ["b", "d{width}"]}}"#));
                inputs.push(format!("\"{bias}\""));
                tensors.push(format!(r#"{{"name": "{next}", "dims": ["b", "d{width}"]}}"#));
                ops.push(format!(r#"{{"id": "op{i}", "output": "{next}", "inputs": ["{cur}", "{bias}"], "kind": "elementwise", "func": "add"}}"#));
            }
            _ => {
                tensors.push(format!(r#"{{"name": "{next}", "dims": ["b", "d{width}"]}}"#));
                ops.push(format!(r#"{{"id": "op{i}", "output": "{next}", "inputs": ["{cur}"], "kind": "elementwise", "func": "relu"}}"#));
            }
        }
    }
    parse_model_str(&format!(
        r#"{{"axes": [{}], "tensors": [{}], "operators": [{}], "graph_inputs": [{}], "graph_outputs": ["x5"]}}"#,
        axes.join(", "),
        tensors.join(", "),
        ops.join(", "),
        inputs.join(", ")
    ))
    .unwrap()
}

/// Keep at most four plans of a frontier; any subset is still a frontier.
fn thin(set: ParetoSet, rng: &mut impl Rng) -> ParetoSet {
    if set.len() <= 4 {
        return set;
    }
    let mut keep: Vec<usize> = (0..set.len()).collect();
    keep.shuffle(rng);
    keep.truncate(4);
    keep.sort();
    keep.into_iter().map(|i| set[i].clone()).collect()
}

fn reconciliation_properties() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model = ComputeModel::Rates;
    let mut gaps = Vec::new();
    let mut graphs = 0;
    while graphs < 20 {
        let g = random_chain(&mut rng);
        let base = ChipConfig::toy16();
        let sets: Vec<ParetoSet> = g
            .operators
            .iter()
            .map(|op| thin(search_pareto(&Arc::new(op.clone()), &base, &SearchConstraints::default(), &model).0, &mut rng))
            .collect();
        if sets.iter().any(|s| s.is_empty()) {
            continue;
        }
        // Smallest memory in which the all-minimum idle assignment runs.
        let fits = |mem: u64| {
            let chip = ChipConfig { mem_per_core: mem, ..base.clone() };
            Reconciler::new(&g, &sets, &chip).unwrap().evaluate(&[0; 5]).unwrap().is_some()
        };
        let (mut lo, mut hi) = (0u64, 1u64 << 24);
        if !fits(hi) {
            continue;
        }
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if fits(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mem = hi + rng.gen_range(0..=hi);
        let chip = ChipConfig { mem_per_core: mem, ..base.clone() };
        let plan = reconcile(&g, &sets, &chip).unwrap();
        let r = Reconciler::new(&g, &sets, &chip).unwrap();

        // (a) the simulator never exceeds per-core memory.
        let pairs: Vec<OpPlans> = plan
            .choice
            .iter()
            .zip(&sets)
            .map(|(&(i, a), s)| OpPlans { idle: s[i].part.clone(), active: s[a].part.clone() })
            .collect();
        let inputs = random_inputs(&g, graphs as u64);
        let (outs, stats) = simulate_model(&g, &pairs, &chip, &model, &inputs).unwrap();
        assert!(stats.high_water.iter().all(|&h| h <= mem));
        assert_eq!(stats.total_cycles, plan.total_time);
        let reference = reference_execute(&g, &inputs).unwrap();
        assert!(max_relative_error(&outs["x5"], &reference["x5"]).unwrap() <= 1e-5);

        // (b) no worse than every operator at its minimum idle level.
        let baseline = r.evaluate(&[0; 5]).unwrap().unwrap().total_time;
        assert!(plan.total_time <= baseline);

        // (c) greedy evaluations bounded by the summed frontier sizes.
        let budget: usize = sets.iter().map(|s| s.len()).sum();
        assert!(plan.evaluations <= budget, "{} > {budget}", plan.evaluations);

        // (d) exhaustive optimum over every idle-level combination.
        let radix: Vec<usize> = (0..5).map(|i| r.levels(i).len()).collect();
        let combos: usize = radix.iter().product();
        let mut best = u64::MAX;
        for c in 0..combos {
            let level = shiftc::rtensor::grid_coords(c, &radix);
            if let Some(ev) = r.evaluate(&level).unwrap() {
                best = best.min(ev.total_time);
            }
        }
        assert!(plan.total_time >= best);
        gaps.push((plan.total_time - best) as f64 / best as f64);
        graphs += 1;
    }
    assert!(start.elapsed() < Duration::from_secs(60));
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max = gaps.iter().cloned().fold(0.0, f64::max);
    let optimal = gaps.iter().filter(|&&x| x == 0.0).count();
    format!(
        "{graphs} graphs; optimality gap mean {:.2}% max {:.2}%, optimal in {optimal}",
        mean * 100.0,
        max * 100.0
    )
}

fn duplication_tradeoff() -> String {
    let g = matmul(4, 2, 4);
    let op = op0(&g);
    let chip = toy_chip(2);
    let dup = Partitioning::new(op.clone(), spec(&[2, 1, 1], &[&[1, 1], &[1, 1], &[1, 1]], &[0, 0, 0])).unwrap();
    let rot = Partitioning::new(op, spec(&[2, 1, 1], &[&[1, 1], &[1, 2], &[1, 1]], &[0, 0, 2])).unwrap();
    let (ed, er) = (estimate(&dup, &chip, &ComputeModel::Rates), estimate(&rot, &chip, &ComputeModel::Rates));
    let (fd, fr) = (footprint(&dup, &chip).total, footprint(&rot, &chip).total);
    assert_eq!(ed.comm_cycles, 0);
    assert!(fd > fr);
    assert!(er.comm_cycles > 0);
    let placement = place(&rot, &chip).unwrap();
    assert_eq!(placement.indices(&rot, 0, 1)[1], vec![0, 1]);
    assert_eq!(placement.indices(&rot, 1, 1)[1], vec![2, 3]);
    for p in [&dup, &rot] {
        assert!(oracle_error(&g, p, &chip, 7) <= 1e-5);
    }
    format!("duplication {fd} B / 0 comm, rotation {fr} B / {} comm", er.comm_cycles)
}

fn constraint_math() -> String {
    let bound: f64 = 1.0 / 0.9 - 1.0;
    assert!((bound - 0.111).abs() < 1e-3);
    let mut worst: f64 = 0.0;
    for e in 1..=500 {
        for f in 1..=e {
            if padding_ratio(e, f) >= 0.9 {
                let overhead = padded_extent(e, f) as f64 / e as f64 - 1.0;
                assert!(overhead <= bound + 1e-12);
                worst = worst.max(overhead);
            }
        }
    }
    let g = parse_model_str(
        r#"{
        "axes": [{"name": "x", "extent": 1000}],
        "tensors": [{"name": "X", "dims": ["x"]}, {"name": "Y", "dims": ["x"]}],
        "operators": [{"id": "copy", "output": "Y", "inputs": ["X"], "kind": "elementwise", "func": "copy"}],
        "graph_inputs": ["X"], "graph_outputs": ["Y"]
    }"#,
    )
    .unwrap();
    let c = SearchConstraints {
        min_core_utilization: 0.9,
        min_padding_ratio: f64::MIN_POSITIVE,
        ..Default::default()
    };
    let fops = enumerate_fop(&g.operators[0], &ChipConfig::ipu_mk2(), &c);
    let expected = 1000usize.min(1472).div_ceil(10);
    assert_eq!(fops.len(), expected);
    assert_eq!((fops[0][0], fops[fops.len() - 1][0]), (901, 1000));
    format!("worst admitted overhead {:.2}%, {} partition factors", worst * 100.0, fops.len())
}

fn mlp4() -> ModelGraph {
    parse_model_str(
        r#"{
        "axes": [{"name": "b", "extent": 8}, {"name": "i", "extent": 12}, {"name": "h", "extent": 16}, {"name": "o", "extent": 6}],
        "tensors": [
            {"name": "X", "dims": ["b", "i"]}, {"name": "W1", "dims": ["i", "h"]}, {"name": "H", "dims": ["b", "h"]},
            {"name": "R", "dims": ["b", "h"]}, {"name": "W2", "dims": ["h", "o"]}, {"name": "Y", "dims": ["b", "o"]},
            {"name": "S", "dims": ["b", "o"]}
        ],
        "operators": [
            {"id": "fc1", "output": "H", "inputs": ["X", "W1"], "kind": "contraction"},
            {"id": "act1", "output": "R", "inputs": ["H"], "kind": "elementwise", "func": "relu"},
            {"id": "fc2", "output": "Y", "inputs": ["R", "W2"], "kind": "contraction"},
            {"id": "act2", "output": "S", "inputs": ["Y"], "kind": "elementwise", "func": "relu"}
        ],
        "graph_inputs": ["X", "W1", "W2"], "graph_outputs": ["S"]
    }"#,
    )
    .unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> String {
    let g = mlp4();
    let chip = ChipConfig::toy16();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let compiled = compile(&g, &chip, &SearchConstraints::default(), &ComputeModel::Rates).unwrap();
            let file = PlanFile::of(&compiled);
            let dir = tempfile::tempdir().unwrap();
            write_artifacts(dir.path(), &file).unwrap();
            let tree = read_tree(dir.path());
            let reloaded = PlanFile::load(dir.path().join("plan.json")).unwrap();
            let graph = reloaded.graph().unwrap();
            let pairs = reloaded.op_plans(&graph).unwrap();
            let inputs = random_inputs(&graph, 99);
            let (outs, _) = simulate_model(&graph, &pairs, &reloaded.chip, &reloaded.cost_model, &inputs).unwrap();
            let bits: Vec<u32> = outs["S"].data.iter().map(|v| v.to_bits()).collect();
            (tree, bits)
        })
    };
    let (t1, o1) = run(1);
    let (t4, o4) = run(4);
    assert_eq!(t1.len(), t4.len());
    for (a, b) in t1.iter().zip(&t4) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs between thread counts", a.0);
    }
    assert_eq!(o1, o4);
    format!("{} artifact files and outputs identical with 1 and 4 workers", t1.len())
}

fn main() {
    let criteria: [(&str, fn() -> String); 9] = [
        ("cannon emergence", cannon_emergence),
        ("rotating tensor arithmetic", rtensor_arithmetic),
        ("pace alignment enforcement", alignment_enforcement),
        ("oracle equivalence sweep", oracle_equivalence_sweep),
        ("pareto correctness", pareto_correctness),
        ("memory reconciliation", reconciliation_properties),
        ("duplication vs rotation trade-off", duplication_tradeoff),
        ("constraint arithmetic", constraint_math),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!(
                "criterion {} {name}: PASS ({detail}; {:.2}s)",
                i + 1,
                start.elapsed().as_secs_f64()
            ),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {} {name}: FAIL ({msg})", i + 1);
                failed += 1;
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
