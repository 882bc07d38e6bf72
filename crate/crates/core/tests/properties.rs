mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiftc::costmodel::ComputeModel;
use shiftc::interop::{diff_placements, incoming_bytes, liveness, Residency};
use shiftc::plangen::{enumerate_plans, pareto_filter, search_pareto, SearchConstraints};
use shiftc::rtensor::{
    default_rp, derive_spatial_factors, enumerate_temporal_factors, padded_extent, rp_satisfies_bound,
    Partitioning, PlanSpec, RpCheck,
};
use shiftc::texpr::{execute_operator, parse_model, parse_model_str, serialize_model, ModelGraph};

use common::*;

fn op_strategy() -> impl Strategy<Value = ModelGraph> {
    any::<u64>().prop_map(|seed| random_operator(&mut ChaCha8Rng::seed_from_u64(seed)))
}

fn divisor_choice(extent: usize, pick: usize) -> usize {
    let divs: Vec<usize> = (1..=extent).collect();
    divs[pick % divs.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn default_pace_always_aligns(g in op_strategy(), picks in proptest::collection::vec(0usize..16, 5)) {
        let op = Arc::new(g.operators[0].clone());
        let f_op: Vec<usize> = op.axes.iter().zip(&picks).map(|(a, &p)| divisor_choice(a.extent, p).min(4)).collect();
        let Ok(spatial) = derive_spatial_factors(&op, &f_op) else { return Ok(()) };
        let sub: Vec<usize> = op.axes.iter().zip(&f_op).map(|(a, &f)| padded_extent(a.extent, f) / f).collect();
        let probe = Partitioning::build(op.clone(), PlanSpec {
            f_op: f_op.clone(),
            f_t: (0..op.num_slots()).map(|s| vec![1; op.slot(s).dims.len()]).collect(),
            rp: vec![0; op.axes.len()],
        }, RpCheck::Full);
        let Ok(probe) = probe else { return Ok(()) };
        for (slot, sf) in spatial.iter().enumerate() {
            let shape = &probe.configs[slot].sub_shape;
            let rot: Vec<bool> = op.slot(slot).dims.iter().map(|m| !m.is_compound()).collect();
            for ft in enumerate_temporal_factors(shape, &rot, sf.sharing) {
                let mut f_t: Vec<Vec<usize>> = (0..op.num_slots()).map(|s| vec![1; op.slot(s).dims.len()]).collect();
                f_t[slot] = ft;
                let rp = default_rp(&op, &sub, &f_t);
                let spec = PlanSpec { f_op: f_op.clone(), f_t, rp };
                if Partitioning::build(op.clone(), spec.clone(), RpCheck::Structural).is_ok() {
                    prop_assert!(Partitioning::new(op.clone(), spec).is_ok());
                }
            }
        }
    }

    #[test]
    fn rings_tile_sub_tensors(g in op_strategy(), cores in 2usize..=9) {
        let op = Arc::new(g.operators[0].clone());
        for plan in all_plans(&op, &toy_chip(cores)) {
            for c in &plan.part.configs {
                prop_assert_eq!(c.replication * c.ring_size, c.sharing);
                let sub: u64 = c.sub_shape.iter().map(|&x| x as u64).product();
                prop_assert_eq!(c.window_elems() * c.ring_size as u64, sub);
            }
            let rings = plan.part.rings();
            for (t, c) in rings.tensors.iter().zip(&plan.part.configs) {
                for s in &t.sub_tensors {
                    prop_assert_eq!(s.rings.len(), c.replication);
                    prop_assert!(s.rings.iter().all(|r| r.cores.len() == c.ring_size && !r.cores.contains(&usize::MAX)));
                }
            }
        }
    }

    #[test]
    fn frontier_equals_brute_force(g in op_strategy(), cores in 2usize..=12) {
        let op = Arc::new(g.operators[0].clone());
        let plans = all_plans(&op, &toy_chip(cores));
        let front = pareto_filter(plans.clone());
        let got: Vec<(u64, u64)> = front.iter().map(|p| (p.mem(), p.time())).collect();
        prop_assert_eq!(&got, &brute_force_frontier(&plans));
        for w in front.windows(2) {
            prop_assert!(w[0].mem() < w[1].mem() && w[0].time() > w[1].time());
        }
        for p in &front {
            let smallest = plans.iter().filter(|q| q.mem() == p.mem() && q.time() == p.time()).map(|q| q.spec().clone()).min().unwrap();
            prop_assert_eq!(p.spec(), &smallest);
        }
    }

    #[test]
    fn parallel_search_matches_global_filter(g in op_strategy(), cores in 2usize..=16) {
        let op = Arc::new(g.operators[0].clone());
        let chip = toy_chip(cores);
        let c = SearchConstraints::default();
        let plans = enumerate_plans(&op, &chip, &c, &ComputeModel::Rates);
        let (front, evaluated) = search_pareto(&op, &chip, &c, &ComputeModel::Rates);
        prop_assert_eq!(evaluated, plans.len());
        let a: Vec<String> = front.iter().map(|p| p.id()).collect();
        let b: Vec<String> = pareto_filter(plans.clone()).iter().map(|p| p.id()).collect();
        prop_assert_eq!(a, b);
        // Nothing pruned could have beaten the frontier.
        for p in &plans {
            prop_assert!(p.mem() <= chip.mem_per_core);
            prop_assert!(front.iter().any(|f| f.mem() <= p.mem() && f.time() <= p.time()));
        }
    }

    #[test]
    fn alignment_bound_matches_rational_form(k in 1usize..=48, f in 1usize..=12, rp in 1usize..=48) {
        let r = Ratio::from_integer(rp as i64);
        let bound = Ratio::new(k as i64, 2 * f as i64) + Ratio::new(1, 2);
        let exact = r <= bound || r == Ratio::new(k as i64, f as i64);
        prop_assert_eq!(rp_satisfies_bound(k, f, rp), exact);
    }

    #[test]
    fn transfer_fast_path_matches_element_diff(g in op_strategy(), cores in 2usize..=8, a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let op = Arc::new(g.operators[0].clone());
        let plans = all_plans(&op, &toy_chip(cores));
        let mut by_f: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, p) in plans.iter().enumerate() {
            by_f.entry(p.spec().f_op.clone()).or_default().push(i);
        }
        let groups: Vec<&Vec<usize>> = by_f.values().collect();
        if groups.is_empty() { return Ok(()) }
        let grp = groups[a.index(groups.len())];
        let x = &plans[grp[a.index(grp.len())]].part;
        let y = &plans[grp[b.index(grp.len())]].part;
        for slot in 0..op.num_slots() {
            let rx = Residency::of(x, slot);
            let ry = Residency::of(y, slot);
            let set = diff_placements(&rx, &ry).unwrap();
            prop_assert_eq!(&set.incoming_per_core, &incoming_bytes(&rx, &ry));
            prop_assert_eq!(set.total_bytes(), set.incoming_per_core.iter().sum::<u64>());
        }
    }

    #[test]
    fn model_text_round_trips(g in op_strategy()) {
        let back = parse_model(&serialize_model(&g)).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn reference_matches_direct_summation(m in 1usize..=6, k in 1usize..=6, n in 1usize..=6, seed: u64) {
        let g = matmul(m, k, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = execute_operator(&g.operators[0], &[&a, &b]).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                prop_assert_eq!(out[i * n + j], s);
            }
        }
    }

    #[test]
    fn conv_reference_matches_direct_summation(o in 1usize..=3, c in 1usize..=3, n in 1usize..=6, kk in 1usize..=3, seed: u64) {
        let g = conv1d(o, c, n, kk);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let w_in = n + kk - 1;
        let x: Vec<f64> = (0..c * w_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..o * c * kk).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = execute_operator(&g.operators[0], &[&x, &w]).unwrap();
        for oo in 0..o {
            for nn in 0..n {
                let mut s = 0.0;
                for cc in 0..c {
                    for q in 0..kk {
                        s += x[cc * w_in + nn + q] * w[(oo * c + cc) * kk + q];
                    }
                }
                prop_assert_eq!(out[oo * n + nn], s);
            }
        }
    }

    #[test]
    fn liveness_matches_interval_definition(seed: u64, n in 1usize..=7) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Random DAG over one axis: op i reads one or two earlier outputs or
        // a fresh graph input.
        let mut tensors = vec![];
        let mut ops = vec![];
        let mut inputs = vec![];
        for i in 0..n {
            let mut args = vec![];
            let arity = if i == 0 { 1 } else { rng.gen_range(1..=2) };
            for _ in 0..arity {
                if i == 0 || rng.gen_bool(0.3) {
                    let name = format!("in{}_{}", i, args.len());
                    tensors.push(format!(r#"{{"name": "{name}", "dims": ["x"]}}"#));
                    inputs.push(format!("\"{name}\""));
                    args.push(name);
                } else {
                    let t = format!("t{}", rng.gen_range(0..i));
                    if !args.contains(&t) {
                        args.push(t);
                    }
                }
            }
            tensors.push(format!(r#"{{"name": "t{i}", "dims": ["x"]}}"#));
            let func = if args.len() == 2 { "add" } else { "relu" };
            let list: Vec<String> = args.iter().map(|a| format!("\"{a}\"")).collect();
            ops.push(format!(r#"{{"id": "op{i}", "output": "t{i}", "inputs": [{}], "kind": "elementwise", "func": "{func}"}}"#, list.join(", ")));
        }
        let outputs: Vec<String> = (0..n).filter(|_| rng.gen_bool(0.3)).map(|i| format!("\"t{i}\"")).chain(std::iter::once(format!("\"t{}\"", n - 1))).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let doc = format!(
            r#"{{"axes": [{{"name": "x", "extent": 4}}], "tensors": [{}], "operators": [{}], "graph_inputs": [{}], "graph_outputs": [{}]}}"#,
            tensors.join(", "), ops.join(", "), inputs.join(", "), outputs.join(", ")
        );
        let g = parse_model_str(&doc).unwrap();
        let parked: Vec<u64> = (0..n as u64).map(|i| 1 << i).collect();
        let table = liveness(&g, &parked);
        for i in 0..n {
            let mut expect = 0u64;
            for (j, op) in g.operators.iter().enumerate() {
                let name = &op.output.name;
                let used_later = g.operators.iter().enumerate().any(|(c, o)| c >= i && o.inputs.iter().any(|t| &t.name == name));
                if j < i && (used_later || g.is_graph_output(name)) {
                    expect += parked[j];
                }
            }
            prop_assert_eq!(table.live_bytes[i], expect);
        }
    }
}
