mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use sca_core::classifier::{classify_exogenous, jacobian, ExoVerdict};
use sca_core::controllability::{has_dilation, theorem0_verdict, DashedMode};
use sca_core::expr::{Builtin, Expr};
use sca_core::graph::{build_graph, mark_nonspanning, shapes, stock_projection, stockify, to_dot, ControlGraph, EdgeStyle, NodeKind};
use sca_core::model::validate;
use sca_core::parser::parse_model;
use sca_core::report::{analyze_model, render_json, AnalysisOptions};
use sca_core::simulator::initial_state;

/// Digraph mixing all three node kinds, with random edge styles.
fn mixed_graph(seed: u64) -> ControlGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=8);
    let mut g = ControlGraph::new();
    for i in 0..n {
        let kind = *[NodeKind::Stock, NodeKind::Aux, NodeKind::Aux, NodeKind::Input].choose(&mut rng).unwrap();
        g.add_node(format!("v{i}"), kind, false);
    }
    let names: Vec<String> = g.nodes.iter().map(|n| n.name.clone()).collect();
    for a in &names {
        for b in &names {
            if rng.gen_bool(0.25) {
                let style = if rng.gen_bool(0.3) { EdgeStyle::NonSpanning } else { EdgeStyle::Spanning };
                g.add_edge(a, b, style);
            }
        }
    }
    g
}

fn reachable(g: &ControlGraph, from: &str) -> Vec<bool> {
    let adj = g.adjacency(true);
    let mut seen = vec![false; g.nodes.len()];
    let mut stack = vec![g.index_of(from).unwrap()];
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// `x' = A x + b u` written as model text, with `b` nonzero on at least one stock.
fn linear_model(seed: u64) -> (String, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let a: Vec<Vec<f64>> =
        (0..n).map(|_| (0..n).map(|_| (rng.gen_range(-1.0..1.0) * 1000.0_f64).round() / 1000.0).collect()).collect();
    let fed = rng.gen_range(0..n);
    let mut text = String::from("model Linear\n");
    for (i, row) in a.iter().enumerate() {
        let mut rate = String::from("0");
        for (j, c) in row.iter().enumerate() {
            let op = if *c < 0.0 { '-' } else { '+' };
            rate.push_str(&format!(" {op} {} * x{j}", c.abs()));
        }
        if i == fed || rng.gen_bool(0.3) {
            rate.push_str(&format!(" + {} * u", rng.gen_range(1..=3)));
        }
        text.push_str(&format!("stock x{i} = {} {{ inflow: {rate} }}\n", rng.gen_range(0..10)));
    }
    text.push_str("exo u = 1\n");
    (text, a)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stockify_keeps_topology_and_removes_auxiliaries(seed in any::<u64>()) {
        let g = mixed_graph(seed);
        let s = stockify(&g);
        prop_assert_eq!(&s.edges, &g.edges);
        prop_assert_eq!(s.count(NodeKind::Aux), 0);
        prop_assert_eq!(s.count(NodeKind::Stock), g.count(NodeKind::Stock) + g.count(NodeKind::Aux));
        prop_assert_eq!(s.count(NodeKind::Input), g.count(NodeKind::Input));
    }

    #[test]
    fn projection_preserves_reachability_between_kept_nodes(seed in any::<u64>()) {
        let g = mixed_graph(seed);
        let p = stock_projection(&g);
        prop_assert_eq!(p.count(NodeKind::Aux), 0);
        for s in p.nodes.iter() {
            let in_g = reachable(&g, &s.name);
            let in_p = reachable(&p, &s.name);
            for t in p.nodes.iter() {
                prop_assert_eq!(in_g[g.index_of(&t.name).unwrap()], in_p[p.index_of(&t.name).unwrap()],
                    "{} -> {}", s.name, t.name);
            }
        }
    }

    #[test]
    fn projection_commutes_with_dropping_dashed_edges(seed in any::<u64>()) {
        let g = mixed_graph(seed);
        prop_assert_eq!(stock_projection(&g.without_dashed()), stock_projection(&g).without_dashed());
    }

    #[test]
    fn dot_output_ignores_insertion_order(seed in any::<u64>()) {
        let g = mixed_graph(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut nodes = g.nodes.clone();
        let mut edges = g.edges.clone();
        nodes.shuffle(&mut rng);
        edges.shuffle(&mut rng);
        let mut h = ControlGraph::new();
        for n in nodes {
            h.add_node(n.name, n.kind, n.hidden);
        }
        for e in edges {
            h.add_edge(&e.from, &e.to, e.style);
        }
        prop_assert_eq!(to_dot(&h), to_dot(&g));
    }

    #[test]
    fn restricting_a_definition_only_adds_dashes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelGen { rng: &mut rng }.model();
        prop_assume!(!validate(&m).iter().any(|d| d.is_error()));
        let plain: Vec<usize> = (0..m.auxiliaries.len()).filter(|&i| !m.auxiliaries[i].definition.contains_delay()).collect();
        prop_assume!(!plain.is_empty());
        let pick = plain[(seed as usize) % plain.len()];
        let mut guarded = m.clone();
        let def = guarded.auxiliaries[pick].definition.clone();
        guarded.auxiliaries[pick].definition = Expr::call(Builtin::Max, vec![Expr::num(0.0), def]);
        let target = guarded.auxiliaries[pick].name.clone();

        let before = mark_nonspanning(&m, &build_graph(&m, &[]));
        let after = mark_nonspanning(&guarded, &build_graph(&guarded, &[]));
        prop_assert_eq!(before.edges.len(), after.edges.len());
        for (b, a) in before.edges.iter().zip(&after.edges) {
            prop_assert_eq!((&b.from, &b.to), (&a.from, &a.to));
            if b.style == EdgeStyle::NonSpanning || a.to == target {
                prop_assert_eq!(a.style, EdgeStyle::NonSpanning, "{} -> {}", a.from, a.to);
            } else {
                prop_assert_eq!(a.style, b.style);
            }
        }
        prop_assert_eq!(mark_nonspanning(&guarded, &after), after);
    }

    #[test]
    fn self_loops_on_every_stock_rule_out_dilations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_stock_graph(&mut rng, 8);
        let stocks: Vec<String> = g.nodes.iter().filter(|n| n.kind == NodeKind::Stock).map(|n| n.name.clone()).collect();
        for s in &stocks {
            g.add_edge(s, s, EdgeStyle::Spanning);
        }
        prop_assert!(has_dilation(&g).is_none());
        let v = theorem0_verdict(&g, DashedMode::Solid).unwrap();
        prop_assert_eq!(v.structurally_controllable, v.non_accessible.is_empty());
    }

    #[test]
    fn adding_edges_never_breaks_controllability(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_stock_graph(&mut rng, 8);
        let before = theorem0_verdict(&g, DashedMode::Solid).unwrap().structurally_controllable;
        let mut h = g.clone();
        let names: Vec<String> = g.nodes.iter().map(|n| n.name.clone()).collect();
        for _ in 0..rng.gen_range(1..=4) {
            h.add_edge(names.choose(&mut rng).unwrap(), names.choose(&mut rng).unwrap(), EdgeStyle::Spanning);
        }
        let after = theorem0_verdict(&h, DashedMode::Solid).unwrap().structurally_controllable;
        prop_assert!(!before || after);
    }

    #[test]
    fn stems_and_buds_are_controllable(n in 1usize..12) {
        prop_assert!(theorem0_verdict(&shapes::stem(n), DashedMode::Solid).unwrap().structurally_controllable);
        prop_assert!(theorem0_verdict(&shapes::bud(n), DashedMode::Solid).unwrap().structurally_controllable);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn additive_input_in_linear_model_is_a_control_input(seed in any::<u64>()) {
        let (text, _) = linear_model(seed);
        let m = parse_model(&text).unwrap();
        let cls = classify_exogenous(&m);
        prop_assert_eq!(cls[0].verdict, ExoVerdict::ControlInput, "{}", text);
    }

    #[test]
    fn jacobian_of_linear_model_is_its_coefficient_matrix(seed in any::<u64>()) {
        let (text, a) = linear_model(seed);
        let m = parse_model(&text).unwrap();
        let j = jacobian(&m, &initial_state(&m).unwrap(), &m.exo_env()).unwrap();
        for (i, row) in a.iter().enumerate() {
            for (k, c) in row.iter().enumerate() {
                let got = j.get(&format!("x{i}"), &format!("x{k}")).unwrap();
                prop_assert!((got - c).abs() <= 1e-6 * (1.0 + c.abs()), "J[{i}][{k}] = {got}, expected {c}");
            }
        }
    }

    #[test]
    fn verdicts_do_not_depend_on_initial_values(case in 0usize..PORC_SUITE.len()) {
        let m = parse_model(PORC_SUITE[case].source).unwrap();
        let verdicts = |m| -> BTreeMap<String, ExoVerdict> {
            classify_exogenous(m).into_iter().map(|c| (c.exo, c.verdict)).collect()
        };
        prop_assert_eq!(verdicts(&m), verdicts(&doubled_initials(&m)));
    }

    #[test]
    fn classification_is_deterministic(case in 0usize..PORC_SUITE.len()) {
        let m = parse_model(PORC_SUITE[case].source).unwrap();
        prop_assert_eq!(classify_exogenous(&m), classify_exogenous(&m));
    }

    #[test]
    fn reports_are_deterministic(case in 0usize..PORC_SUITE.len()) {
        let m = parse_model(PORC_SUITE[case].source).unwrap();
        let opts = AnalysisOptions::default();
        prop_assert_eq!(render_json(&analyze_model(&m, &opts).unwrap()), render_json(&analyze_model(&m, &opts).unwrap()));
    }
}
