use super::*;
use crate::estimand::{evaluate, render_text, Env};
use crate::graph::parse_graph;
use crate::id::identify;
use crate::oracle::{cards_with_default, random_scm, DiscreteScm};

pub(crate) fn bundled(name: &str) -> MixedGraph {
    let path = format!("{}/../../assets/graphs/{name}.graph", env!("CARGO_MANIFEST_DIR"));
    parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn query(y: &[&str], a: &[&str], m: &[&str]) -> CausalQuery {
    CausalQuery::new(y, a).with_proxies(m)
}

fn identified(o: &ProximalOutcome) -> &Estimand {
    o.verdict.estimand().unwrap_or_else(|| panic!("not identified: {:?}", o.verdict))
}

fn proximal_steps(o: &ProximalOutcome) -> Vec<(String, VSet, VSet, VSet)> {
    o.sequences
        .iter()
        .flat_map(|s| &s.steps)
        .filter_map(|s| match &s.kind {
            StepKind::Proximal { proxies, controls, descendant_controls, hidden, .. } => {
                Some((s.target.clone(), proxies.clone(), controls.union(descendant_controls).cloned().collect(), hidden.clone()))
            }
            _ => None,
        })
        .collect()
}

fn targets(o: &ProximalOutcome) -> Vec<String> {
    o.sequences.iter().flat_map(|s| &s.steps).filter(|s| s.kind != StepKind::DropProxy).map(|s| s.target.clone()).collect()
}

/// Max-abs error of the estimand against the truncated factorization.
fn oracle_error(scm: &DiscreteScm, e: &Estimand, y: &VSet, a: &VSet) -> f64 {
    let observed = scm.graph().of_kind(VertexKind::Observed);
    let env = Env::new(scm.marginal(&observed).unwrap(), scm.cards().clone());
    let got = evaluate(e, &env).unwrap().table;
    let truth = scm.effect_table(y, a).unwrap();
    got.max_abs_diff(&truth).unwrap()
}

#[test]
fn subsets_by_size_then_name() {
    let s = subsets(&vset(["a", "b", "c"]), 1, 2);
    let names: Vec<String> = s.iter().map(fmt_set).collect();
    assert_eq!(names, ["{a}", "{b}", "{c}", "{a,b}", "{a,c}", "{b,c}"]);
    assert!(subsets(&VSet::new(), 1, 3).is_empty());
}

#[test]
fn proximal_g_formula() {
    let g = bundled("fig1c");
    let o = proximal_identify(&g, &query(&["Y"], &["A"], &["W"]), &SearchConfig::default()).unwrap();
    let e = identified(&o);
    assert_eq!(proximal_steps(&o), vec![("A".into(), vset(["W"]), vset(["Z"]), vset(["U"]))]);
    assert_eq!(render_text(&crate::estimand::simplify_expr(&e.inline(), &Default::default())), "Σ_{c,w} b_a(y,w,a,c) p(c,w)");
    assert_eq!(e.bridge_count(), 1);
    let cards = cards_with_default(&g, &[]);
    let mut good = 0;
    for seed in 0..20 {
        let scm = random_scm(&g, &cards, seed, 0.02).unwrap();
        if oracle_error(&scm, e, &vset(["Y"]), &vset(["A"])) < 1e-8 {
            good += 1;
        }
    }
    assert_eq!(good, 20);
}

#[test]
fn two_bridge_derivation() {
    let g = bundled("fig3d");
    let q = query(&["Y"], &["A"], &["W", "X"]);
    let o = proximal_identify(&g, &q, &SearchConfig::default()).unwrap();
    let e = identified(&o);
    assert_eq!(
        proximal_steps(&o),
        vec![
            ("M".into(), vset(["W"]), vset(["Z"]), vset(["U"])),
            ("A".into(), vset(["X"]), vset(["D"]), vset(["U", "W"])),
        ]
    );
    assert_eq!(targets(&o), ["M", "Z", "C", "A", "D"]);
    assert_eq!(e.bridge_count(), 2);
    let text = render_text(&crate::estimand::simplify_expr(&e.inline(), &Default::default()));
    assert!(text.contains("b_a(y,x,a"), "{text}");
    println!("{text}\n{}", o.render_trace());
    let cards = cards_with_default(&g, &[("X", 4), ("D", 4)]);
    for seed in 0..10 {
        let scm = random_scm(&g, &cards, seed, 0.02).unwrap();
        let err = oracle_error(&scm, e, &vset(["Y"]), &vset(["A"]));
        assert!(err < 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn second_bridge_does_not_depend_on_m() {
    let g = bundled("fig3d");
    let o = proximal_identify(&g, &query(&["Y"], &["A"], &["W", "X"]), &SearchConfig::default()).unwrap();
    let e = identified(&o);
    let cards = cards_with_default(&g, &[("X", 4), ("D", 4)]);
    let scm = random_scm(&g, &cards, 7, 0.02).unwrap();
    let observed = g.of_kind(VertexKind::Observed);
    let env = Env::new(scm.marginal(&observed).unwrap(), scm.cards().clone());
    let ev = evaluate(e, &env).unwrap();
    let b = &ev.bridges["b_a"].table;
    assert!(b.card("M").is_some(), "bridge should carry m syntactically");
    let diff = b.restrict("M", 0).max_abs_diff(&b.restrict("M", 1)).unwrap();
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn sequential_proxies_reuse_a_margin() {
    let g = bundled("fig4b");
    let mut q = query(&["Y"], &["A0", "A1"], &["W0", "W1"]);
    q.cardinalities = Some(g.vertex_set().into_iter().map(|v| (v, 2)).collect());
    let o = proximal_identify(&g, &q, &SearchConfig::default()).unwrap();
    let e = identified(&o);
    assert_eq!(
        proximal_steps(&o),
        vec![
            ("A1".into(), vset(["W0", "W1"]), vset(["Z0", "Z1"]), vset(["U0", "U1"])),
            ("A0".into(), vset(["W0"]), vset(["Z0"]), vset(["U0"])),
        ]
    );
    assert_eq!(targets(&o), ["A1", "Z1", "A0", "Z0"]);
    let reused = o.sequences[0].steps.iter().any(|s| matches!(s.kind, StepKind::Proximal { from_reusing: true, .. }));
    assert!(reused);
    let cards = cards_with_default(&g, &[]);
    for seed in 0..5 {
        let scm = random_scm(&g, &cards, seed, 0.02).unwrap();
        let err = oracle_error(&scm, e, &vset(["Y"]), &vset(["A0", "A1"]));
        assert!(err < 1e-8, "seed {seed}: {err}");
    }
    let graph_only = proximal_identify(&g, &query(&["Y"], &["A0", "A1"], &["W0", "W1"]), &SearchConfig::default()).unwrap();
    assert_eq!(proximal_steps(&graph_only)[0].1, vset(["W0"]));
}

#[test]
fn proximal_front_door() {
    let drawn = proximal_identify(&bundled("fig2d"), &query(&["Y"], &["A"], &["W"]), &SearchConfig::default()).unwrap();
    assert!(matches!(drawn.verdict, IdVerdict::NotIdentified { .. }));

    let g = bundled("fig2d_zpre");
    let o = proximal_identify(&g, &query(&["Y"], &["A"], &["W"]), &SearchConfig::default()).unwrap();
    let e = identified(&o);
    assert_eq!(e.bridge_count(), 1);
    let cards = cards_with_default(&g, &[]);
    for seed in 0..10 {
        let scm = random_scm(&g, &cards, seed, 0.02).unwrap();
        let err = oracle_error(&scm, e, &vset(["Y"]), &vset(["A"]));
        assert!(err < 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn ledger_has_one_bridge_and_completeness_per_step() {
    let g = bundled("fig3d");
    let o = proximal_identify(&g, &query(&["Y"], &["A"], &["W", "X"]), &SearchConfig::default()).unwrap();
    let e = identified(&o);
    let n = proximal_steps(&o).len();
    let bridges = e.ledger.iter().filter(|a| matches!(a, Assumption::BridgeExistence { .. })).count();
    let complete = e.ledger.iter().filter(|a| matches!(a, Assumption::Completeness { .. })).count();
    assert_eq!((bridges, complete), (n, n));
    assert!(e.ledger.iter().all(|a| !matches!(a, Assumption::CounterfactualIndependence { checked_graphically: false, .. })));
    let trace = o.render_trace();
    assert!(trace.contains("proximal M M*={W} Z={Z} U*={U}"), "{trace}");
}

fn initial(h: &MixedGraph, proxies: &VSet) -> Margins {
    let observed = h.of_kind(VertexKind::Observed);
    let v: VSet = observed.difference(proxies).cloned().collect();
    Margins {
        inductive: KernelRef::observed(&observed),
        reusing: Some(KernelRef::observed(&observed)),
        v1: v.clone(),
        m1: proxies.clone(),
        m2: proxies.clone(),
        v,
    }
}

#[test]
fn step_checks() {
    let g = bundled("fig3d");
    let m = vset(["W", "X"]);
    let margins = initial(&g, &m);
    let todo = vset(["A", "C", "D", "M", "Z"]);
    let cfg = SearchConfig::default();
    let (step, stmts) = check_proximal_step(&g, &margins, &todo, "M", &vset(["W"]), &vset(["Z"]), &vset(["U"]), &cfg).unwrap();
    assert_eq!(step.r, vset(["A", "Y"]));
    assert_eq!(step.t, vset(["C", "D", "X", "Z"]));
    assert_eq!(stmts[0], "A(a),Y(a) ⫫ Z | C,D,U,X");
    let none = check_proximal_step(&g, &margins, &todo, "M", &VSet::new(), &vset(["Z"]), &vset(["U"]), &cfg);
    assert!(matches!(none, Err(CheckFailure::Malformed(_))));
    let wrong_control = check_proximal_step(&g, &margins, &todo, "M", &vset(["W"]), &vset(["C"]), &vset(["U"]), &cfg);
    assert_eq!(wrong_control.unwrap_err(), CheckFailure::OutcomeProxyDependence);
    let hidden_control = check_proximal_step(&g, &margins, &todo, "M", &vset(["W"]), &vset(["U"]), &vset(["U"]), &cfg);
    assert!(matches!(hidden_control, Err(CheckFailure::Malformed(_))));

    // proxies only in the reusing margin, with A ∪ T outside V1
    let mut later = margins.clone();
    later.m2 = vset(["X"]);
    later.v1 = vset(["C"]);
    let r = check_proximal_step(&g, &later, &todo, "M", &vset(["W"]), &vset(["Z"]), &vset(["U"]), &cfg);
    assert_eq!(r.unwrap_err(), CheckFailure::MCondition);

    let tight = SearchConfig { cards: Some(cards_with_default(&g, &[("U", 3)])), ..SearchConfig::default() };
    let r = check_proximal_step(&g, &margins, &todo, "M", &vset(["W"]), &vset(["Z"]), &vset(["U"]), &tight);
    assert_eq!(r.unwrap_err(), CheckFailure::TooFewCategories);
}

#[test]
fn no_proxies_and_no_hidden_is_classical() {
    let g = bundled("fig2c");
    let q = query(&["Y"], &["A"], &[]);
    let o = proximal_identify(&g, &q, &SearchConfig::default()).unwrap();
    assert_eq!(o.verdict, identify(&g, &q).unwrap());
    let b = bundled("fig3b");
    let o = proximal_identify(&b, &q, &SearchConfig::default()).unwrap();
    assert_eq!(o.verdict, identify(&b, &q).unwrap());
    assert!(matches!(o.verdict, IdVerdict::NotIdentified { .. }));
}

#[test]
fn policy_queries_route_through_the_proximal_engine() {
    let g = bundled("fig1c");
    let mut q = query(&["Y"], &["A"], &["W"]);
    q.policies = vec![crate::id::PolicySpec { treatment: "A".into(), inputs: vec!["C".into()], function: None }];
    let o = proximal_identify(&g, &q, &SearchConfig::default()).unwrap();
    let e = identified(&o);
    let cards = cards_with_default(&g, &[]);
    let scm = random_scm(&g, &cards, 3, 0.02).unwrap();
    let observed = g.of_kind(VertexKind::Observed);
    let mut env = Env::new(scm.marginal(&observed).unwrap(), scm.cards().clone());
    let rule = (vec!["C".to_string()], vec![1, 0]);
    env.policies.insert("f_a".into(), rule.clone());
    let got = evaluate(e, &env).unwrap().table;
    let truth = scm.with_policies(&[("A".to_string(), rule)].into()).unwrap().marginal(&vset(["Y"])).unwrap();
    assert!(got.max_abs_diff(&truth).unwrap() < 1e-8);
}

mod props {
    use super::*;
    use crate::graph::testutil::arb_admg;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn reduces_to_classical_without_proxies(g in arb_admg(8), yi in 0usize..8, ai in 0usize..8) {
            let names: Vec<String> = g.vertex_set().into_iter().collect();
            let y = names[yi % names.len()].clone();
            let a = names[ai % names.len()].clone();
            prop_assume!(y != a);
            let q = CausalQuery::new(&[y.as_str()], &[a.as_str()]);
            let classical = identify(&g, &q).unwrap();
            let proximal = proximal_identify(&g, &q, &SearchConfig::default()).unwrap();
            prop_assert_eq!(classical, proximal.verdict);
        }
    }
}
