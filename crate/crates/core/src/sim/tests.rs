use super::*;

fn a_paths_zero(sem: &LinearSem) -> LinearSem {
    let zero: BTreeMap<String, f64> = ["A_Y", "A_M", "A_Z"].iter().map(|e| (e.to_string(), 0.0)).collect();
    sem.with_overrides(&zero).unwrap()
}

fn only(edges: &[(&str, f64)]) -> BTreeMap<String, f64> {
    edges.iter().map(|(e, v)| (e.to_string(), *v)).collect()
}

#[test]
fn sampling_is_deterministic_and_bounded() {
    assert_eq!(LinearSem::sample(7, Mode::Gaussian, 2.0), LinearSem::sample(7, Mode::Gaussian, 2.0));
    assert_ne!(LinearSem::sample(7, Mode::Gaussian, 2.0), LinearSem::sample(8, Mode::Gaussian, 2.0));
    let mut sum = 0.0;
    let mut count = 0;
    for seed in 0..10_000 {
        for c in LinearSem::sample(seed, Mode::Gaussian, 2.0).coef.values() {
            assert!((-2.0..2.0).contains(c));
            sum += c;
            count += 1;
        }
    }
    // Uniform(-2, 2) has sd 2/sqrt(3); 4 standard errors.
    let se = 2.0 / 3f64.sqrt() / (count as f64).sqrt();
    assert!((sum / count as f64).abs() < 4.0 * se);
}

#[test]
fn override_touches_one_coefficient() {
    let sem = LinearSem::sample(3, Mode::Gaussian, 2.0);
    let out = sem.with_overrides(&only(&[("A_Y", 0.4)])).unwrap();
    for (k, v) in &out.coef {
        if k == "A_Y" {
            assert_eq!(*v, 0.4);
        } else {
            assert_eq!(*v, sem.coef[k]);
        }
    }
    assert!(sem.with_overrides(&only(&[("Y_A", 1.0)])).is_err());
}

#[test]
fn path_sums() {
    let sem = LinearSem::sample(11, Mode::Gaussian, 2.0);
    assert_eq!(a_paths_zero(&sem).path_sum(Truth::Total), 0.0);
    let mut lone = a_paths_zero(&sem);
    lone.coef.insert("A_Y".into(), 0.8);
    assert!((lone.path_sum(Truth::Total) - 0.8).abs() < 1e-15);
    let c = &sem.coef;
    let held = c["A_Y"] + c["A_M"] * (c["M_Y"] + c["M_W"] * c["W_Y"]);
    assert!((sem.path_sum(Truth::ZHeld) - held).abs() < 1e-12);
    let total = held + c["A_Z"] * c["Z_M"] * (c["M_Y"] + c["M_W"] * c["W_Y"]);
    assert!((sem.path_sum(Truth::Total) - total).abs() < 1e-12);
}

#[test]
fn path_sum_matches_monte_carlo() {
    for seed in 0..3 {
        let sem = LinearSem::sample(seed, Mode::Gaussian, 2.0);
        for truth in [Truth::ZHeld, Truth::Total] {
            let (mc, se) = sem.monte_carlo_ate(truth, 1_000_000, 99);
            assert!((mc - sem.path_sum(truth)).abs() <= 3.0 * se + 1e-9, "{mc} vs {}", sem.path_sum(truth));
        }
    }
    // Binary mediators with small coefficients never clip, so the path sum
    // is still the effect.
    let sem = LinearSem::sample(5, Mode::Binary, 0.05);
    let (mc, se) = sem.monte_carlo_ate(Truth::ZHeld, 1_000_000, 4);
    assert!((mc - sem.path_sum(Truth::ZHeld)).abs() <= 3.0 * se, "{mc} {se} {}", sem.path_sum(Truth::ZHeld));
}

#[test]
fn discrete_mode_matches_the_finite_scm() {
    let sem = LinearSem::sample(2, Mode::Discrete, 0.3);
    let scm = sem.to_discrete_scm().unwrap();
    let t = scm.effect_table(&crate::graph::vset(["Y"]), &crate::graph::vset(["A"])).unwrap();
    let at = |a: usize| t.get(&[("A".to_string(), a), ("Y".to_string(), 1)].into());
    let exact = at(1) - at(0);
    let (mc, se) = sem.monte_carlo_ate(Truth::Total, 1_000_000, 8);
    assert!((mc - exact).abs() <= 3.0 * se, "{mc} {se} {exact}");
    assert!(LinearSem::sample(2, Mode::Gaussian, 2.0).to_discrete_scm().is_none());
}

#[test]
fn simulation_is_deterministic() {
    let sem = LinearSem::sample(1, Mode::Gaussian, 2.0);
    assert_eq!(sem.simulate(50, 3).rows, sem.simulate(50, 3).rows);
    assert_ne!(sem.simulate(50, 3).rows, sem.simulate(50, 4).rows);
    let d = sem.simulate(1000, 3);
    assert!(d.column("A").iter().all(|a| *a == 0.0 || *a == 1.0));
}

#[test]
fn cell_seeds_are_distinct() {
    let mut seen = std::collections::BTreeSet::new();
    for kind in 1..4 {
        for a in 0..4 {
            for b in 0..4 {
                assert!(seen.insert(cell_seed(9, kind, a, b, 0)));
            }
        }
    }
}

#[test]
fn quantiles() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(quantile(&v, 0.0), 1.0);
    assert_eq!(quantile(&v, 1.0), 5.0);
    assert_eq!(quantile(&v, 0.5), 3.0);
    assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
}

#[test]
fn logistic_recovers_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<[f64; 7]> = (0..20_000)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let a = f64::from(rng.gen::<f64>() < sigmoid(-0.3 + 1.2 * z));
            [0.0, 0.0, a, z, 0.0, 0.0, 0.0]
        })
        .collect();
    let d = Dataset { rows, seed: 0, mode: Mode::Gaussian };
    let b = logistic(&d.design(&[Z]), &d.target(A), "test").unwrap();
    assert!((b[0] + 0.3).abs() < 0.06 && (b[1] - 1.2).abs() < 0.08, "{b}");
}

#[test]
fn gmm_bridge_matches_the_analytic_bridge() {
    // The outcome bridge over (W, A, C, M) is linear: substituting U out of
    // the proxy equation gives its coefficients in closed form.
    let sem = LinearSem::sample(21, Mode::Gaussian, 2.0).with_overrides(&only(&[("U_W", 1.5), ("U_Z", 1.5)])).unwrap();
    let n = 16_000;
    let d = sem.simulate(n, 5);
    let fit = estimate_proximal_frontdoor(&d, &EstimatorOptions { trajectories: 10, seed: 1 }).unwrap();
    assert!(fit.bridge.moment_norm <= 5.0 / (n as f64).sqrt(), "{}", fit.bridge.moment_norm);
    let c = &sem.coef;
    let ratio = c["U_Y"] / c["U_W"];
    let expect = [("W", c["W_Y"] + ratio), ("A", c["A_Y"]), ("M", c["M_Y"] - ratio * c["M_W"]), ("C", c["C_Y"] - ratio * c["C_W"])];
    for (v, e) in expect {
        let got = fit.bridge.coefficient(v).unwrap();
        assert!((got - e).abs() < 0.15, "{v}: {got} vs {e}");
    }
}

#[test]
fn gmm_rejects_too_few_instruments() {
    let d = LinearSem::sample(1, Mode::Gaussian, 2.0).simulate(100, 1);
    assert!(matches!(gmm_linear_bridge(&d, "Y", &["W", "A"], &["Z"], None), Err(SimError::Gmm(_))));
}

#[test]
fn overidentified_gmm_uses_the_second_step() {
    let sem = LinearSem::sample(4, Mode::Gaussian, 2.0).with_overrides(&only(&[("U_W", 1.0), ("U_Z", 1.0)])).unwrap();
    let d = sem.simulate(8000, 2);
    let just = gmm_linear_bridge(&d, "Y", &["W", "A", "C", "M"], &["Z", "A", "C", "M"], None).unwrap();
    let over = gmm_linear_bridge(&d, "Y", &["W", "A", "C", "M"], &["Z", "A", "C", "M", "U"], None).unwrap();
    assert!(just.moment_norm < 1e-9);
    assert_eq!(over.theta.len(), 5);
    for (a, b) in just.theta.iter().zip(&over.theta) {
        assert!((a - b).abs() < 0.5);
    }
}

fn assert_null(sem: &LinearSem, est: Estimator) {
    let n = 64_000;
    let xs: Vec<f64> = (0..4).map(|j| estimate(est, &sem.simulate(n, 100 + j), &EstimatorOptions { trajectories: 5, seed: j }).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    let se = sd / (xs.len() as f64).sqrt();
    assert!(mean.abs() <= 3.0 * se + 0.02, "{est:?}: {xs:?}");
}

#[test]
fn null_effect_is_neutral() {
    let sem = a_paths_zero(&LinearSem::sample(6, Mode::Gaussian, 2.0).with_overrides(&only(&[("U_W", 1.0), ("U_Z", 1.0)])).unwrap());
    for est in [Estimator::OracleBackdoor, Estimator::NaiveFrontDoor, Estimator::ProximalFrontDoor] {
        assert_null(&sem, est);
    }
    // The simple proximal bridge is misspecified while Z -> M -> W is open,
    // even with no effect of A; it is neutral once that path is closed.
    let closed = sem.with_overrides(&only(&[("Z_M", 0.0), ("M_W", 0.0)])).unwrap();
    assert_null(&closed, Estimator::SimpleProximal);
}

#[test]
fn baselines_are_consistent_where_their_assumptions_hold() {
    let n = 64_000;
    let base = LinearSem::sample(12, Mode::Gaussian, 2.0);
    let fd = base.with_overrides(&only(&[("A_Y", 0.0)])).unwrap();
    let got = estimate(Estimator::NaiveFrontDoor, &fd.simulate(n, 1), &EstimatorOptions::default()).unwrap();
    assert!((got - fd.path_sum(Truth::ZHeld)).abs() < 0.05, "{got} vs {}", fd.path_sum(Truth::ZHeld));
    let sp = base.with_overrides(&only(&[("Z_M", 0.0), ("M_W", 0.0), ("U_W", 1.0), ("U_Z", 1.0)])).unwrap();
    let got = estimate(Estimator::SimpleProximal, &sp.simulate(n, 1), &EstimatorOptions::default()).unwrap();
    assert!((got - sp.path_sum(Truth::ZHeld)).abs() < 0.1, "{got} vs {}", sp.path_sum(Truth::ZHeld));
}

#[test]
fn constant_estimator_has_zero_width() {
    let d = LinearSem::sample(1, Mode::Gaussian, 2.0).simulate(200, 1);
    let ci = bootstrap_with(&d, 16, 0.95, 3, |_, _| Ok(1.25)).unwrap();
    assert_eq!((ci.lo, ci.hi, ci.successes, ci.failures), (1.25, 1.25, 16, 0));
    assert!(bootstrap_with(&d, 1, 0.95, 3, |_, _| Ok(1.0)).is_err());
    let flaky = bootstrap_with(&d, 10, 0.95, 3, |_, s| if s % 2 == 0 { Err(SimError::Gmm("x".into())) } else { Ok(0.0) }).unwrap();
    assert_eq!(flaky.successes + flaky.failures, 10);
}

#[test]
fn bootstrap_is_deterministic() {
    let d = LinearSem::sample(1, Mode::Gaussian, 2.0).simulate(500, 1);
    let a = bootstrap_ci(Estimator::ProximalFrontDoor, &d, 8, 0.9, 17, 5).unwrap();
    let b = bootstrap_ci(Estimator::ProximalFrontDoor, &d, 8, 0.9, 17, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.lo <= a.hi);
}

#[test]
fn perfect_estimates_give_zero_bias_and_full_coverage() {
    let cells: Vec<CellResult> = (0..3)
        .flat_map(|dgp| {
            (0..4).map(move |dataset| CellResult {
                setting: 0,
                dgp,
                dataset,
                estimator: Estimator::OracleBackdoor,
                truth: dgp as f64 + 0.5,
                estimate: Some(dgp as f64 + 0.5),
                interval: Some(BootstrapInterval { lo: dgp as f64, hi: dgp as f64 + 1.0, successes: 8, failures: 0 }),
                error: None,
            })
        })
        .collect();
    let refs: Vec<&CellResult> = cells.iter().collect();
    assert_eq!(metrics(&refs, 3), (Some(0.0), Some(0.0), Some(1.0), Some(1.0)));
}

#[test]
fn bias_sign_is_kept_within_a_dgp() {
    // Errors of +1 and -1 on the same DGP cancel before the absolute value.
    let cell = |dataset, est: f64| CellResult {
        setting: 0,
        dgp: 0,
        dataset,
        estimator: Estimator::NaiveFrontDoor,
        truth: 2.0,
        estimate: Some(est),
        interval: None,
        error: None,
    };
    let cells = [cell(0, 3.0), cell(1, 1.0), cell(2, 2.6), cell(3, 2.2)];
    let refs: Vec<&CellResult> = cells.iter().collect();
    let (mab, pab, cov, _) = metrics(&refs, 1);
    assert!((mab.unwrap() - 0.2).abs() < 1e-12 && (pab.unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(cov, None);
}

#[test]
fn config_parsing() {
    assert!(matches!(ExperimentConfig::parse(""), Err(SimError::Config(_))));
    assert!(matches!(ExperimentConfig::parse("# nothing\n"), Err(SimError::Config(_))));
    assert!(ExperimentConfig::parse("bogus = 1").is_err());
    assert!(ExperimentConfig::parse("override.Y_A = 1").is_err());
    assert!(ExperimentConfig::parse("level = 1.5").is_err());
    assert!(ExperimentConfig::parse("sweep = A_Y").is_err());
    let cfg = ExperimentConfig::parse("n_dgps=2\ndatasets_per_dgp = 16 # desk\nmode=binary\noverride.A_Y=0.4\nsweep=Z_M,M_W\nsweep_values=0,0.8\nbootstrap=64\nseed=5").unwrap();
    assert_eq!((cfg.n_dgps, cfg.datasets_per_dgp, cfg.mode, cfg.bootstrap, cfg.seed), (2, 16, Mode::Binary, 64, 5));
    let settings = cfg.settings();
    assert_eq!(settings.len(), 2);
    assert_eq!(settings[1].2["Z_M"], 0.8);
    assert_eq!(settings[1].2["M_W"], 0.8);
    assert_eq!(settings[1].2["A_Y"], 0.4);
    let ns = ExperimentConfig::parse("sweep = n\nsweep_values = 100, 200").unwrap();
    assert_eq!(ns.settings().iter().map(|s| s.1).collect::<Vec<_>>(), vec![100, 200]);
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        n_dgps: 2,
        datasets_per_dgp: 3,
        n: 400,
        bootstrap: 4,
        trajectories: 3,
        sweep: Some((SweepAxis::Edges(vec!["A_Y".into()]), vec![0.0, 0.8])),
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiments_do_not_depend_on_the_thread_pool() {
    let cfg = small_config();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_experiment(&cfg)).unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run_experiment(&cfg)).unwrap();
    assert_eq!(one.cells_csv(), three.cells_csv());
    assert_eq!(one.to_csv(), three.to_csv());
    assert_eq!(one.to_json(), three.to_json());
    assert_eq!(one.cells.len(), 2 * 2 * 3 * 4);
    let table = one.render_table();
    assert!(table.contains("Bootstrap Interval Coverage") && table.contains("Proximal Front-Door"), "{table}");
}

