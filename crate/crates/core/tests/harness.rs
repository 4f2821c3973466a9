use risloc::harness::*;
use risloc::ris::random_phase_shifts;
use risloc::signal::{build_pn_covariance, SignalModel};
use risloc::estimator::EstimatorConfig;
use risloc::{Position3, ScenarioConfig};

fn small_spec(trials: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::single("t", ScenarioConfig::reference(16).unwrap(), trials, 77);
    spec.tx_powers_dbm = vec![-10.0, 0.0];
    spec.pn_vars = vec![1e-3, 1e-4];
    spec.phase_shifts = PhaseShiftSource::Random { seed: 5 };
    spec.estimator.max_outer = Some(15);
    spec
}

#[test]
fn monte_carlo_rows_are_complete_and_reproducible() {
    let spec = small_spec(2);
    let a = run_monte_carlo(&spec).unwrap();
    assert_eq!(a.len(), 2 * 2 * 1 * 2);
    let b = run_monte_carlo(&spec).unwrap();
    assert_eq!(csv_string(&a).unwrap(), csv_string(&b).unwrap());
    // rows come back in sweep order
    let keys: Vec<(f64, f64, usize)> = a.iter().map(|r| (r.tx_power_dbm, r.pn_var, r.trial)).collect();
    assert_eq!(keys[0], (-10.0, 1e-3, 0));
    assert_eq!(keys[1], (-10.0, 1e-3, 1));
    assert_eq!(keys[2], (-10.0, 1e-4, 0));
    assert_eq!(keys[7], (0.0, 1e-4, 1));
    // a single trial replays in isolation from its seed
    let r = &a[5];
    let cfg = spec.point_scenario(&spec.points()[2]).unwrap();
    let pn = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
    let model = SignalModel::new(cfg).unwrap();
    let w = spec.phase_shifts_for(2, &model).unwrap();
    let ctx = TrialContext {
        experiment: "t",
        model: &model,
        pn_cov: &pn,
        w: &w,
        estimator: spec.estimator.apply(EstimatorConfig::for_model(&model)),
        test_position: None,
        pn_var: r.pn_var,
    };
    let replay = run_trial(&ctx, r.trial, r.seed);
    assert_eq!(csv_string(&[replay]).unwrap(), csv_string(std::slice::from_ref(r)).unwrap());
}

#[test]
fn summary_is_recomputable_from_rows() {
    let mut spec = small_spec(3);
    spec.tx_powers_dbm = vec![0.0];
    spec.pn_vars = vec![1e-3];
    spec.test_position = Some(Position3::new(1.5, 2.15, 0.45));
    let rows = run_monte_carlo(&spec).unwrap();
    let s = summarize(&rows);
    assert_eq!(s.len(), 1);
    let rmse = (rows.iter().map(|r| r.sq_error).sum::<f64>() / rows.len() as f64).sqrt();
    assert!((s[0].rmse - rmse).abs() <= 1e-15 * rmse);
    let errs: Vec<f64> = rows.iter().map(|r| r.error()).collect();
    assert_eq!(s[0].median_error, median(&errs));
    assert!(rows.iter().all(|r| (r.true_x, r.true_y, r.true_z) == (1.5, 2.15, 0.45)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_csv(&path, &rows).unwrap();
    let back = read_results(&path).unwrap();
    assert_eq!(csv_string(&back).unwrap(), csv_string(&rows).unwrap());
}

#[test]
fn non_converged_trials_are_kept() {
    let mut spec = small_spec(2);
    spec.tx_powers_dbm = vec![0.0];
    spec.pn_vars = vec![1e-3];
    spec.estimator.max_outer = Some(1);
    let rows = run_monte_carlo(&spec).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status == TrialStatus::MaxIter));
    assert_eq!(summarize(&rows)[0].converged_fraction, 0.0);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = small_spec(0);
    assert!(run_monte_carlo(&s).is_err());
    s = small_spec(1);
    s.n_ris.clear();
    assert!(s.validate().is_err());
    s = small_spec(1);
    s.n_ris = vec![15];
    assert!(s.validate().is_err());
    s = small_spec(1);
    s.phase_shifts = PhaseShiftSource::Fixed(random_phase_shifts(25, 1));
    assert!(s.validate().is_err());
}

#[test]
fn cdf_is_monotone_and_ends_at_one() {
    let rows = run_monte_carlo(&small_spec(4)).unwrap();
    for metric in [CdfMetric::Error, CdfMetric::Peb] {
        let c = cdf_curves(&rows, metric).unwrap();
        assert_eq!(c.len(), rows.len());
        for g in c.chunk_by(|a, b| (a.tx_power_dbm, a.pn_var) == (b.tx_power_dbm, b.pn_var)) {
            assert_eq!(g.len(), 4);
            assert_eq!(g.last().unwrap().cdf, 1.0);
            assert!(g.windows(2).all(|p| p[0].value <= p[1].value && p[0].cdf < p[1].cdf));
            // median from the CDF: first value reaching one half, averaged with the next for even sizes
            let direct: Vec<f64> = rows
                .iter()
                .filter(|r| (r.tx_power_dbm, r.pn_var) == (g[0].tx_power_dbm, g[0].pn_var))
                .map(|r| if metric == CdfMetric::Error { r.error() } else { r.peb })
                .collect();
            let i = g.iter().position(|r| r.cdf >= 0.5).unwrap();
            assert_eq!(0.5 * (g[i].value + g[i + 1].value), median(&direct));
        }
    }
    assert!(cdf_curves(&[], CdfMetric::Error).is_err());
    let one = &rows[..1];
    let c = cdf_curves(one, CdfMetric::Error).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!((c[0].value, c[0].cdf), (one[0].error(), 1.0));
}

#[test]
fn heatmap_grid_and_determinism() {
    let cfg = ScenarioConfig::reference(16).unwrap();
    let pn = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
    let model = SignalModel::new(cfg.clone()).unwrap();
    let w = random_phase_shifts(16, 2);
    let plane = PlaneSpec { z: 0.2, margin: 0.25 };
    let a = peb_heatmap(&model, &pn, &w, &plane, 5).unwrap();
    assert_eq!(a.len(), 25);
    assert_eq!(csv_string(&a).unwrap(), csv_string(&peb_heatmap(&model, &pn, &w, &plane, 5).unwrap()).unwrap());
    let (lo, hi) = cfg.aoi_bounds();
    assert_eq!((a[0].x, a[0].y), (lo.x - 0.25, lo.y - 0.25));
    assert_eq!((a[24].x, a[24].y), (hi.x + 0.25, hi.y + 0.25));
    assert!(!a[0].in_aoi && a[12].in_aoi);
    assert!(a.iter().all(|r| r.peb.is_some_and(|p| p > 0.0)));
    assert!(peb_heatmap(&model, &pn, &w, &plane, 0).is_err());
}

#[test]
fn trace_views_are_consistent() {
    let cfg = ScenarioConfig::reference(16).unwrap();
    let pn = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
    let model = SignalModel::new(cfg).unwrap();
    let w = random_phase_shifts(16, 2);
    let truth = Position3::new(1.5, 2.15, 0.45);
    let (state, rows) = convergence_trace(&model, &pn, &w, EstimatorConfig::for_model(&model), &truth, 3).unwrap();
    assert_eq!(rows.len(), 1 + state.outer_iters + state.total_inner_iters);
    assert!(rows.windows(2).all(|p| p[1].objective <= p[0].objective * (1.0 + 1e-9)));
    let outer: Vec<&TraceCsvRow> = rows.iter().filter(|r| r.end_of_outer).collect();
    assert_eq!(outer.len(), state.outer_iters + 1);
    assert!(outer.windows(2).all(|p| p[1].outer_iter == p[0].outer_iter + 1));
    assert_eq!(outer.last().unwrap().objective, state.objective);
    assert!(rows.iter().enumerate().all(|(i, r)| r.step == i));
}

#[test]
fn schemas_are_versioned_and_unique() {
    let mut names: Vec<&str> = SCHEMAS.iter().map(|s| s.name).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), SCHEMAS.len());
    for s in SCHEMAS.iter().filter(|s| s.name != "phases") {
        assert_eq!(s.columns[0], "schema_version");
        assert_eq!(s.version, SCHEMA_VERSION);
    }
}
