use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use risloc::estimator::{joint_cfo_pn_mse, Estimator, EstimatorConfig};
use risloc::harness::{cdf_curves, median, CdfMetric, ResultRecord, TrialStatus};
use risloc::hcrlb::bound_at;
use risloc::ris::{random_phase_shifts, PhaseShiftVector};
use risloc::signal::{build_pn_covariance, sample_phase_noise, PhaseNoisePath, SignalModel};
use risloc::signal::C64;
use risloc::{Position3, ScenarioConfig};

fn aoi_point() -> impl Strategy<Value = Position3> {
    (1.0..2.0f64, 1.5..2.5f64, 0.2..0.7f64).prop_map(|(x, y, z)| Position3::new(x, y, z))
}

fn record(err: f64, peb: f64, i: usize) -> ResultRecord {
    ResultRecord {
        schema_version: 1,
        experiment: "p".into(),
        tx_power_dbm: 0.0,
        n_ris: 16,
        pn_var: 1e-3,
        trial: i,
        seed: i as u64,
        true_x: 0.0,
        true_y: 0.0,
        true_z: 0.0,
        est_x: err,
        est_y: 0.0,
        est_z: 0.0,
        sq_error: err * err,
        peb,
        cfo_pn_sq_error: 0.0,
        hcrlb_cfo_pn: 0.0,
        outer_iters: 1,
        inner_iters: 1,
        status: TrialStatus::Converged,
        wall_time_s: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polar_round_trip(p in (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)) {
        let c = Position3::new(p.0, p.1, p.2);
        prop_assume!(c.norm() > 1e-3 && (c.x.hypot(c.y)) > 1e-6);
        let back = c.to_polar().unwrap().to_cartesian();
        prop_assert!(back.distance(&c) <= 1e-12 * (1.0 + c.norm()));
    }

    #[test]
    fn joint_mse_ignores_the_ambiguity(
        phi in -0.4..0.4f64,
        eps in -0.1..0.1f64,
        seed in 0u64..1000,
    ) {
        let pn = build_pn_covariance(16, 1e-3).unwrap();
        let theta = sample_phase_noise(&pn, seed).theta;
        let shifted = DVector::from_fn(16, |k, _| theta[k] - 2.0 * PI * k as f64 * eps / 16.0 + 0.3);
        let v = joint_cfo_pn_mse(phi, &theta, phi + eps, &shifted).unwrap();
        prop_assert!(v < 1e-20);
        prop_assert!(joint_cfo_pn_mse(phi, &theta, phi + 0.05, &theta).unwrap() > 0.0);
    }

    #[test]
    fn projection_lands_on_unit_circle(re in prop::collection::vec(-2.0..2.0f64, 8), im in prop::collection::vec(-2.0..2.0f64, 8)) {
        let v = DVector::from_fn(8, |i, _| C64::new(re[i], im[i]));
        let (p, _) = PhaseShiftVector::project(&v);
        for z in p.as_vector().iter() {
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pn_precision_is_the_inverse(n in 1usize..40, var in 1e-6..1.0f64) {
        let c = build_pn_covariance(n, var).unwrap();
        let e = &c.matrix * c.inverse() - DMatrix::identity(n, n);
        prop_assert!(e.abs().max() < 1e-9);
    }

    #[test]
    fn cdf_is_a_distribution(errs in prop::collection::vec(0.0..10.0f64, 1..40)) {
        let rows: Vec<ResultRecord> = errs.iter().enumerate().map(|(i, e)| record(*e, 1.0, i)).collect();
        let c = cdf_curves(&rows, CdfMetric::Error).unwrap();
        prop_assert_eq!(c.len(), errs.len());
        prop_assert_eq!(c.last().unwrap().cdf, 1.0);
        prop_assert!(c.windows(2).all(|w| w[0].value <= w[1].value && w[0].cdf < w[1].cdf));
        let m = median(&errs);
        let below = errs.iter().filter(|e| **e < m).count();
        let above = errs.iter().filter(|e| **e > m).count();
        prop_assert!(below <= errs.len() / 2 && above <= errs.len() / 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn likelihood_is_blind_to_the_ambiguity(
        ue in aoi_point(),
        phi in -0.3..0.3f64,
        eps in -0.1..0.1f64,
        seed in 0u64..1000,
    ) {
        let cfg = ScenarioConfig::reference(16).unwrap();
        let pn = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
        let model = SignalModel::new(cfg).unwrap();
        let w = random_phase_shifts(16, seed).as_vector().clone();
        let theta = sample_phase_noise(&pn, seed).theta;
        let y = model.synthesize_received(&ue, &w, phi, &PhaseNoisePath { theta: theta.clone() }, seed).unwrap().y;
        let est = Estimator::new(&model, &pn, &w, EstimatorConfig::for_model(&model)).unwrap();
        let q = ue.to_polar().unwrap();
        let a = est.likelihood_term(&y, phi, &theta, &q).unwrap();
        let shifted = DVector::from_fn(32, |k, _| theta[k] - 2.0 * PI * k as f64 * eps / 32.0);
        let b = est.likelihood_term(&y, phi + eps, &shifted, &q).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn peb_ignores_global_phase_and_falls_with_power(ue in aoi_point(), rot in 0.0..(2.0 * PI), seed in 0u64..1000) {
        let cfg = ScenarioConfig::reference(16).unwrap();
        let pn = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
        let model = SignalModel::new(cfg).unwrap();
        let w = random_phase_shifts(16, seed).as_vector().clone();
        let a = bound_at(&model, &pn, &ue, &w).unwrap().peb;
        let b = bound_at(&model, &pn, &ue, &(&w * C64::from_polar(1.0, rot))).unwrap().peb;
        prop_assert!((a - b).abs() <= 1e-8 * a);
        let louder = model.with_tx_power_dbm(model.config().tx_power_dbm + 10.0);
        prop_assert!(bound_at(&louder, &pn, &ue, &w).unwrap().peb < a);
    }
}
