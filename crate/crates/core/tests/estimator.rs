use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use risloc::estimator::{joint_cfo_pn_mse, Estimator, EstimatorConfig, EstimatorWorkspace};
use risloc::ris::random_phase_shifts;
use risloc::signal::{build_pn_covariance, sample_phase_noise, SignalModel, C64};
use risloc::{Position3, ScenarioConfig};
use std::f64::consts::PI;

fn model(n_ris: usize) -> SignalModel {
    SignalModel::new(ScenarioConfig::reference(n_ris).unwrap().with_tx_power_dbm(-10.0)).unwrap()
}

fn random_ws(n: usize, l: usize, seed: u64) -> EstimatorWorkspace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = || C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e-5;
    let q = DMatrix::from_fn(n, l, |_, _| c());
    let y_bar = DVector::from_fn(n, |_, _| c());
    EstimatorWorkspace { y_bar, q, d_vec: DVector::zeros(n) }
}

#[test]
fn eta_update_matches_stacked_least_squares() {
    let m = model(16);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(16, 1).as_vector().clone();
    let est = Estimator::new(&m, &pn, &w, EstimatorConfig::for_model(&m)).unwrap();
    let (n, l) = (8, 4);
    let ws = random_ws(n, l, 21);
    let eta = est.update_eta(&ws).unwrap();
    // (1/s2)||y - Q eta||^2 + eta'eta/2  ==  || [Re Q; Im Q; s/sqrt2 I] eta - [Re y; Im y; 0] ||^2 / s2
    let s = m.config().noise_variance().sqrt();
    let a = DMatrix::from_fn(2 * n + l, l, |r, c| {
        if r < n {
            ws.q[(r, c)].re
        } else if r < 2 * n {
            ws.q[(r - n, c)].im
        } else if r - 2 * n == c {
            s / 2f64.sqrt()
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(2 * n + l, |r, _| if r < n { ws.y_bar[r].re } else if r < 2 * n { ws.y_bar[r - n].im } else { 0.0 });
    let oracle = a.svd(true, true).solve(&b, 1e-300).unwrap();
    assert!((&eta - &oracle).norm() <= 1e-9 * oracle.norm().max(1e-300), "{eta} vs {oracle}");
}

#[test]
fn eta_update_limits() {
    let m = model(16);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(16, 1).as_vector().clone();
    let est = Estimator::new(&m, &pn, &w, EstimatorConfig::for_model(&m)).unwrap();
    let mut ws = random_ws(8, 4, 3);
    ws.y_bar.fill(C64::new(0.0, 0.0));
    assert_eq!(est.update_eta(&ws).unwrap().norm(), 0.0);

    let mut cfg = m.config().clone();
    cfg.set_noise_power_dbm(200.0);
    let noisy = SignalModel::new(cfg).unwrap();
    let est = Estimator::new(&noisy, &pn, &w, EstimatorConfig::for_model(&noisy)).unwrap();
    assert!(est.update_eta(&random_ws(8, 4, 3)).unwrap().norm() < 1e-20);
}

#[test]
fn likelihood_is_blind_to_the_cfo_pn_ambiguity() {
    let m = model(49);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(49, 2).as_vector().clone();
    let est = Estimator::new(&m, &pn, &w, EstimatorConfig::for_model(&m)).unwrap();
    let truth = Position3::new(1.6, 2.3, 0.2);
    let theta = sample_phase_noise(&pn, 4);
    let y = m.synthesize_received(&truth, &w, 0.08, &theta, 5).unwrap().y;
    let pos = Position3::new(1.9, 2.0, 0.1).to_polar().unwrap();
    let phi = 0.03;
    let th = sample_phase_noise(&pn, 8).theta;
    let base = est.likelihood_term(&y, phi, &th, &pos).unwrap();
    for eps in [-0.1, -0.05, 0.05, 0.1] {
        let shifted = DVector::from_fn(32, |k, _| th[k] + 2.0 * PI * k as f64 * eps / 32.0);
        let v = est.likelihood_term(&y, phi - eps, &shifted, &pos).unwrap();
        assert!((v - base).abs() <= 1e-12 * base, "eps {eps}: {v} vs {base}");
        assert!(joint_cfo_pn_mse(phi, &th, phi - eps, &shifted).unwrap() < 1e-24);
    }
}

#[test]
fn doubling_noise_variance_halves_likelihood() {
    let m = model(16);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(16, 2).as_vector().clone();
    let truth = Position3::new(1.6, 2.3, 0.2);
    let y = m.synthesize_received(&truth, &w, 0.0, &sample_phase_noise(&pn, 1), 2).unwrap().y;
    let pos = Position3::new(1.9, 2.0, 0.1).to_polar().unwrap();
    let th = DVector::zeros(32);
    let a = Estimator::new(&m, &pn, &w, EstimatorConfig::for_model(&m)).unwrap().likelihood_term(&y, 0.0, &th, &pos).unwrap();
    let mut cfg = m.config().clone();
    cfg.set_noise_power_dbm(cfg.noise_power_dbm + 10.0 * 2f64.log10());
    let m2 = SignalModel::new(cfg).unwrap();
    let b = Estimator::new(&m2, &pn, &w, EstimatorConfig::for_model(&m2)).unwrap().likelihood_term(&y, 0.0, &th, &pos).unwrap();
    assert_relative_eq!(b, 0.5 * a, max_relative = 1e-12);
}

#[test]
fn objective_vanishes_at_noise_free_truth() {
    let m = model(16);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(16, 2).as_vector().clone();
    let truth = Position3::new(1.6, 2.3, 0.2);
    let h = m.channel_vector(&truth, &w).unwrap().h;
    let y = m.noiseless(&h, 0.1, &DVector::zeros(32));
    let est = Estimator::new(&m, &pn, &w, EstimatorConfig::for_model(&m)).unwrap();
    assert!(est.likelihood_term(&y, 0.1, &DVector::zeros(32), &truth.to_polar().unwrap()).unwrap() < 1e-20);
}

#[test]
fn invalid_settings_are_rejected() {
    let m = model(16);
    let pn = build_pn_covariance(32, 1e-3).unwrap();
    let w = random_phase_shifts(16, 2).as_vector().clone();
    let mut s = EstimatorConfig::for_model(&m);
    s.eps_inner = 0.0;
    assert!(Estimator::new(&m, &pn, &w, s).is_err());
    let mut s = EstimatorConfig::for_model(&m);
    s.max_inner = 0;
    assert!(Estimator::new(&m, &pn, &w, s).is_err());
    assert!(Estimator::new(&m, &pn, &DVector::zeros(3), EstimatorConfig::for_model(&m)).is_err());
}
