//! Fisher and Bayesian information, the hybrid Cramér-Rao bound and its
//! position / CFO-PN summaries, and the FIM written as a linear function
//! of the lifted phase-shift matrix `W = conj(w) conj(w)^H`.
//!
//! Parameter order everywhere: `[phi, theta[0..N], distance, azimuth, elevation]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{polar_jacobian, PolarPosition, Position3};
use crate::signal::{g_matrix_with_gradients, PnCovariance, SignalModel, C64, J};

/// Condition-number guard applied to the equilibrated information matrix.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct MuJacobian {
    /// `N x (N + 4)` complex derivatives of the noiseless signal.
    pub columns: DMatrix<C64>,
}

pub fn mu_jacobian(
    model: &SignalModel,
    ue: &PolarPosition,
    w: &DVector<C64>,
    phi: f64,
    theta: &DVector<f64>,
) -> Result<MuJacobian> {
    let n = model.n();
    if w.len() != model.n_ris() || theta.len() != n {
        return Err(Error::InvalidParameter("dimension mismatch in mu_jacobian".into()));
    }
    let (g, dg) = g_matrix_with_gradients(ue, model.config())?;
    let h = g.g.transpose() * w;
    let mu = model.noiseless(&h, phi, theta);
    let mut cols = DMatrix::zeros(n, n + 4);
    for k in 0..n {
        let a = J * (2.0 * PI * k as f64 / n as f64);
        cols[(k, 0)] = a * mu[k];
        cols[(k, k + 1)] = J * mu[k];
    }
    for (m, d) in dg.iter().enumerate() {
        let dh = d.transpose() * w;
        cols.set_column(n + 1 + m, &model.noiseless(&dh, phi, theta));
    }
    Ok(MuJacobian { columns: cols })
}

/// `(2 / sigma^2) Re(J^H J)`.
pub fn fim(jac: &MuJacobian, sigma_sq: f64) -> DMatrix<f64> {
    let g = jac.columns.adjoint() * &jac.columns;
    let m = g.map(|v| 2.0 * v.re / sigma_sq);
    symmetrize(m)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Bayesian information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BimMatrix {
    pub matrix: DMatrix<f64>,
}

pub fn bim(fim: &DMatrix<f64>, pn_cov: &PnCovariance) -> Result<BimMatrix> {
    let n = pn_cov.dim();
    if fim.nrows() != n + 4 || fim.ncols() != n + 4 {
        return Err(Error::InvalidParameter(format!(
            "FIM is {}x{}, expected {}x{}",
            fim.nrows(),
            fim.ncols(),
            n + 4,
            n + 4
        )));
    }
    let mut b = fim.clone();
    let prior = pn_cov.inverse();
    let mut block = b.view_mut((1, 1), (n, n));
    block += &prior;
    Ok(BimMatrix { matrix: b })
}

/// `Blkdiag(Xi_1, Xi_2)`, shape `(N + 3) x (N + 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: DMatrix<f64>,
}

/// Maps `(phi, theta)` to the identifiable phase increments and the polar
/// position to cartesian coordinates.
pub fn transition_matrix(ue: &PolarPosition, n: usize) -> Result<TransitionMatrix> {
    ue.ensure_off_axis()?;
    let mut t = DMatrix::zeros(n + 3, n + 4);
    for k in 1..n {
        t[(k, 0)] = 2.0 * PI * k as f64 / n as f64;
        t[(k, 1)] = -1.0;
        t[(k, k + 1)] = 1.0;
    }
    let jac = polar_jacobian(ue);
    t.view_mut((n, n + 1), (3, 3)).copy_from(&jac);
    Ok(TransitionMatrix { matrix: t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcrlbResult {
    pub matrix: DMatrix<f64>,
    /// Position error bound in meters.
    pub peb: f64,
    /// Trace of the phase block, rad^2.
    pub cfo_pn_bound: f64,
}

/// Inverse of a symmetric positive definite matrix, guarded by the
/// condition number after diagonal equilibration.
pub fn guarded_spd_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    let d: Vec<f64> = (0..n).map(|i| b[(i, i)]).collect();
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Singular { cond: f64::INFINITY });
    }
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| b[(i, j)] * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular { cond });
    }
    let chol = scaled.cholesky().ok_or(Error::Singular { cond })?;
    let inv = chol.inverse();
    Ok(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * s[i] * s[j]))
}

pub fn hcrlb(bim: &BimMatrix, transition: &TransitionMatrix) -> Result<HcrlbResult> {
    let b = &bim.matrix;
    let t = &transition.matrix;
    if t.ncols() != b.nrows() {
        return Err(Error::InvalidParameter("transition and information sizes differ".into()));
    }
    let inv = guarded_spd_inverse(b)?;
    let matrix = symmetrize(t * inv * t.transpose());
    let m = matrix.nrows();
    let n = m - 3;
    let pos_trace: f64 = (n..m).map(|i| matrix[(i, i)]).sum();
    let cfo_pn_bound = (0..n).map(|i| matrix[(i, i)]).sum();
    Ok(HcrlbResult { peb: pos_trace.max(0.0).sqrt(), cfo_pn_bound, matrix })
}

/// Full bound at one UE position for a given phase-shift vector.
pub fn bound_at(model: &SignalModel, pn_cov: &PnCovariance, ue: &Position3, w: &DVector<C64>) -> Result<HcrlbResult> {
    let q = ue.to_polar()?;
    let n = model.n();
    let jac = mu_jacobian(model, &q, w, 0.0, &DVector::zeros(n))?;
    let b = bim(&fim(&jac, model.config().noise_variance()), pn_cov)?;
    hcrlb(&b, &transition_matrix(&q, n)?)
}

/// One `Re(coef * a_l^H W a_r)` contribution to a FIM entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FimTerm {
    pub coef: C64,
    pub left: usize,
    pub right: usize,
}

/// FIM as a real-linear function of `W`:
/// `FIM_ij(W) = (2 / sigma^2) Re tr(M_ij W)`.
///
/// Stored in factored form. Atom `4n + k` is column `n` of `G S` for
/// `k = 0` and of `(dG/dxi_k) S` for `k = 1..3`; every entry is a short sum
/// of [`FimTerm`]s over these atoms.
#[derive(Debug, Clone)]
pub struct WLinearFim {
    atoms: DMatrix<C64>,
    n: usize,
    power: f64,
    sigma_sq: f64,
}

impl WLinearFim {
    pub fn n_params(&self) -> usize {
        self.n + 4
    }

    pub fn n_ris(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atoms(&self) -> &DMatrix<C64> {
        &self.atoms
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Parameters active on subcarrier `k`: `(param index, alpha, atom kind)`.
    fn active(&self, k: usize) -> [(usize, C64, usize); 5] {
        let n = self.n;
        let one = C64::new(1.0, 0.0);
        [
            (0, J * (2.0 * PI * k as f64 / n as f64), 0),
            (k + 1, J, 0),
            (n + 1, one, 1),
            (n + 2, one, 2),
            (n + 3, one, 3),
        ]
    }

    /// Terms of entry `(i, j)`, already including `P`; multiply the real
    /// part of their sum by `2 / sigma^2` to get the FIM entry.
    pub fn terms(&self, i: usize, j: usize) -> Vec<FimTerm> {
        let mut out = Vec::new();
        for k in 0..self.n {
            let act = self.active(k);
            for &(pi, ai, ki) in &act {
                if pi != i {
                    continue;
                }
                for &(pj, aj, kj) in &act {
                    if pj != j {
                        continue;
                    }
                    let coef = ai.conj() * aj * self.power;
                    if coef.norm() != 0.0 {
                        out.push(FimTerm { coef, left: 4 * k + ki, right: 4 * k + kj });
                    }
                }
            }
        }
        out
    }

    /// Dense `M_ij` with `tr(M_ij W) = sum coef * a_l^H W a_r`.
    pub fn coefficient(&self, i: usize, j: usize) -> DMatrix<C64> {
        let nr = self.n_ris();
        let mut m = DMatrix::zeros(nr, nr);
        for t in self.terms(i, j) {
            let l = self.atoms.column(t.left);
            let r = self.atoms.column(t.right);
            m += (r * l.adjoint()) * t.coef;
        }
        m
    }

    /// FIM at an arbitrary Hermitian `W`.
    pub fn evaluate(&self, w_mat: &DMatrix<C64>) -> DMatrix<f64> {
        let wa = w_mat * &self.atoms;
        let np = self.n_params();
        let mut f = DMatrix::zeros(np, np);
        let scale = 2.0 / self.sigma_sq;
        for k in 0..self.n {
            let mut q = [[C64::new(0.0, 0.0); 4]; 4];
            for (a, row) in q.iter_mut().enumerate() {
                let left = self.atoms.column(4 * k + a);
                for (b, v) in row.iter_mut().enumerate() {
                    *v = left.dotc(&wa.column(4 * k + b));
                }
            }
            let act = self.active(k);
            for &(pi, ai, ki) in &act {
                for &(pj, aj, kj) in &act {
                    f[(pi, pj)] += scale * self.power * (ai.conj() * aj * q[ki][kj]).re;
                }
            }
        }
        symmetrize(f)
    }

    /// FIM at `W = conj(w) conj(w)^H`.
    pub fn evaluate_rank_one(&self, w: &DVector<C64>) -> DMatrix<f64> {
        let wb = w.map(|v| v.conj());
        self.evaluate(&(&wb * wb.adjoint()))
    }
}

pub fn w_linear_fim(model: &SignalModel, ue: &PolarPosition) -> Result<WLinearFim> {
    let (g, dg) = g_matrix_with_gradients(ue, model.config())?;
    let s = &model.signal_matrix().matrix;
    let n = model.n();
    let nr = model.n_ris();
    let gs = &g.g * s;
    let ds: Vec<DMatrix<C64>> = dg.iter().map(|d| d * s).collect();
    let mut atoms = DMatrix::zeros(nr, 4 * n);
    for k in 0..n {
        atoms.set_column(4 * k, &gs.column(k));
        for (m, d) in ds.iter().enumerate() {
            atoms.set_column(4 * k + m + 1, &d.column(k));
        }
    }
    Ok(WLinearFim {
        atoms,
        n,
        power: model.config().tx_power_w(),
        sigma_sq: model.config().noise_variance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use crate::signal::build_pn_covariance;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_w(n: usize, rng: &mut ChaCha8Rng) -> DVector<C64> {
        DVector::from_fn(n, |_, _| C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn theta_columns_are_selective() {
        let model = SignalModel::new(ScenarioConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Position3::new(1.8, 2.2, 0.1).to_polar().unwrap();
        let jac = mu_jacobian(&model, &q, &random_w(81, &mut rng), 0.03, &DVector::from_element(32, 0.01)).unwrap();
        for k in 0..32 {
            for r in 0..32 {
                let v = jac.columns[(r, k + 1)];
                assert_eq!(v.norm() != 0.0, r == k);
            }
        }
    }

    #[test]
    fn zero_power_gives_zero_jacobian() {
        let model = SignalModel::new(ScenarioConfig::default().with_tx_power_dbm(-1e6)).unwrap();
        let q = Position3::new(1.8, 2.2, 0.1).to_polar().unwrap();
        let jac = mu_jacobian(&model, &q, &DVector::from_element(81, C64::new(1.0, 0.0)), 0.0, &DVector::zeros(32)).unwrap();
        assert_eq!(jac.columns.norm(), 0.0);
        assert_eq!(fim(&jac, 1.0).norm(), 0.0);
    }

    #[test]
    fn bim_places_prior_on_phase_block() {
        let f = DMatrix::zeros(6, 6);
        let cov = build_pn_covariance(2, 0.5).unwrap();
        let b = bim(&f, &cov).unwrap().matrix;
        // [[0.5, 0.5], [0.5, 1.0]]^-1 = [[4, -2], [-2, 2]]
        let expect = DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 2.0]);
        assert!((b.view((1, 1), (2, 2)) - expect).norm() < 1e-12);
        assert_eq!(b.row(0).norm(), 0.0);
        assert_eq!(b.view((3, 0), (3, 6)).norm(), 0.0);
        assert!(bim(&DMatrix::zeros(5, 5), &cov).is_err());
    }

    #[test]
    fn transition_matrix_examples() {
        let q = PolarPosition::new(1.0, 0.0, PI / 2.0).unwrap();
        let t = transition_matrix(&q, 3).unwrap().matrix;
        let xi1 = DMatrix::from_row_slice(3, 4, &[
            0.0, 0.0, 0.0, 0.0,
            2.0 * PI / 3.0, -1.0, 1.0, 0.0,
            4.0 * PI / 3.0, -1.0, 0.0, 1.0,
        ]);
        assert!((t.view((0, 0), (3, 4)) - xi1).norm() < 1e-15);
        let xi2 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((t.view((3, 4), (3, 3)) - xi2).norm() < 1e-15);
        assert_eq!(t.view((0, 4), (3, 3)).norm(), 0.0);
        assert!(transition_matrix(&PolarPosition::new(1.0, 0.0, 0.0).unwrap(), 3).is_err());
    }

    #[test]
    fn hcrlb_of_scaled_identity() {
        let b = BimMatrix { matrix: DMatrix::identity(7, 7) * 2.0 };
        let t = TransitionMatrix { matrix: DMatrix::identity(6, 7) };
        let r = hcrlb(&b, &t).unwrap();
        assert!((r.matrix - DMatrix::identity(6, 6) * 0.5).norm() < 1e-15);
        assert_relative_eq!(r.peb, 1.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(r.cfo_pn_bound, 1.5, max_relative = 1e-14);
    }

    #[test]
    fn singular_information_is_reported() {
        let cov = build_pn_covariance(4, 1e-3).unwrap();
        let b = bim(&DMatrix::zeros(8, 8), &cov).unwrap();
        let t = transition_matrix(&PolarPosition::new(2.0, 0.5, 1.0).unwrap(), 4).unwrap();
        assert!(matches!(hcrlb(&b, &t), Err(Error::Singular { .. })));
    }

    #[test]
    fn fim_is_independent_of_phase_state() {
        let model = SignalModel::new(ScenarioConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Position3::new(2.3, 1.7, -0.3).to_polar().unwrap();
        let w = random_w(81, &mut rng);
        let sigma = model.config().noise_variance();
        let f0 = fim(&mu_jacobian(&model, &q, &w, 0.0, &DVector::zeros(32)).unwrap(), sigma);
        let theta = DVector::from_fn(32, |_, _| rng.random_range(-0.5..0.5));
        let f1 = fim(&mu_jacobian(&model, &q, &w, 0.13, &theta).unwrap(), sigma);
        assert!(rel_err(&f1, &f0) < 1e-10);
        assert!(f0.diagonal().iter().all(|v| *v >= 0.0));
        assert!((&f0 - f0.transpose()).norm() == 0.0);
    }

    #[test]
    fn w_linear_reconstruction_matches_direct() {
        let model = SignalModel::new(ScenarioConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Position3::new(1.6, 2.4, 0.3).to_polar().unwrap();
        let wl = w_linear_fim(&model, &q).unwrap();
        let sigma = model.config().noise_variance();
        for _ in 0..5 {
            let w = random_w(81, &mut rng);
            let direct = fim(&mu_jacobian(&model, &q, &w, 0.0, &DVector::zeros(32)).unwrap(), sigma);
            assert!(rel_err(&wl.evaluate_rank_one(&w), &direct) < 1e-10);
        }
        // dense coefficient form agrees with the factored evaluation
        let w = random_w(81, &mut rng);
        let wb = w.map(|v| v.conj());
        let wm = &wb * wb.adjoint();
        let f = wl.evaluate(&wm);
        for (i, j) in [(0, 0), (0, 5), (5, 5), (3, 34), (0, 35), (33, 35)] {
            let v = 2.0 / sigma * (wl.coefficient(i, j) * &wm).trace().re;
            assert_relative_eq!(v, f[(i, j)], max_relative = 1e-9);
        }
    }

    #[test]
    fn w_linear_fim_is_linear() {
        let model = SignalModel::new(ScenarioConfig::reference(9).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Position3::new(1.6, 2.4, 0.3).to_polar().unwrap();
        let wl = w_linear_fim(&model, &q).unwrap();
        let a = random_w(9, &mut rng);
        let b = random_w(9, &mut rng);
        let wa = &a * a.adjoint();
        let wb = &b * b.adjoint();
        let mix = &wa * C64::new(0.3, 0.0) + &wb * C64::new(0.7, 0.0);
        let lhs = wl.evaluate(&mix);
        let rhs = wl.evaluate(&wa) * 0.3 + wl.evaluate(&wb) * 0.7;
        assert!(rel_err(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn single_element_w_linear_is_exact() {
        let model = SignalModel::new(ScenarioConfig::reference(1).unwrap()).unwrap();
        let q = Position3::new(1.6, 2.4, 0.3).to_polar().unwrap();
        let wl = w_linear_fim(&model, &q).unwrap();
        let one = DVector::from_element(1, C64::new(1.0, 0.0));
        let direct = fim(&mu_jacobian(&model, &q, &one, 0.0, &DVector::zeros(32)).unwrap(), model.config().noise_variance());
        assert!(rel_err(&wl.evaluate(&DMatrix::from_element(1, 1, C64::new(1.0, 0.0))), &direct) < 1e-12);
    }

    #[test]
    fn peb_invariant_to_global_phase_and_decreasing_in_power() {
        let cfg = ScenarioConfig::default();
        let cov = build_pn_covariance(32, cfg.pn_increment_var).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (lo, hi) = cfg.aoi_bounds();
        for _ in 0..10 {
            let ue = Position3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let w = random_w(81, &mut rng);
            let p = rng.random_range(-30.0..0.0);
            let m = SignalModel::new(cfg.clone().with_tx_power_dbm(p)).unwrap();
            let base = bound_at(&m, &cov, &ue, &w).unwrap();
            let rot = &w * C64::from_polar(1.0, 1.1);
            assert_relative_eq!(bound_at(&m, &cov, &ue, &rot).unwrap().peb, base.peb, max_relative = 1e-9);
            let louder = bound_at(&m.with_tx_power_dbm(p + 10.0), &cov, &ue, &w).unwrap();
            assert!(louder.peb < base.peb);
            let n = 32;
            let tr: f64 = (n..n + 3).map(|i| base.matrix[(i, i)]).sum();
            assert_relative_eq!(base.peb * base.peb, tr, max_relative = 1e-12);
        }
    }
}
