//! Joint MAP estimation of CFO, truncated phase noise and UE position.
//!
//! Each outer iteration refits the phase-noise coefficients `eta` and the
//! CFO `phi` in closed form from a first-order expansion of the signal
//! model, then runs gradient descent on the polar position. All
//! convergence decisions use the exact objective.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{PolarPosition, Position3};
use crate::signal::{cfo_phasors, g_matrix, g_matrix_with_gradients, pn_phasors, PnCovariance, SignalModel, C64};

/// Smallest distance a position step may produce, in meters.
pub const DISTANCE_FLOOR: f64 = 1e-3;

/// Truncated eigenbasis of the phase-noise covariance, `theta ~ Pi eta`
/// with `eta ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PnSubspace {
    /// `U_L Diag(sqrt(e_L))`, `N x L`.
    pub projection: DMatrix<f64>,
    /// All eigenvalues of the covariance, descending.
    pub eigenvalues: DVector<f64>,
}

impl PnSubspace {
    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn theta(&self, eta: &DVector<f64>) -> DVector<f64> {
        &self.projection * eta
    }
}

pub fn build_pn_subspace(cov: &PnCovariance, l: usize) -> Result<PnSubspace> {
    let n = cov.dim();
    if l == 0 || l > n {
        return Err(Error::IndexOutOfRange { index: l, max: n });
    }
    let eig = SymmetricEigen::new(cov.matrix.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let projection = DMatrix::from_fn(n, l, |r, c| eig.eigenvectors[(r, order[c])] * eigenvalues[c].sqrt());
    Ok(PnSubspace { projection, eigenvalues })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Nominal position step, in units of one diagonal Gauss-Newton step.
    pub step_length: f64,
    pub eps_inner: f64,
    pub eps_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub init_position: Position3,
    pub init_phi: f64,
    /// Halve steps that would increase the objective. Without it the
    /// position steps and closed-form updates are taken as they come.
    pub backtracking: bool,
    pub refit: Refit,
}

/// How the phase-noise coefficients and the CFO are refit per outer
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Refit {
    /// Ridge fit of `eta`, then a CFO step using the new phase noise.
    Sequential,
    /// One ridge fit of `eta` and the CFO increment together. Avoids the
    /// slow zig-zag of the sequential form along the CFO/PN ambiguity.
    #[default]
    Joint,
}

impl EstimatorConfig {
    /// Defaults for a scenario: start at the AOI center with zero CFO.
    pub fn for_model(model: &SignalModel) -> Self {
        let n = model.n() as f64;
        Self {
            step_length: 1.0,
            eps_inner: 1e-6 * n,
            eps_outer: 1e-8 * n,
            max_inner: 5000,
            max_outer: 100,
            init_position: model.config().aoi_center,
            init_phi: 0.0,
            backtracking: true,
            refit: Refit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.eps_inner, "inner tolerance")?;
        positive(self.eps_outer, "outer tolerance")?;
        if !(self.step_length >= 0.0 && self.step_length.is_finite()) {
            return Err(Error::InvalidParameter(format!("step length must be non-negative, got {}", self.step_length)));
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(Error::InvalidParameter("iteration limits must be at least 1".into()));
        }
        if !self.init_position.is_finite() || !self.init_phi.is_finite() {
            return Err(Error::InvalidParameter("initial point must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub phi_hat: f64,
    pub eta_hat: DVector<f64>,
    /// Always `Pi * eta_hat`.
    pub theta_hat: DVector<f64>,
    pub position_hat: PolarPosition,
    pub objective: f64,
    /// Largest inner iteration count of any outer iteration.
    pub inner_iters: usize,
    pub total_inner_iters: usize,
    pub outer_iters: usize,
    pub converged: bool,
    /// A position step hit the distance floor.
    pub clamped: bool,
}

impl EstimatorState {
    pub fn position(&self) -> Position3 {
        self.position_hat.to_cartesian()
    }
}

/// Quantities rebuilt from the current state at each outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorWorkspace {
    /// `y - sqrt(P) Lambda_phi S^T h`.
    pub y_bar: DVector<C64>,
    /// `j sqrt(P) Diag(Lambda_phi S^T h) Pi`.
    pub q: DMatrix<C64>,
    /// `sqrt(P) Lambda_theta S^T h`.
    pub d_vec: DVector<C64>,
}

/// One row of a convergence trace. `inner_iter` 0 marks the state right
/// after the closed-form updates of an outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub objective: f64,
    pub phi_hat: f64,
    pub position: Position3,
}

/// Model, phase shifts and settings shared by all estimation steps.
#[derive(Debug, Clone)]
pub struct Estimator<'a> {
    model: &'a SignalModel,
    w: DVector<C64>,
    subspace: PnSubspace,
    settings: EstimatorConfig,
}

impl<'a> Estimator<'a> {
    pub fn new(model: &'a SignalModel, pn_cov: &PnCovariance, w: &DVector<C64>, settings: EstimatorConfig) -> Result<Self> {
        settings.validate()?;
        if w.len() != model.n_ris() {
            return Err(Error::InvalidParameter(format!("{} phase shifts for {} RIS elements", w.len(), model.n_ris())));
        }
        let subspace = build_pn_subspace(pn_cov, model.config().pn_subspace_dim)?;
        Ok(Self { model, w: w.clone(), subspace, settings })
    }

    pub fn subspace(&self) -> &PnSubspace {
        &self.subspace
    }

    pub fn settings(&self) -> &EstimatorConfig {
        &self.settings
    }

    fn channel(&self, pos: &PolarPosition) -> Result<DVector<C64>> {
        Ok(g_matrix(&pos.to_cartesian(), self.model.config())?.g.transpose() * &self.w)
    }

    /// `||y - mu||^2 / sigma^2` for explicit parameters.
    pub fn likelihood_term(&self, y: &DVector<C64>, phi: f64, theta: &DVector<f64>, pos: &PolarPosition) -> Result<f64> {
        let mu = self.model.noiseless(&self.channel(pos)?, phi, theta);
        Ok((y - mu).norm_squared() / self.model.config().noise_variance())
    }

    fn objective_at(&self, y: &DVector<C64>, phi: f64, eta: &DVector<f64>, pos: &PolarPosition) -> Result<f64> {
        Ok(self.likelihood_term(y, phi, &self.subspace.theta(eta), pos)? + 0.5 * eta.norm_squared())
    }

    /// Exact objective `||y - mu||^2 / sigma^2 + eta' eta / 2`.
    pub fn objective(&self, y: &DVector<C64>, state: &EstimatorState) -> Result<f64> {
        self.objective_at(y, state.phi_hat, &state.eta_hat, &state.position_hat)
    }

    pub fn initial_state(&self, y: &DVector<C64>) -> Result<EstimatorState> {
        let l = self.subspace.dim();
        let position_hat = self.settings.init_position.to_polar()?;
        let eta_hat = DVector::zeros(l);
        let mut state = EstimatorState {
            phi_hat: self.settings.init_phi,
            theta_hat: self.subspace.theta(&eta_hat),
            eta_hat,
            position_hat,
            objective: 0.0,
            inner_iters: 0,
            total_inner_iters: 0,
            outer_iters: 0,
            converged: false,
            clamped: false,
        };
        state.objective = self.objective(y, &state)?;
        Ok(state)
    }

    pub fn workspace(&self, y: &DVector<C64>, state: &EstimatorState) -> Result<EstimatorWorkspace> {
        let sp = self.model.config().tx_power_w().sqrt();
        let x = self.model.s_transpose() * self.channel(&state.position_hat)?;
        let n = x.len();
        let lp = cfo_phasors(state.phi_hat, n);
        let lt = pn_phasors(&state.theta_hat);
        let base = DVector::from_fn(n, |k, _| x[k] * lp[k] * sp);
        let pi = &self.subspace.projection;
        let q = DMatrix::from_fn(n, pi.ncols(), |k, c| C64::new(0.0, 1.0) * base[k] * pi[(k, c)]);
        let d_vec = DVector::from_fn(n, |k, _| x[k] * lt[k] * sp);
        Ok(EstimatorWorkspace { y_bar: y - base, q, d_vec })
    }

    /// Ridge solution `[Re(Q'Q) + sigma^2/2 I]^{-1} Re(Q' y_bar)`.
    pub fn update_eta(&self, ws: &EstimatorWorkspace) -> Result<DVector<f64>> {
        let l = ws.q.ncols();
        let s2 = self.model.config().noise_variance();
        let qh = ws.q.adjoint();
        let mut m = (&qh * &ws.q).map(|c| c.re);
        for i in 0..l {
            m[(i, i)] += 0.5 * s2;
        }
        let rhs = (&qh * &ws.y_bar).map(|c| c.re);
        let chol = m.cholesky().ok_or(Error::Singular { cond: f64::INFINITY })?;
        Ok(chol.solve(&rhs))
    }

    /// Ridge fit of `eta` together with a CFO increment, from the same
    /// first-order expansion around the current CFO with zero phase noise.
    /// Only `eta` carries the prior.
    pub fn update_joint(&self, ws: &EstimatorWorkspace, y: &DVector<C64>) -> Result<(DVector<f64>, f64)> {
        let (n, l) = ws.q.shape();
        let s2 = self.model.config().noise_variance();
        let base = y - &ws.y_bar;
        let a = DMatrix::from_fn(n, l + 1, |k, c| {
            if c < l {
                ws.q[(k, c)]
            } else {
                C64::new(0.0, 2.0 * PI * k as f64 / n as f64) * base[k]
            }
        });
        let ah = a.adjoint();
        let mut m = (&ah * &a).map(|c| c.re);
        for i in 0..l {
            m[(i, i)] += 0.5 * s2;
        }
        let rhs = (&ah * &ws.y_bar).map(|c| c.re);
        let sol = m.cholesky().ok_or_else(|| Error::SignalAbsent("no signal along the CFO direction".into()))?.solve(&rhs);
        Ok((sol.rows(0, l).into_owned(), sol[l]))
    }

    /// `sqrt(P) Lambda_theta S^T h` at a position and phase-noise path.
    pub fn d_vec(&self, pos: &PolarPosition, theta: &DVector<f64>) -> Result<DVector<C64>> {
        let sp = self.model.config().tx_power_w().sqrt();
        let x = self.model.s_transpose() * self.channel(pos)?;
        let lt = pn_phasors(theta);
        Ok(DVector::from_fn(x.len(), |k, _| x[k] * lt[k] * sp))
    }

    /// Gradient of the linearized objective at `eta`; zero at the ridge
    /// solution.
    pub fn eta_gradient(&self, ws: &EstimatorWorkspace, eta: &DVector<f64>) -> DVector<f64> {
        let s2 = self.model.config().noise_variance();
        let eta_c = eta.map(|v| C64::new(v, 0.0));
        let r = &ws.y_bar - &ws.q * eta_c;
        let g = (ws.q.adjoint() * r).map(|c| c.re);
        eta - g * (2.0 / s2)
    }

    /// First-order CFO refinement; returns the new estimate.
    pub fn update_cfo(&self, y: &DVector<C64>, phi: f64, d_vec: &DVector<C64>) -> Result<f64> {
        let n = d_vec.len();
        let lp = cfo_phasors(phi, n);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            let lt = C64::new(0.0, 2.0 * PI * k as f64 / n as f64) * lp[k];
            let td = lt * d_vec[k];
            let r = y[k] - lp[k] * d_vec[k];
            num += (td.conj() * r).re;
            den += td.norm_sqr();
        }
        if !(den > 0.0) {
            return Err(Error::SignalAbsent("received energy along the CFO direction is zero".into()));
        }
        Ok(phi + num / den)
    }

    /// Gradient of the exact objective in `(distance, azimuth, elevation)`
    /// and the matching diagonal Gauss-Newton curvature.
    pub fn position_gradient(&self, y: &DVector<C64>, state: &EstimatorState) -> Result<([f64; 3], [f64; 3])> {
        let cfg = self.model.config();
        let (g, dg) = g_matrix_with_gradients(&state.position_hat, cfg)?;
        let s2 = cfg.noise_variance();
        let mu = self.model.noiseless(&(g.g.transpose() * &self.w), state.phi_hat, &state.theta_hat);
        let r = y - mu;
        let mut grad = [0.0; 3];
        let mut curv = [0.0; 3];
        for k in 0..3 {
            let dmu = self.model.noiseless(&(dg[k].transpose() * &self.w), state.phi_hat, &state.theta_hat);
            grad[k] = -2.0 / s2 * dmu.dotc(&r).re;
            curv[k] = 2.0 / s2 * dmu.norm_squared();
        }
        Ok((grad, curv))
    }

    /// One simultaneous step `-step * grad / curv` on the polar position.
    /// Returns the new position and whether the distance was clamped.
    pub fn position_gd_step(&self, y: &DVector<C64>, state: &EstimatorState, step: f64) -> Result<(PolarPosition, bool)> {
        let (g, c) = self.position_gradient(y, state)?;
        let p = state.position_hat;
        let delta: Vec<f64> = (0..3).map(|k| if c[k] > 0.0 { step * g[k] / c[k] } else { 0.0 }).collect();
        let mut d = p.distance - delta[0];
        let clamped = d <= DISTANCE_FLOOR;
        if clamped {
            d = DISTANCE_FLOOR;
        }
        let (az, el) = (p.azimuth - delta[1], p.elevation - delta[2]);
        let next = PolarPosition::new(d, az, el).or_else(|_| PolarPosition::canonical(d, az, el))?;
        Ok((next, clamped))
    }

    pub fn run(&self, y: &DVector<C64>) -> Result<EstimatorState> {
        self.run_traced(y, None)
    }

    /// Runs the alternating estimation from the configured initial point.
    pub fn run_traced(&self, y: &DVector<C64>, mut trace: Option<&mut Vec<TraceRow>>) -> Result<EstimatorState> {
        let set = &self.settings;
        let mut state = self.initial_state(y)?;
        let mut push = |state: &EstimatorState, inner: usize| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow {
                    outer_iter: state.outer_iters,
                    inner_iter: inner,
                    objective: state.objective,
                    phi_hat: state.phi_hat,
                    position: state.position(),
                });
            }
        };
        push(&state, 0);
        let mut step = set.step_length;
        for outer in 1..=set.max_outer {
            state.outer_iters = outer;
            let before = state.objective;

            // closed-form refits of eta and phi
            let ws = self.workspace(y, &state)?;
            let (eta_new, phi_new) = match set.refit {
                Refit::Sequential => {
                    let eta = self.update_eta(&ws)?;
                    let d_vec = self.d_vec(&state.position_hat, &self.subspace.theta(&eta))?;
                    let phi = self.update_cfo(y, state.phi_hat, &d_vec)?;
                    (eta, phi)
                }
                Refit::Joint => {
                    let (eta, dphi) = self.update_joint(&ws, y)?;
                    (eta, state.phi_hat + dphi)
                }
            };
            self.accept_closed_form(y, &mut state, eta_new, phi_new)?;
            push(&state, 0);

            // gradient descent on the position
            let mut inner = 0;
            while inner < set.max_inner {
                inner += 1;
                let current = state.objective;
                let mut trial_step = step;
                let (next, clamped, value) = loop {
                    let (next, clamped) = self.position_gd_step(y, &state, trial_step)?;
                    let value = self.objective_at(y, state.phi_hat, &state.eta_hat, &next)?;
                    if !set.backtracking || value <= current {
                        break (next, clamped, value);
                    }
                    trial_step *= 0.5;
                    if trial_step < 1e-12 * set.step_length.max(1e-300) {
                        break (state.position_hat, false, current);
                    }
                };
                state.position_hat = next;
                state.clamped |= clamped;
                state.objective = value;
                push(&state, inner);
                if set.backtracking {
                    step = (2.0 * trial_step).min(set.step_length);
                }
                if (current - value).abs() <= set.eps_inner {
                    break;
                }
            }
            state.inner_iters = state.inner_iters.max(inner);
            state.total_inner_iters += inner;
            if (before - state.objective).abs() <= set.eps_outer {
                state.converged = true;
                break;
            }
        }
        Ok(state)
    }

    /// Takes the closed-form `(eta, phi)` update, shortened towards the
    /// current values if backtracking is on and the exact objective rose.
    fn accept_closed_form(&self, y: &DVector<C64>, state: &mut EstimatorState, eta: DVector<f64>, phi: f64) -> Result<()> {
        let current = state.objective;
        let mut t = 1.0;
        for _ in 0..40 {
            let e = &state.eta_hat + (&eta - &state.eta_hat) * t;
            let p = state.phi_hat + (phi - state.phi_hat) * t;
            let value = self.objective_at(y, p, &e, &state.position_hat)?;
            if !self.settings.backtracking || value <= current {
                state.theta_hat = self.subspace.theta(&e);
                state.eta_hat = e;
                state.phi_hat = p;
                state.objective = value;
                return Ok(());
            }
            t *= 0.5;
        }
        Ok(())
    }
}

/// Root mean square of the distances between estimates and the truth.
pub fn rmse_position(estimates: &[Position3], truth: &Position3) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidParameter("no estimates".into()));
    }
    let ss: f64 = estimates.iter().map(|e| e.distance(truth).powi(2)).sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

/// Squared distance between the CFO-plus-PN phase sequences after removing
/// their first entries, which is blind to the CFO/PN ambiguity.
pub fn joint_cfo_pn_mse(phi: f64, theta: &DVector<f64>, phi_hat: f64, theta_hat: &DVector<f64>) -> Result<f64> {
    if theta.len() != theta_hat.len() || theta.is_empty() {
        return Err(Error::InvalidParameter("phase-noise sequences must be non-empty and of equal length".into()));
    }
    let n = theta.len();
    let gamma = |p: f64, t: &DVector<f64>| -> Vec<f64> {
        let g: Vec<f64> = (0..n).map(|k| t[k] + 2.0 * PI * k as f64 * p / n as f64).collect();
        g.iter().map(|v| v - g[0]).collect()
    };
    let a = gamma(phi, theta);
    let b = gamma(phi_hat, theta_hat);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum())
}
