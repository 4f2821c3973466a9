//! Pilots, phase noise, the cascaded RIS channel and received-signal synthesis.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::geometry::{polar_jacobian, PolarPosition, Position3};

pub type C64 = Complex<f64>;

/// Complex column vector, as used for received signals and channels.
pub type CVector = DVector<C64>;

pub const J: C64 = C64 { re: 0.0, im: 1.0 };

/// Unit-modulus frequency-domain pilot symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSequence {
    symbols: DVector<C64>,
}

impl PilotSequence {
    pub fn new(symbols: DVector<C64>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidParameter("empty pilot sequence".into()));
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.norm() == 0.0 {
                return Err(Error::InvalidParameter(format!("pilot symbol {i} is zero")));
            }
            if (s.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!("pilot symbol {i} is not unit modulus")));
            }
        }
        Ok(Self { symbols })
    }

    /// Seeded QPSK sequence on {1, j, -1, -j}.
    pub fn qpsk(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const PTS: [C64; 4] = [
            C64 { re: 1.0, im: 0.0 },
            C64 { re: 0.0, im: 1.0 },
            C64 { re: -1.0, im: 0.0 },
            C64 { re: 0.0, im: -1.0 },
        ];
        let symbols = DVector::from_fn(n, |_, _| PTS[rng.random_range(0..4)]);
        Self { symbols }
    }

    pub fn symbols(&self) -> &DVector<C64> {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// `S = sqrt(N) F^H Diag(s)` with `F` the unitary DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub matrix: DMatrix<C64>,
}

pub fn build_signal_matrix(pilots: &PilotSequence) -> Result<SignalMatrix> {
    let n = pilots.len();
    let s = pilots.symbols();
    if s.iter().any(|v| v.norm() == 0.0) {
        return Err(Error::InvalidParameter("zero pilot symbol".into()));
    }
    let matrix = DMatrix::from_fn(n, n, |r, k| {
        let ang = 2.0 * PI * ((r * k) % n) as f64 / n as f64;
        C64::from_polar(1.0, ang) * s[k]
    });
    Ok(SignalMatrix { matrix })
}

/// Wiener phase-noise covariance `Psi[i,j] = var * (min(i,j) + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PnCovariance {
    pub matrix: DMatrix<f64>,
    pub increment_var: f64,
}

pub fn build_pn_covariance(n: usize, increment_var: f64) -> Result<PnCovariance> {
    if n == 0 {
        return Err(Error::InvalidParameter("covariance size must be positive".into()));
    }
    if !(increment_var > 0.0) || !increment_var.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "phase-noise increment variance must be positive, got {increment_var}"
        )));
    }
    let matrix = DMatrix::from_fn(n, n, |i, j| increment_var * (i.min(j) + 1) as f64);
    Ok(PnCovariance { matrix, increment_var })
}

impl PnCovariance {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Closed-form inverse: the tridiagonal precision of a Wiener path.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let k = 1.0 / self.increment_var;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = if i + 1 == n { k } else { 2.0 * k };
            if i + 1 < n {
                m[(i, i + 1)] = -k;
                m[(i + 1, i)] = -k;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseNoisePath {
    pub theta: DVector<f64>,
}

impl PhaseNoisePath {
    pub fn zeros(n: usize) -> Self {
        Self { theta: DVector::zeros(n) }
    }
}

/// Cumulative sum of i.i.d. Gaussian increments, starting from zero.
pub fn sample_phase_noise(cov: &PnCovariance, seed: u64) -> PhaseNoisePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_phase_noise_with(cov, &mut rng)
}

pub fn sample_phase_noise_with<R: Rng + ?Sized>(cov: &PnCovariance, rng: &mut R) -> PhaseNoisePath {
    let sd = cov.increment_var.sqrt();
    let mut acc = 0.0;
    let theta = DVector::from_fn(cov.dim(), |_, _| {
        let step: f64 = rng.sample(StandardNormal);
        acc += sd * step;
        acc
    });
    PhaseNoisePath { theta }
}

/// Wavelength of subcarrier `n` on a band centered at the carrier.
pub fn subcarrier_wavelength(n: usize, config: &ScenarioConfig) -> f64 {
    let nn = config.n_subcarriers as f64;
    let f = config.carrier_freq_hz + (n as f64 / nn - 0.5) * config.bandwidth_hz;
    config.light_speed / f
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub h: DVector<C64>,
}

/// Phase-shift-free cascaded channel, `N_R x N`; `h = G^T w`.
#[derive(Debug, Clone, PartialEq)]
pub struct GMatrix {
    pub g: DMatrix<C64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionParam {
    Distance,
    Azimuth,
    Elevation,
}

impl PositionParam {
    pub const ALL: [PositionParam; 3] = [Self::Distance, Self::Azimuth, Self::Elevation];

    pub fn index(self) -> usize {
        match self {
            Self::Distance => 0,
            Self::Azimuth => 1,
            Self::Elevation => 2,
        }
    }
}

fn check_w(w: &DVector<C64>, config: &ScenarioConfig) -> Result<()> {
    if w.len() != config.ris.n_elements() {
        return Err(Error::InvalidParameter(format!(
            "phase-shift vector has length {}, RIS has {} elements",
            w.len(),
            config.ris.n_elements()
        )));
    }
    Ok(())
}

/// Warns once per process; later hits go to the debug log.
fn warn_if_far(ue: &Position3, config: &ScenarioConfig) {
    static WARNED: std::sync::Once = std::sync::Once::new();
    if log::log_enabled!(log::Level::Warn) {
        let d = ue.norm();
        if !crate::geometry::fresnel_region_check(d, &config.ris, config.wavelength()) {
            let mut first = false;
            WARNED.call_once(|| first = true);
            if first {
                log::warn!("UE at {d:.3} m lies outside the RIS Fresnel region (further hits logged at debug level)");
            } else {
                log::debug!("UE at {d:.3} m lies outside the RIS Fresnel region");
            }
        }
    }
}

/// Builds `G` and, when requested, its derivatives with respect to the
/// polar UE coordinates. Phases advance by a per-element rotation so that
/// only one complex exponential is evaluated per element.
fn g_core(ue: &Position3, jac: Option<&nalgebra::Matrix3<f64>>, config: &ScenarioConfig) -> Result<(DMatrix<C64>, Option<[DMatrix<C64>; 3]>)> {
    let nr = config.ris.n_elements();
    let n = config.n_subcarriers;
    let c = config.light_speed;
    let gain = (config.antenna_gain_tx * config.antenna_gain_rx).sqrt() / (16.0 * PI * PI);
    let lam2: Vec<f64> = (0..n).map(|k| subcarrier_wavelength(k, config).powi(2)).collect();
    let mut g = DMatrix::zeros(nr, n);
    let mut grads = jac.map(|_| [DMatrix::zeros(nr, n), DMatrix::zeros(nr, n), DMatrix::zeros(nr, n)]);
    let dphase = 2.0 * PI * config.bandwidth_hz / (n as f64 * c);
    for (r, pr) in config.ris.element_positions().iter().enumerate() {
        let d_ar = config.anchor.distance(pr);
        let diff = *ue - *pr;
        let d_ru = diff.norm();
        if d_ru < 1e-12 {
            return Err(Error::DegenerateGeometry(format!("UE coincides with RIS element {}", r + 1)));
        }
        if d_ar < 1e-12 {
            return Err(Error::DegenerateGeometry(format!("anchor coincides with RIS element {}", r + 1)));
        }
        let amp = gain / (d_ar * d_ru);
        let step = C64::from_polar(1.0, -dphase * (d_ar + d_ru));
        let mut rot = C64::new(1.0, 0.0);
        for k in 0..n {
            if k % 8 == 0 {
                // re-anchor the recurrence to keep rounding drift negligible
                rot = C64::from_polar(1.0, -dphase * k as f64 * (d_ar + d_ru));
            }
            g[(r, k)] = rot * (amp * lam2[k]);
            rot *= step;
        }
        if let (Some(gr), Some(jm)) = (grads.as_mut(), jac) {
            let u = diff.to_vector() / d_ru;
            let dd = jm.transpose() * u;
            for k in 0..n {
                let fac = C64::new(-1.0 / d_ru, -dphase * k as f64);
                let base = g[(r, k)] * fac;
                for (m, grad) in gr.iter_mut().enumerate() {
                    grad[(r, k)] = base * dd[m];
                }
            }
        }
    }
    Ok((g, grads))
}

pub fn g_matrix(ue: &Position3, config: &ScenarioConfig) -> Result<GMatrix> {
    warn_if_far(ue, config);
    Ok(GMatrix { g: g_core(ue, None, config)?.0 })
}

/// `G` together with `dG/d(distance, azimuth, elevation)`.
pub fn g_matrix_with_gradients(ue: &PolarPosition, config: &ScenarioConfig) -> Result<(GMatrix, [DMatrix<C64>; 3])> {
    ue.ensure_off_axis()?;
    let jac = polar_jacobian(ue);
    let (g, grads) = g_core(&ue.to_cartesian(), Some(&jac), config)?;
    Ok((GMatrix { g }, grads.expect("requested")))
}

pub fn channel_vector(ue: &Position3, w: &DVector<C64>, config: &ScenarioConfig) -> Result<ChannelVector> {
    check_w(w, config)?;
    let g = g_matrix(ue, config)?;
    Ok(ChannelVector { h: g.g.transpose() * w })
}

pub fn channel_position_gradient(
    ue: &PolarPosition,
    w: &DVector<C64>,
    config: &ScenarioConfig,
    which: PositionParam,
) -> Result<DVector<C64>> {
    check_w(w, config)?;
    let (_, grads) = g_matrix_with_gradients(ue, config)?;
    Ok(grads[which.index()].transpose() * w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub y: DVector<C64>,
    pub true_phi: f64,
    pub true_theta: PhaseNoisePath,
}

impl ReceivedSignal {
    /// Writes `index,re,im` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["index", "re", "im"])?;
        for (i, v) in self.y.iter().enumerate() {
            wtr.write_record([i.to_string(), format!("{:e}", v.re), format!("{:e}", v.im)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Diagonal of the CFO rotation, `exp(j 2 pi n phi / N)`.
pub fn cfo_phasors(phi: f64, n: usize) -> DVector<C64> {
    DVector::from_fn(n, |k, _| C64::from_polar(1.0, 2.0 * PI * k as f64 * phi / n as f64))
}

pub fn pn_phasors(theta: &DVector<f64>) -> DVector<C64> {
    theta.map(|t| C64::from_polar(1.0, t))
}

/// Scenario plus the pilot-dependent quantities shared by synthesis,
/// estimation and bounds.
#[derive(Debug, Clone)]
pub struct SignalModel {
    config: ScenarioConfig,
    pilots: PilotSequence,
    s: SignalMatrix,
    s_t: DMatrix<C64>,
}

impl SignalModel {
    /// Uses the seeded QPSK pilots named in the config.
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let pilots = PilotSequence::qpsk(config.n_subcarriers, config.pilot_seed);
        Self::with_pilots(config, pilots)
    }

    pub fn with_pilots(config: ScenarioConfig, pilots: PilotSequence) -> Result<Self> {
        config.validate()?;
        if pilots.len() != config.n_subcarriers {
            return Err(Error::InvalidParameter(format!(
                "{} pilots for {} subcarriers",
                pilots.len(),
                config.n_subcarriers
            )));
        }
        let s = build_signal_matrix(&pilots)?;
        let s_t = s.matrix.transpose();
        Ok(Self { config, pilots, s, s_t })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn pilots(&self) -> &PilotSequence {
        &self.pilots
    }

    pub fn signal_matrix(&self) -> &SignalMatrix {
        &self.s
    }

    /// `S^T`, the map from channel to the pilot-modulated time-domain signal.
    pub fn s_transpose(&self) -> &DMatrix<C64> {
        &self.s_t
    }

    pub fn n(&self) -> usize {
        self.config.n_subcarriers
    }

    pub fn n_ris(&self) -> usize {
        self.config.ris.n_elements()
    }

    /// Same model with a different transmit power.
    pub fn with_tx_power_dbm(&self, dbm: f64) -> Self {
        let mut m = self.clone();
        m.config.tx_power_dbm = dbm;
        m
    }

    pub fn channel_vector(&self, ue: &Position3, w: &DVector<C64>) -> Result<ChannelVector> {
        channel_vector(ue, w, &self.config)
    }

    /// `sqrt(P) Lambda_phi Lambda_theta S^T h`.
    pub fn noiseless(&self, h: &DVector<C64>, phi: f64, theta: &DVector<f64>) -> DVector<C64> {
        let sp = self.config.tx_power_w().sqrt();
        let x = &self.s_t * h;
        let n = self.n();
        DVector::from_fn(n, |k, _| {
            let ang = 2.0 * PI * k as f64 * phi / n as f64 + theta[k];
            x[k] * C64::from_polar(sp, ang)
        })
    }

    pub fn synthesize_received(
        &self,
        ue: &Position3,
        w: &DVector<C64>,
        phi: f64,
        theta: &PhaseNoisePath,
        seed: u64,
    ) -> Result<ReceivedSignal> {
        if !(phi.abs() < 0.5) {
            return Err(Error::InvalidParameter(format!("normalized CFO {phi} outside (-0.5, 0.5)")));
        }
        if theta.theta.len() != self.n() {
            return Err(Error::InvalidParameter("phase-noise path length differs from N".into()));
        }
        let h = self.channel_vector(ue, w)?;
        let mut y = self.noiseless(&h.h, phi, &theta.theta);
        let sd = (0.5 * self.config.noise_variance()).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += C64::new(sd * re, sd * im);
        }
        Ok(ReceivedSignal { y, true_phi: phi, true_theta: theta.clone() })
    }

    /// `P ||S^T h||^2 / (N sigma^2)` in dB.
    pub fn receive_snr_db(&self, ue: &Position3, w: &DVector<C64>) -> Result<f64> {
        let h = self.channel_vector(ue, w)?;
        let e = (&self.s_t * &h.h).norm_squared();
        Ok(10.0 * (self.config.tx_power_w() * e / (self.n() as f64 * self.config.noise_variance())).log10())
    }
}

pub fn synthesize_received(
    ue: &Position3,
    w: &DVector<C64>,
    phi: f64,
    theta: &PhaseNoisePath,
    pilots: &PilotSequence,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<ReceivedSignal> {
    SignalModel::with_pilots(config.clone(), pilots.clone())?.synthesize_received(ue, w, phi, theta, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_w(n: usize, seed: u64) -> DVector<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
    }

    #[test]
    fn pn_covariance_examples() {
        let c = build_pn_covariance(3, 1.0).unwrap();
        assert_eq!(c.matrix, DMatrix::from_row_slice(3, 3, &[1., 1., 1., 1., 2., 2., 1., 2., 3.]));
        let c = build_pn_covariance(1, 0.5).unwrap();
        assert_eq!(c.matrix[(0, 0)], 0.5);
        assert!(build_pn_covariance(4, 0.0).is_err());
        let c = build_pn_covariance(32, 1e-3).unwrap();
        for i in 1..32 {
            assert_relative_eq!(c.matrix[(i, i)] - c.matrix[(i - 1, i - 1)], 1e-3, epsilon = 1e-15);
        }
        assert!(c.matrix.clone().cholesky().is_some());
        let prod = &c.matrix * c.inverse();
        assert!((prod - DMatrix::identity(32, 32)).abs().max() < 1e-9);
    }

    #[test]
    fn phase_noise_statistics() {
        let c = build_pn_covariance(8, 0.01).unwrap();
        assert_eq!(sample_phase_noise(&c, 3), sample_phase_noise(&c, 3));
        let tiny = build_pn_covariance(8, 1e-300).unwrap();
        assert!(sample_phase_noise(&tiny, 1).theta.iter().all(|t| t.abs() < 1e-140));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut var = [0.0; 8];
        for _ in 0..draws {
            let p = sample_phase_noise_with(&c, &mut rng);
            for n in 0..8 {
                var[n] += p.theta[n] * p.theta[n];
            }
        }
        for (n, v) in var.iter().enumerate() {
            let emp = v / draws as f64;
            let expect = 0.01 * (n + 1) as f64;
            assert!((emp - expect).abs() < 0.05 * expect, "n={n} emp={emp} expect={expect}");
        }
    }

    #[test]
    fn signal_matrix_properties() {
        let ones = PilotSequence::new(DVector::from_element(4, C64::new(1.0, 0.0))).unwrap();
        let s = build_signal_matrix(&ones).unwrap().matrix;
        for k in 0..4 {
            assert_relative_eq!(s[(0, k)].re, 1.0);
            assert_relative_eq!(s[(0, k)].im, 0.0);
        }
        // second row is exp(j 2 pi k / 4) = 1, j, -1, -j
        assert!((s[(1, 1)] - J).norm() < 1e-15);
        assert!((s[(1, 2)] + 1.0).norm() < 1e-15);
        let one = PilotSequence::new(DVector::from_element(1, C64::new(1.0, 0.0))).unwrap();
        assert_eq!(build_signal_matrix(&one).unwrap().matrix[(0, 0)], C64::new(1.0, 0.0));

        let p = PilotSequence::qpsk(32, 7);
        let s = build_signal_matrix(&p).unwrap().matrix;
        let gram = s.adjoint() * &s;
        let expect = DMatrix::<C64>::identity(32, 32) * C64::new(32.0, 0.0);
        assert!((gram - expect).norm() < 1e-9);
        for col in s.column_iter() {
            assert_relative_eq!(col.norm(), 32f64.sqrt(), epsilon = 1e-12);
        }
        assert!(PilotSequence::new(DVector::from_element(2, C64::new(0.0, 0.0))).is_err());
    }

    #[test]
    fn wavelength_grid() {
        let c = ScenarioConfig::default();
        assert_eq!(subcarrier_wavelength(16, &c), 3e8 / 2.8e9);
        assert_relative_eq!(subcarrier_wavelength(0, &c), 3e8 / 2.75e9, epsilon = 1e-15);
        assert_relative_eq!(subcarrier_wavelength(0, &c), 0.10909, epsilon = 1e-5);
        for n in 1..32 {
            assert!(subcarrier_wavelength(n, &c) < subcarrier_wavelength(n - 1, &c));
        }
    }

    #[test]
    fn channel_is_g_transpose_w() {
        let c = ScenarioConfig::default();
        let ue = Position3::new(1.7, 2.3, 0.2);
        let g = g_matrix(&ue, &c).unwrap();
        for s in 0..3 {
            let w = random_w(81, s);
            let h = channel_vector(&ue, &w, &c).unwrap();
            let direct = DVector::from_fn(32, |n, _| {
                let mut acc = C64::new(0.0, 0.0);
                for (r, pr) in c.ris.element_positions().iter().enumerate() {
                    let dar = c.anchor.distance(pr);
                    let dru = ue.distance(pr);
                    let lam = subcarrier_wavelength(n, &c);
                    let amp = (lam / (4.0 * PI * dar)) * (lam / (4.0 * PI * dru));
                    let ph = -2.0 * PI * n as f64 * c.bandwidth_hz / 32.0 * (dar + dru) / c.light_speed;
                    acc += w[r] * C64::from_polar(amp, ph);
                }
                acc
            });
            assert!((&h.h - &direct).norm() / direct.norm() < 1e-12);
            assert!((g.g.transpose() * &w - &h.h).norm() / h.h.norm() < 1e-12);
        }
        let zero = DVector::zeros(81);
        assert_eq!(channel_vector(&ue, &zero, &c).unwrap().h.norm(), 0.0);
    }

    #[test]
    fn single_element_closed_form() {
        let c = ScenarioConfig::reference(1).unwrap();
        let ue = Position3::new(1.0, 2.0, 0.5);
        let w = DVector::from_element(1, C64::new(1.0, 0.0));
        let h = channel_vector(&ue, &w, &c).unwrap();
        let lam = subcarrier_wavelength(0, &c);
        let expect = (lam / (4.0 * PI * 3.0)) * (lam / (4.0 * PI * ue.norm()));
        assert_relative_eq!(h.h[0].norm(), expect, max_relative = 1e-14);
        let g = g_matrix(&ue, &c).unwrap();
        assert!((g.g.row(0).transpose() - &h.h).norm() < 1e-20);
    }

    #[test]
    fn position_gradients_match_finite_differences() {
        let c = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (lo, hi) = c.aoi_bounds();
        for t in 0..20 {
            let p = Position3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let q = p.to_polar().unwrap();
            let w = random_w(81, 100 + t);
            for which in PositionParam::ALL {
                let a = channel_position_gradient(&q, &w, &c, which).unwrap();
                let h = 1e-6;
                let mut qp = q.as_array();
                let mut qm = q.as_array();
                qp[which.index()] += h;
                qm[which.index()] -= h;
                let to = |v: [f64; 3]| PolarPosition { distance: v[0], azimuth: v[1], elevation: v[2] }.to_cartesian();
                let fd = (channel_vector(&to(qp), &w, &c).unwrap().h - channel_vector(&to(qm), &w, &c).unwrap().h)
                    / C64::new(2.0 * h, 0.0);
                let err = (&fd - &a).norm() / a.norm();
                assert!(err < 1e-4, "trial {t} {which:?}: rel err {err}");
            }
        }
        let q = Position3::new(2.0, 2.0, 0.0).to_polar().unwrap();
        let g0 = channel_position_gradient(&q, &DVector::zeros(81), &c, PositionParam::Azimuth).unwrap();
        assert_eq!(g0.norm(), 0.0);
        let pole = PolarPosition::new(2.0, 0.0, 0.0).unwrap();
        assert!(channel_position_gradient(&pole, &random_w(81, 1), &c, PositionParam::Distance).is_err());
    }

    #[test]
    fn synthesis_examples() {
        let c = ScenarioConfig::default();
        let m = SignalModel::new(c.clone()).unwrap();
        let ue = Position3::new(1.5, 2.15, 0.45);
        let w = random_w(81, 9);
        let h = m.channel_vector(&ue, &w).unwrap();

        let mut quiet = c.clone();
        quiet.set_noise_power_dbm(-1000.0);
        let mq = SignalModel::new(quiet).unwrap();
        let r = mq.synthesize_received(&ue, &w, 0.0, &PhaseNoisePath::zeros(32), 1).unwrap();
        let clean = m.s_transpose() * &h.h * C64::new(c.tx_power_w().sqrt(), 0.0);
        assert!((&r.y - &clean).norm() <= 1e-12 * clean.norm());

        let off = SignalModel::new(c.clone().with_tx_power_dbm(-1000.0)).unwrap();
        let mut off_cfg = off.config().clone();
        off_cfg.set_noise_power_dbm(-1000.0);
        let off = SignalModel::new(off_cfg).unwrap();
        let r = off.synthesize_received(&ue, &w, 0.1, &PhaseNoisePath::zeros(32), 1).unwrap();
        assert!(r.y.norm() < 1e-40);
        assert!(m.synthesize_received(&ue, &w, 0.6, &PhaseNoisePath::zeros(32), 1).is_err());
    }

    #[test]
    fn noise_power_concentrates() {
        let c = ScenarioConfig::default();
        let m = SignalModel::new(c.clone()).unwrap();
        let ue = Position3::new(1.5, 2.15, 0.45);
        let w = random_w(81, 9);
        let theta = PhaseNoisePath::zeros(32);
        let h = m.channel_vector(&ue, &w).unwrap();
        let mean = m.noiseless(&h.h, 0.05, &theta.theta);
        let trials = 10_000;
        let mut acc = 0.0;
        for s in 0..trials {
            let r = m.synthesize_received(&ue, &w, 0.05, &theta, s).unwrap();
            acc += (&r.y - &mean).norm_squared() / 32.0;
        }
        let est = acc / trials as f64;
        assert!((est / c.noise_variance() - 1.0).abs() < 0.05);
    }

    #[test]
    fn ambiguity_transform_leaves_signal_unchanged() {
        let c = ScenarioConfig::default();
        let m = SignalModel::new(c.clone()).unwrap();
        let ue = Position3::new(1.5, 2.15, 0.45);
        let w = random_w(81, 2);
        let theta = sample_phase_noise(&build_pn_covariance(32, 1e-3).unwrap(), 4);
        let base = m.synthesize_received(&ue, &w, 0.1, &theta, 77).unwrap();
        for eps in [-0.1, -0.05, 0.05, 0.1] {
            let shifted = PhaseNoisePath {
                theta: DVector::from_fn(32, |n, _| theta.theta[n] + 2.0 * PI * n as f64 * eps / 32.0),
            };
            let other = m.synthesize_received(&ue, &w, 0.1 - eps, &shifted, 77).unwrap();
            assert!((&other.y - &base.y).norm() <= 1e-12 * base.y.norm());
        }
    }

    #[test]
    fn receive_snr_is_in_expected_range() {
        let m = SignalModel::new(ScenarioConfig::default()).unwrap();
        let snr = m.receive_snr_db(&Position3::new(1.5, 2.15, 0.45), &random_w(81, 3)).unwrap();
        assert!(snr > -10.0 && snr < 40.0, "snr {snr}");
    }
}
