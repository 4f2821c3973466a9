//! RIS phase-shift design: semidefinite relaxation of the average-PEB
//! problem over AOI samples, rank-one extraction and Gaussian
//! randomization, plus the random baseline.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::geometry::{polar_jacobian, Position3};
use crate::hcrlb::{bim, bound_at, hcrlb, transition_matrix, w_linear_fim, WLinearFim};
use crate::sdp::{self, Assignment, BlockKind, ConeProgram, LinearForm, Lmi, SolveStatus, SolverReport, SolverSettings};
use crate::signal::{build_pn_covariance, PnCovariance, SignalModel, C64};

/// Unit-modulus RIS phase-shift vector `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShiftVector {
    w: DVector<C64>,
}

impl PhaseShiftVector {
    /// Unit-modulus vector with the given phases in radians.
    pub fn from_phases(phases: &[f64]) -> Self {
        Self { w: DVector::from_iterator(phases.len(), phases.iter().map(|&p| C64::from_polar(1.0, p))) }
    }

    /// Projects every entry onto the unit circle; zero entries become 1.
    pub fn project(v: &DVector<C64>) -> (Self, bool) {
        let scale = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let mut flagged = false;
        let w = v.map(|c| {
            if c.norm() <= 1e-12 * scale || scale == 0.0 {
                flagged = true;
                C64::new(1.0, 0.0)
            } else {
                c / c.norm()
            }
        });
        (Self { w }, flagged)
    }

    pub fn all_ones(n: usize) -> Self {
        Self { w: DVector::from_element(n, C64::new(1.0, 0.0)) }
    }

    pub fn as_vector(&self) -> &DVector<C64> {
        &self.w
    }

    /// `conj(w)`, the vector that the lifted matrix `W` is built from.
    pub fn conj_vector(&self) -> DVector<C64> {
        self.w.map(|c| c.conj())
    }

    pub fn phases(&self) -> Vec<f64> {
        self.w.iter().map(|c| c.arg()).collect()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["index", "phase_rad"])?;
        for (i, p) in self.phases().iter().enumerate() {
            wr.write_record([i.to_string(), format!("{p:.17e}")])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["index", "phase_rad"] {
            return Err(Error::Config(format!("unexpected phase-shift header {headers:?}")));
        }
        let mut phases = Vec::new();
        for (k, rec) in rd.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec[0].trim().parse().map_err(|e| Error::Parse { line: k + 2, msg: format!("{e}") })?;
            if idx != k {
                return Err(Error::Parse { line: k + 2, msg: format!("expected index {k}, found {idx}") });
            }
            let p: f64 = rec[1].trim().parse().map_err(|e| Error::Parse { line: k + 2, msg: format!("{e}") })?;
            if !p.is_finite() {
                return Err(Error::Parse { line: k + 2, msg: "non-finite phase".into() });
            }
            phases.push(p);
        }
        if phases.is_empty() {
            return Err(Error::Config("phase-shift file has no rows".into()));
        }
        Ok(Self::from_phases(&phases))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# risloc phase_shifts v1")?;
        self.write_csv(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// I.i.d. uniform phases on `[0, 2 pi)`.
pub fn random_phase_shifts(n_ris: usize, seed: u64) -> PhaseShiftVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..n_ris).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    PhaseShiftVector::from_phases(&phases)
}

/// `u` uniform points in the AOI cube.
pub fn sample_aoi(config: &ScenarioConfig, u: usize, seed: u64) -> Vec<Position3> {
    let (lo, hi) = config.aoi_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |a: f64, b: f64| if b > a { rng.random_range(a..b) } else { a };
    (0..u).map(|_| Position3::new(draw(lo.x, hi.x), draw(lo.y, hi.y), draw(lo.z, hi.z))).collect()
}

/// Average PEB (meters) over `positions` for a given phase-shift vector.
pub fn mean_peb(model: &SignalModel, pn_cov: &PnCovariance, positions: &[Position3], w: &PhaseShiftVector) -> Result<f64> {
    let pebs: Result<Vec<f64>> = positions.par_iter().map(|p| Ok(bound_at(model, pn_cov, p, w.as_vector())?.peb)).collect();
    let pebs = pebs?;
    if pebs.is_empty() {
        return Err(Error::InvalidParameter("no positions".into()));
    }
    Ok(pebs.iter().sum::<f64>() / pebs.len() as f64)
}

/// One AOI sample of the relaxation.
#[derive(Debug, Clone)]
pub struct SdrSample {
    pub position: Position3,
    pub fim: WLinearFim,
    /// `diag(B(I))^{-1/2}`, the equilibration applied to this sample's LMI.
    pub scaling: DVector<f64>,
    /// Position block of the transition matrix.
    pub xi_position: DMatrix<f64>,
}

/// Assembled relaxation.
#[derive(Debug, Clone)]
pub struct SdrProblem {
    pub program: ConeProgram,
    pub samples: Vec<SdrSample>,
    pub pn_cov: PnCovariance,
    /// The program's objective times `objective_scale` is the mean of
    /// `trace(Z_u)`, i.e. a lower bound on mean PEB^2.
    pub objective_scale: f64,
    pub w_block: usize,
    pub z_blocks: Vec<usize>,
}

/// PEB^2 of one sample at a Hermitian `W`.
fn sample_peb_sq(s: &SdrSample, w_mat: &DMatrix<C64>, pn_cov: &PnCovariance) -> Result<f64> {
    let f = s.fim.evaluate(w_mat);
    let b = bim(&f, pn_cov)?;
    let q = s.position.to_polar()?;
    Ok(hcrlb(&b, &transition_matrix(&q, pn_cov.dim())?)?.peb.powi(2))
}

/// Builds the relaxation over the given AOI samples: one Hermitian block
/// `W` with unit diagonal, one 3x3 block `Z_u` per sample, and per-sample
/// Schur-complement LMIs `[[Z_u, Xi_u], [Xi_u', B_u(W)]] >= 0`.
pub fn assemble_sdr(model: &SignalModel, samples: &[Position3]) -> Result<SdrProblem> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("at least one AOI sample is required".into()));
    }
    let cfg = model.config();
    let n = model.n();
    let nr = model.n_ris();
    let np = n + 4;
    let pn_cov = build_pn_covariance(n, cfg.pn_increment_var)?;
    let prior = pn_cov.inverse();
    let ident = DMatrix::<C64>::identity(nr, nr);

    let built: Result<Vec<(SdrSample, f64)>> = samples
        .par_iter()
        .map(|p| {
            let q = p.to_polar()?;
            let fim = w_linear_fim(model, &q)?;
            let b0 = bim(&fim.evaluate(&ident), &pn_cov)?;
            let diag = b0.matrix.diagonal();
            if diag.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Singular { cond: f64::INFINITY });
            }
            let scaling = diag.map(|v| 1.0 / v.sqrt());
            let s = SdrSample { position: *p, fim, scaling, xi_position: { let j = polar_jacobian(&q); DMatrix::from_fn(3, 3, |a, b| j[(a, b)]) } };
            let peb_sq = sample_peb_sq(&s, &ident, &pn_cov)?;
            Ok((s, peb_sq))
        })
        .collect();
    let built = built?;
    let zeta = built.iter().map(|(_, v)| v).sum::<f64>() / built.len() as f64;
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::Singular { cond: f64::INFINITY });
    }
    let samples: Vec<SdrSample> = built.into_iter().map(|(s, _)| s).collect();
    let u = samples.len();

    let mut prog = ConeProgram::new();
    let wb = prog.add_block("W", nr, BlockKind::Hermitian);
    let z_blocks: Vec<usize> = (0..u).map(|k| prog.add_block(format!("Z{k}"), 3, BlockKind::Symmetric)).collect();

    let mut obj = LinearForm::new();
    for &zb in &z_blocks {
        obj.extend(&prog.trace_form(zb, 1.0 / u as f64));
    }
    prog.set_objective(obj);
    for r in 0..nr {
        let f = prog.entry_form(wb, r, r, C64::new(1.0, 0.0));
        prog.add_equality(f, 1.0);
    }

    let inv_sqrt_zeta = 1.0 / zeta.sqrt();
    for (s, &zb) in samples.iter().zip(&z_blocks) {
        let base = prog.blocks[wb].atoms.len();
        for col in s.fim.atoms().column_iter() {
            prog.add_atom(wb, col.into_owned());
        }
        let d = &s.scaling;
        let mut constant = DMatrix::zeros(3 + np, 3 + np);
        for i in 0..3 {
            for k in 0..3 {
                let v = s.xi_position[(i, k)] * d[n + 1 + k] * inv_sqrt_zeta;
                constant[(i, 3 + n + 1 + k)] = v;
                constant[(3 + n + 1 + k, i)] = v;
            }
        }
        for i in 0..n {
            for j in 0..n {
                constant[(3 + 1 + i, 3 + 1 + j)] = prior[(i, j)] * d[1 + i] * d[1 + j];
            }
        }
        let mut lmi = Lmi::new(constant);
        for i in 0..3 {
            for j in i..3 {
                let f = prog.entry_form(zb, i, j, C64::new(1.0, 0.0));
                lmi.add_entry(i, j, f);
            }
        }
        let scale = 2.0 / s.fim.sigma_sq();
        for i in 0..np {
            for j in i..np {
                let terms = s.fim.terms(i, j);
                if terms.is_empty() {
                    continue;
                }
                let k = scale * d[i] * d[j];
                let mut f = LinearForm::new();
                for t in terms {
                    f.push(wb, t.coef * k, base + t.left, base + t.right);
                }
                lmi.add_entry(3 + i, 3 + j, f);
            }
        }
        prog.add_lmi(lmi);
    }
    Ok(SdrProblem { program: prog, samples, pn_cov, objective_scale: zeta, w_block: wb, z_blocks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdrSettings {
    pub solver: SolverSettings,
    /// Extra Gaussian-randomization candidates; 0 keeps the eigenvector.
    pub randomization_candidates: usize,
    pub randomization_seed: u64,
    /// Keep a solution whose status is `MaxIter` instead of failing.
    pub accept_inexact: bool,
}

impl Default for SdrSettings {
    fn default() -> Self {
        Self { solver: SolverSettings::default(), randomization_candidates: 200, randomization_seed: 1, accept_inexact: false }
    }
}

#[derive(Debug, Clone)]
pub struct SdrSolution {
    pub w_matrix: DMatrix<C64>,
    pub z_blocks: Vec<DMatrix<f64>>,
    /// Relaxed optimum: a lower bound on the mean PEB^2 (m^2) over samples.
    pub objective: f64,
    pub extracted: PhaseShiftVector,
    /// Mean PEB^2 over the samples at the extracted vector.
    pub realized_mean_peb_sq: f64,
    /// Mean PEB over the samples at the extracted vector.
    pub realized_mean_peb: f64,
    pub report: SolverReport,
    pub samples: Vec<Position3>,
    pub assignment: Assignment,
}

/// Leading eigenvector scaled by the square root of its eigenvalue, then
/// projected element-wise onto the unit circle. The returned vector is
/// `w = conj(wbar)` with the global phase fixed by `wbar[0]` real positive.
pub fn extract_rank1(w_mat: &DMatrix<C64>) -> Result<(PhaseShiftVector, bool)> {
    if w_mat.nrows() != w_mat.ncols() || w_mat.nrows() == 0 {
        return Err(Error::InvalidParameter("W must be square and non-empty".into()));
    }
    let herm = (w_mat + w_mat.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let imax = eig.eigenvalues.imax();
    let lam = eig.eigenvalues[imax].max(0.0);
    let v = eig.eigenvectors.column(imax) * C64::new(lam.sqrt(), 0.0);
    Ok(phase_project_conj(&v))
}

fn phase_project_conj(v: &DVector<C64>) -> (PhaseShiftVector, bool) {
    let (wbar, flagged) = PhaseShiftVector::project(v);
    let rot = wbar.w[0].conj();
    let w = wbar.w.map(|c| (c * rot).conj());
    (PhaseShiftVector { w }, flagged)
}

/// Draws candidates `~ CN(0, W)`, projects them onto the unit circle and
/// returns the best under `score` (lower is better). The eigenvector
/// extraction is always part of the pool.
pub fn gaussian_randomization<F>(w_mat: &DMatrix<C64>, n_candidates: usize, seed: u64, mut score: F) -> Result<PhaseShiftVector>
where
    F: FnMut(&PhaseShiftVector) -> Result<f64>,
{
    let (first, _) = extract_rank1(w_mat)?;
    if n_candidates == 0 {
        return Ok(first);
    }
    let herm = (w_mat + w_mat.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut factor = eig.eigenvectors.clone();
    for (j, s) in sq.iter().enumerate() {
        factor.column_mut(j).scale_mut(*s);
    }
    let n = w_mat.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_score = score(&first)?;
    let mut best = first;
    for _ in 0..n_candidates {
        let g = DVector::from_fn(n, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        });
        let (cand, _) = phase_project_conj(&(&factor * g));
        let s = score(&cand)?;
        if s < best_score {
            best_score = s;
            best = cand;
        }
    }
    Ok(best)
}

/// Mean PEB^2 and mean PEB over the relaxation samples for a rank-one `W`.
pub fn realized_sample_metrics(problem: &SdrProblem, w: &PhaseShiftVector) -> Result<(f64, f64)> {
    let wb = w.conj_vector();
    let w_mat = &wb * wb.adjoint();
    let vals: Result<Vec<f64>> = problem.samples.par_iter().map(|s| sample_peb_sq(s, &w_mat, &problem.pn_cov)).collect();
    let vals = vals?;
    let u = vals.len() as f64;
    Ok((vals.iter().sum::<f64>() / u, vals.iter().map(|v| v.sqrt()).sum::<f64>() / u))
}

/// Solves an assembled relaxation and extracts a phase-shift vector.
pub fn solve_sdr(problem: &SdrProblem, settings: &SdrSettings) -> Result<SdrSolution> {
    let (a, report) = sdp::solve_with(&problem.program, &settings.solver)?;
    match report.status {
        SolveStatus::Optimal => {}
        SolveStatus::NearOptimal => log::warn!(
            "relaxation solved to reduced accuracy (primal {:.1e}, dual {:.1e}, gap {:.1e})",
            report.primal_residual,
            report.dual_residual,
            report.gap
        ),
        SolveStatus::MaxIter if settings.accept_inexact => {}
        s => return Err(Error::Solver { status: s }),
    }
    let w_matrix = a.blocks[problem.w_block].clone();
    let z_blocks: Vec<DMatrix<f64>> = problem.z_blocks.iter().map(|&k| a.real_block(k)).collect();
    let extracted = gaussian_randomization(&w_matrix, settings.randomization_candidates, settings.randomization_seed, |cand| {
        realized_sample_metrics(problem, cand).map(|(_, peb)| peb)
    })?;
    let (realized_mean_peb_sq, realized_mean_peb) = realized_sample_metrics(problem, &extracted)?;
    Ok(SdrSolution {
        objective: report.objective * problem.objective_scale,
        w_matrix,
        z_blocks,
        extracted,
        realized_mean_peb_sq,
        realized_mean_peb,
        report,
        samples: problem.samples.iter().map(|s| s.position).collect(),
        assignment: a,
    })
}

/// Samples the AOI, assembles the relaxation and solves it.
pub fn optimize_phase_shifts(model: &SignalModel, u: usize, seed: u64, settings: &SdrSettings) -> Result<SdrSolution> {
    let samples = sample_aoi(model.config(), u, seed);
    let problem = assemble_sdr(model, &samples)?;
    solve_sdr(&problem, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sample_aoi_is_deterministic_and_bounded() {
        let cfg = ScenarioConfig::default();
        let a = sample_aoi(&cfg, 50, 3);
        assert_eq!(a, sample_aoi(&cfg, 50, 3));
        assert_ne!(a, sample_aoi(&cfg, 50, 4));
        let (lo, hi) = cfg.aoi_bounds();
        for p in &a {
            assert!(p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z);
        }
    }

    #[test]
    fn degenerate_cube_gives_center() {
        let mut cfg = ScenarioConfig::default();
        cfg.aoi_edge = 0.0;
        assert_eq!(sample_aoi(&cfg, 1, 0), vec![cfg.aoi_center]);
    }

    #[test]
    fn extraction_recovers_rank_one_up_to_phase() {
        let w = random_phase_shifts(9, 11);
        let wb = w.conj_vector();
        let (got, flagged) = extract_rank1(&(&wb * wb.adjoint())).unwrap();
        assert!(!flagged);
        let ratio = got.as_vector()[0] / w.as_vector()[0];
        for (a, b) in got.as_vector().iter().zip(w.as_vector().iter()) {
            assert_relative_eq!((a / b - ratio).norm(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn extraction_of_identity_is_all_ones() {
        let (w, _) = extract_rank1(&DMatrix::identity(2, 2)).unwrap();
        for c in w.as_vector().iter() {
            assert_relative_eq!(c.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(c.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_phases_are_unit_modulus_and_seeded() {
        let a = random_phase_shifts(100, 5);
        assert_eq!(a, random_phase_shifts(100, 5));
        assert!(a.as_vector().iter().all(|c| (c.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn phase_csv_round_trip() {
        let w = random_phase_shifts(16, 2);
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let back = PhaseShiftVector::read_csv(buf.as_slice()).unwrap();
        for (a, b) in w.as_vector().iter().zip(back.as_vector().iter()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn randomization_never_worse_than_eigenvector() {
        let w = random_phase_shifts(6, 1);
        let wb = w.conj_vector();
        let w_mat = &wb * wb.adjoint() * C64::new(0.7, 0.0) + DMatrix::identity(6, 6) * C64::new(0.3, 0.0);
        let score = |c: &PhaseShiftVector| Ok(c.phases().iter().map(|p| p.sin().abs()).sum::<f64>());
        let (eig, _) = extract_rank1(&w_mat).unwrap();
        let best = gaussian_randomization(&w_mat, 30, 9, score).unwrap();
        assert!(score(&best).unwrap() <= score(&eig).unwrap());
        assert_eq!(best, gaussian_randomization(&w_mat, 30, 9, score).unwrap());
        assert_eq!(gaussian_randomization(&w_mat, 0, 9, score).unwrap(), eig);
    }
}
