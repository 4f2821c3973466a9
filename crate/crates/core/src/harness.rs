//! Monte Carlo sweeps, PEB maps, CDFs and convergence traces, with
//! deterministic seeding and versioned CSV output.
//!
//! Every dataset carries a `schema_version` column. Column lists are
//! exposed through [`SCHEMAS`] so downstream tools can validate inputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::estimator::{joint_cfo_pn_mse, Estimator, EstimatorConfig, Refit, TraceRow};
use crate::geometry::Position3;
use crate::hcrlb::bound_at;
use crate::ris::{optimize_phase_shifts, random_phase_shifts, PhaseShiftVector, SdrSettings};
use crate::signal::{build_pn_covariance, sample_phase_noise_with, PnCovariance, SignalModel};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest CFO magnitude drawn per trial.
pub const CFO_RANGE: f64 = 0.15;

/// Column layout of one CSV dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static [&'static str],
}

pub const RESULTS_SCHEMA: Schema = Schema {
    name: "results",
    version: SCHEMA_VERSION,
    columns: &[
        "schema_version", "experiment", "seed", "n_ris", "tx_power_dbm", "pn_var", "trial", "true_x", "true_y",
        "true_z", "est_x", "est_y", "est_z", "sq_error", "cfo_pn_sq_error", "peb", "hcrlb_cfo_pn", "outer_iters",
        "inner_iters", "status",
    ],
};

pub const TIMING_SCHEMA: Schema = Schema {
    name: "timing",
    version: SCHEMA_VERSION,
    columns: &["schema_version", "experiment", "n_ris", "tx_power_dbm", "pn_var", "trial", "wall_time_s"],
};

pub const SUMMARY_SCHEMA: Schema = Schema {
    name: "summary",
    version: SCHEMA_VERSION,
    columns: &[
        "schema_version", "experiment", "n_ris", "tx_power_dbm", "pn_var", "trials", "rmse", "median_error",
        "cfo_pn_mse", "mean_peb", "mean_hcrlb_cfo_pn", "converged_fraction",
    ],
};

pub const HEATMAP_SCHEMA: Schema = Schema {
    name: "heatmap",
    version: SCHEMA_VERSION,
    columns: &["schema_version", "ix", "iy", "x", "y", "z", "in_aoi", "peb"],
};

pub const CDF_SCHEMA: Schema = Schema {
    name: "cdf",
    version: SCHEMA_VERSION,
    columns: &["schema_version", "metric", "n_ris", "tx_power_dbm", "pn_var", "value", "cdf"],
};

pub const TRACE_SCHEMA: Schema = Schema {
    name: "trace",
    version: SCHEMA_VERSION,
    columns: &["schema_version", "step", "outer_iter", "inner_iter", "end_of_outer", "objective", "phi_hat", "position_error"],
};

pub const PHASES_SCHEMA: Schema = Schema { name: "phases", version: SCHEMA_VERSION, columns: &["index", "phase_rad"] };

pub const SCHEMAS: &[Schema] =
    &[RESULTS_SCHEMA, TIMING_SCHEMA, SUMMARY_SCHEMA, HEATMAP_SCHEMA, CDF_SCHEMA, TRACE_SCHEMA, PHASES_SCHEMA];

/// Where the phase shifts of a sweep point come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseShiftSource {
    /// Solve the relaxation at each sweep point with `samples` AOI points.
    Optimized { samples: usize },
    Random { seed: u64 },
    /// One vector for all points; requires a single RIS size.
    Fixed(PhaseShiftVector),
}

/// Optional overrides of the estimator defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorTuning {
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub refit: Option<Refit>,
    pub backtracking: Option<bool>,
}

impl EstimatorTuning {
    pub fn apply(&self, mut cfg: EstimatorConfig) -> EstimatorConfig {
        if let Some(v) = self.max_outer {
            cfg.max_outer = v;
        }
        if let Some(v) = self.max_inner {
            cfg.max_inner = v;
        }
        if let Some(v) = self.refit {
            cfg.refit = v;
        }
        if let Some(v) = self.backtracking {
            cfg.backtracking = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub id: String,
    pub scenario: ScenarioConfig,
    pub tx_powers_dbm: Vec<f64>,
    pub n_ris: Vec<usize>,
    pub pn_vars: Vec<f64>,
    pub trials: usize,
    /// Fixed UE position; `None` draws a uniform AOI point per trial.
    pub test_position: Option<Position3>,
    pub grid_resolution: usize,
    pub master_seed: u64,
    pub phase_shifts: PhaseShiftSource,
    pub sdr: SdrSettings,
    pub estimator: EstimatorTuning,
}

impl ExperimentSpec {
    /// Single-point spec taking every axis from `scenario`.
    pub fn single(id: &str, scenario: ScenarioConfig, trials: usize, master_seed: u64) -> Self {
        Self {
            id: id.to_string(),
            tx_powers_dbm: vec![scenario.tx_power_dbm],
            n_ris: vec![scenario.ris.n_elements()],
            pn_vars: vec![scenario.pn_increment_var],
            scenario,
            trials,
            test_position: None,
            grid_resolution: 9,
            master_seed,
            phase_shifts: PhaseShiftSource::Optimized { samples: 10 },
            sdr: SdrSettings::default(),
            estimator: EstimatorTuning::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("at least one trial per point is required".into()));
        }
        if self.tx_powers_dbm.is_empty() || self.n_ris.is_empty() || self.pn_vars.is_empty() {
            return Err(Error::InvalidParameter("sweep axes must be non-empty".into()));
        }
        if self.grid_resolution == 0 {
            return Err(Error::InvalidParameter("grid resolution must be at least 1".into()));
        }
        if let PhaseShiftSource::Fixed(w) = &self.phase_shifts {
            if self.n_ris.iter().any(|&n| n != w.len()) {
                return Err(Error::InvalidParameter(format!("fixed phase shifts have {} entries", w.len())));
            }
        }
        if let PhaseShiftSource::Optimized { samples: 0 } = self.phase_shifts {
            return Err(Error::InvalidParameter("optimization needs at least one AOI sample".into()));
        }
        for &n in &self.n_ris {
            self.point_scenario(&SweepPoint { n_ris: n, tx_power_dbm: self.tx_powers_dbm[0], pn_var: self.pn_vars[0] })?;
        }
        Ok(())
    }

    /// All sweep points, ordered by RIS size, then power, then PN variance.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &n_ris in &self.n_ris {
            for &tx_power_dbm in &self.tx_powers_dbm {
                for &pn_var in &self.pn_vars {
                    out.push(SweepPoint { n_ris, tx_power_dbm, pn_var });
                }
            }
        }
        out
    }

    pub fn point_scenario(&self, p: &SweepPoint) -> Result<ScenarioConfig> {
        let cfg = self.scenario.clone().with_ris_elements(p.n_ris)?.with_tx_power_dbm(p.tx_power_dbm).with_pn_increment_var(p.pn_var);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of one trial, derived from the master seed alone so the trial
    /// can be replayed in isolation.
    pub fn trial_seed(&self, point_index: usize, trial: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(((point_index as u64) << 32) | trial as u64);
        rng.next_u64()
    }

    /// Phase shifts for one sweep point.
    pub fn phase_shifts_for(&self, point_index: usize, model: &SignalModel) -> Result<PhaseShiftVector> {
        match &self.phase_shifts {
            PhaseShiftSource::Fixed(w) => Ok(w.clone()),
            PhaseShiftSource::Random { seed } => Ok(random_phase_shifts(model.n_ris(), seed.wrapping_add(point_index as u64))),
            PhaseShiftSource::Optimized { samples } => {
                let t = Instant::now();
                let sol = optimize_phase_shifts(model, *samples, self.master_seed, &self.sdr)?;
                info!(
                    "optimized {} phase shifts at {} dBm in {:.1}s, mean PEB {:.3e} m",
                    model.n_ris(),
                    model.config().tx_power_dbm,
                    t.elapsed().as_secs_f64(),
                    sol.realized_mean_peb
                );
                Ok(sol.extracted)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub n_ris: usize,
    pub tx_power_dbm: f64,
    pub pn_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Converged,
    MaxIter,
    Failed,
}

/// One Monte Carlo trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub n_ris: usize,
    pub tx_power_dbm: f64,
    pub pn_var: f64,
    pub trial: usize,
    pub true_x: f64,
    pub true_y: f64,
    pub true_z: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    /// Squared position error, m^2.
    pub sq_error: f64,
    pub cfo_pn_sq_error: f64,
    pub peb: f64,
    pub hcrlb_cfo_pn: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub status: TrialStatus,
    /// Kept out of the results file so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl ResultRecord {
    pub fn error(&self) -> f64 {
        self.sq_error.sqrt()
    }

    fn point(&self) -> (usize, u64, u64) {
        (self.n_ris, self.tx_power_dbm.to_bits(), self.pn_var.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub schema_version: u32,
    pub experiment: String,
    pub n_ris: usize,
    pub tx_power_dbm: f64,
    pub pn_var: f64,
    pub trial: usize,
    pub wall_time_s: f64,
}

/// Everything one trial needs besides its seed.
pub struct TrialContext<'a> {
    pub experiment: &'a str,
    pub model: &'a SignalModel,
    pub pn_cov: &'a PnCovariance,
    pub w: &'a PhaseShiftVector,
    pub estimator: EstimatorConfig,
    pub test_position: Option<Position3>,
    pub pn_var: f64,
}

/// Runs one trial. Failures become rows with `status = failed`.
pub fn run_trial(ctx: &TrialContext, trial: usize, seed: u64) -> ResultRecord {
    let t = Instant::now();
    let cfg = ctx.model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = ctx.test_position.unwrap_or_else(|| {
        let (lo, hi) = cfg.aoi_bounds();
        let mut draw = |a: f64, b: f64| if b > a { rng.random_range(a..b) } else { a };
        Position3::new(draw(lo.x, hi.x), draw(lo.y, hi.y), draw(lo.z, hi.z))
    });
    let phi = rng.random_range(-CFO_RANGE..CFO_RANGE);
    let theta = sample_phase_noise_with(ctx.pn_cov, &mut rng);
    let noise_seed = rng.next_u64();
    let nan = f64::NAN;
    let mut rec = ResultRecord {
        schema_version: SCHEMA_VERSION,
        experiment: ctx.experiment.to_string(),
        seed,
        n_ris: ctx.model.n_ris(),
        tx_power_dbm: cfg.tx_power_dbm,
        pn_var: ctx.pn_var,
        trial,
        true_x: truth.x,
        true_y: truth.y,
        true_z: truth.z,
        est_x: nan,
        est_y: nan,
        est_z: nan,
        sq_error: nan,
        cfo_pn_sq_error: nan,
        peb: nan,
        hcrlb_cfo_pn: nan,
        outer_iters: 0,
        inner_iters: 0,
        status: TrialStatus::Failed,
        wall_time_s: 0.0,
    };
    let w = ctx.w.as_vector();
    match bound_at(ctx.model, ctx.pn_cov, &truth, w) {
        Ok(b) => {
            rec.peb = b.peb;
            rec.hcrlb_cfo_pn = b.cfo_pn_bound;
        }
        Err(e) => warn!("no bound for trial {trial} at {truth:?}: {e}"),
    }
    let outcome = ctx.model.synthesize_received(&truth, w, phi, &theta, noise_seed).and_then(|sig| {
        let est = Estimator::new(ctx.model, ctx.pn_cov, w, ctx.estimator.clone())?;
        est.run(&sig.y)
    });
    match outcome {
        Ok(s) => {
            let p = s.position();
            rec.est_x = p.x;
            rec.est_y = p.y;
            rec.est_z = p.z;
            rec.sq_error = p.distance(&truth).powi(2);
            rec.cfo_pn_sq_error = joint_cfo_pn_mse(phi, &theta.theta, s.phi_hat, &s.theta_hat).unwrap_or(nan);
            rec.outer_iters = s.outer_iters;
            rec.inner_iters = s.inner_iters;
            rec.status = if s.converged { TrialStatus::Converged } else { TrialStatus::MaxIter };
        }
        Err(e) => warn!("trial {trial} failed: {e}"),
    }
    rec.wall_time_s = t.elapsed().as_secs_f64();
    rec
}

/// Runs every sweep point and trial. Rows come back in sweep order, then
/// trial order, regardless of scheduling.
pub fn run_monte_carlo(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let points = spec.points();
    let prepared: Vec<(SignalModel, PnCovariance, PhaseShiftVector)> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = spec.point_scenario(p)?;
            let pn = build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var)?;
            let model = SignalModel::new(cfg)?;
            let w = spec.phase_shifts_for(i, &model)?;
            Ok((model, pn, w))
        })
        .collect::<Result<_>>()?;
    let items: Vec<(usize, usize)> = (0..points.len()).flat_map(|i| (0..spec.trials).map(move |t| (i, t))).collect();
    let records = items
        .par_iter()
        .map(|&(i, t)| {
            let (model, pn, w) = &prepared[i];
            let ctx = TrialContext {
                experiment: &spec.id,
                model,
                pn_cov: pn,
                w,
                estimator: spec.estimator.apply(EstimatorConfig::for_model(model)),
                test_position: spec.test_position,
                pn_var: points[i].pn_var,
            };
            run_trial(&ctx, t, spec.trial_seed(i, t))
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub experiment: String,
    pub n_ris: usize,
    pub tx_power_dbm: f64,
    pub pn_var: f64,
    pub trials: usize,
    pub rmse: f64,
    pub median_error: f64,
    pub cfo_pn_mse: f64,
    pub mean_peb: f64,
    pub mean_hcrlb_cfo_pn: f64,
    pub converged_fraction: f64,
}

fn mean_finite(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Median of the finite entries; `NaN` if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-point aggregates, in order of first appearance. Failed trials
/// count in `trials` but not in the error statistics.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(usize, u64, u64), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = r.point();
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let errs: Vec<f64> = g.iter().map(|r| r.error()).collect();
            SummaryRow {
                schema_version: SCHEMA_VERSION,
                experiment: g[0].experiment.clone(),
                n_ris: g[0].n_ris,
                tx_power_dbm: g[0].tx_power_dbm,
                pn_var: g[0].pn_var,
                trials: g.len(),
                rmse: mean_finite(g.iter().map(|r| r.sq_error)).sqrt(),
                median_error: median(&errs),
                cfo_pn_mse: mean_finite(g.iter().map(|r| r.cfo_pn_sq_error)),
                mean_peb: mean_finite(g.iter().map(|r| r.peb)),
                mean_hcrlb_cfo_pn: mean_finite(g.iter().map(|r| r.hcrlb_cfo_pn)),
                converged_fraction: g.iter().filter(|r| r.status == TrialStatus::Converged).count() as f64 / g.len() as f64,
            }
        })
        .collect()
}

pub fn timing_rows(records: &[ResultRecord]) -> Vec<TimingRow> {
    records
        .iter()
        .map(|r| TimingRow {
            schema_version: SCHEMA_VERSION,
            experiment: r.experiment.clone(),
            n_ris: r.n_ris,
            tx_power_dbm: r.tx_power_dbm,
            pn_var: r.pn_var,
            trial: r.trial,
            wall_time_s: r.wall_time_s,
        })
        .collect()
}

/// Horizontal plane for PEB maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneSpec {
    pub z: f64,
    /// Extra width on each side of the AOI, meters.
    pub margin: f64,
}

impl PlaneSpec {
    pub fn through_aoi_center(config: &ScenarioConfig) -> Self {
        Self { z: config.aoi_center.z, margin: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub schema_version: u32,
    pub ix: usize,
    pub iy: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub in_aoi: bool,
    /// Empty in the CSV where the bound is unavailable.
    pub peb: Option<f64>,
}

/// Coordinates of a `resolution` point grid from `lo` to `hi`.
pub fn grid_axis(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect()
}

/// PEB over a `resolution x resolution` grid on the plane.
pub fn peb_heatmap(
    model: &SignalModel,
    pn_cov: &PnCovariance,
    w: &PhaseShiftVector,
    plane: &PlaneSpec,
    resolution: usize,
) -> Result<Vec<HeatmapRow>> {
    if resolution == 0 {
        return Err(Error::InvalidParameter("grid resolution must be at least 1".into()));
    }
    if !(plane.margin >= 0.0) {
        return Err(Error::InvalidParameter(format!("negative margin {}", plane.margin)));
    }
    let (lo, hi) = model.config().aoi_bounds();
    let xs = grid_axis(lo.x - plane.margin, hi.x + plane.margin, resolution);
    let ys = grid_axis(lo.y - plane.margin, hi.y + plane.margin, resolution);
    let cells: Vec<(usize, usize)> = (0..resolution).flat_map(|iy| (0..resolution).map(move |ix| (ix, iy))).collect();
    let tol = 1e-12;
    Ok(cells
        .par_iter()
        .map(|&(ix, iy)| {
            let p = Position3::new(xs[ix], ys[iy], plane.z);
            let in_aoi = p.x >= lo.x - tol && p.x <= hi.x + tol && p.y >= lo.y - tol && p.y <= hi.y + tol && p.z >= lo.z - tol && p.z <= hi.z + tol;
            let peb = bound_at(model, pn_cov, &p, w.as_vector()).ok().map(|b| b.peb).filter(|v| v.is_finite());
            HeatmapRow { schema_version: SCHEMA_VERSION, ix, iy, x: p.x, y: p.y, z: p.z, in_aoi, peb }
        })
        .collect())
}

/// Mean PEB over heatmap cells with a bound; `NaN` if none.
pub fn heatmap_mean(rows: &[HeatmapRow]) -> f64 {
    mean_finite(rows.iter().filter_map(|r| r.peb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMetric {
    Error,
    Peb,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfRow {
    pub schema_version: u32,
    pub metric: CdfMetric,
    pub n_ris: usize,
    pub tx_power_dbm: f64,
    pub pn_var: f64,
    pub value: f64,
    pub cdf: f64,
}

/// Empirical CDF of a metric per sweep point, over trials with a finite
/// value.
pub fn cdf_curves(records: &[ResultRecord], metric: CdfMetric) -> Result<Vec<CdfRow>> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let mut out = Vec::new();
    for s in summarize(records) {
        let mut v: Vec<f64> = records
            .iter()
            .filter(|r| r.point() == (s.n_ris, s.tx_power_dbm.to_bits(), s.pn_var.to_bits()))
            .map(|r| match metric {
                CdfMetric::Error => r.error(),
                CdfMetric::Peb => r.peb,
            })
            .filter(|x| x.is_finite())
            .collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        out.extend(v.iter().enumerate().map(|(i, &value)| CdfRow {
            schema_version: SCHEMA_VERSION,
            metric,
            n_ris: s.n_ris,
            tx_power_dbm: s.tx_power_dbm,
            pn_var: s.pn_var,
            value,
            cdf: (i + 1) as f64 / n,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceCsvRow {
    pub schema_version: u32,
    pub step: usize,
    pub outer_iter: usize,
    pub inner_iter: usize,
    /// Last row of an outer iteration, so filtering on it gives the
    /// per-outer-iteration view.
    pub end_of_outer: bool,
    pub objective: f64,
    pub phi_hat: f64,
    pub position_error: f64,
}

/// Trace rows with the position error against `truth`.
pub fn trace_rows(trace: &[TraceRow], truth: &Position3) -> Vec<TraceCsvRow> {
    trace
        .iter()
        .enumerate()
        .map(|(i, r)| TraceCsvRow {
            schema_version: SCHEMA_VERSION,
            step: i,
            outer_iter: r.outer_iter,
            inner_iter: r.inner_iter,
            end_of_outer: trace.get(i + 1).is_none_or(|n| n.outer_iter != r.outer_iter),
            objective: r.objective,
            phi_hat: r.phi_hat,
            position_error: r.position.distance(truth),
        })
        .collect()
}

/// Runs a single trial with tracing.
pub fn convergence_trace(
    model: &SignalModel,
    pn_cov: &PnCovariance,
    w: &PhaseShiftVector,
    settings: EstimatorConfig,
    truth: &Position3,
    seed: u64,
) -> Result<(crate::estimator::EstimatorState, Vec<TraceCsvRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = rng.random_range(-CFO_RANGE..CFO_RANGE);
    let theta = sample_phase_noise_with(pn_cov, &mut rng);
    let sig = model.synthesize_received(truth, w.as_vector(), phi, &theta, rng.next_u64())?;
    let est = Estimator::new(model, pn_cov, w.as_vector(), settings)?;
    let mut trace = Vec::new();
    let state = est.run_traced(&sig.y, Some(&mut trace))?;
    Ok((state, trace_rows(&trace, truth)))
}

/// Writes rows under their serde header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a results file, checking the header and schema version.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULTS_SCHEMA.columns {
        return Err(Error::Config(format!("results header {headers:?} does not match schema version {SCHEMA_VERSION}")));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ResultRecord = row?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported results schema version {}", r.schema_version)));
        }
        out.push(r);
    }
    Ok(out)
}

/// The same CSV as [`write_csv`], in memory.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidParameter(e.to_string()))
}
