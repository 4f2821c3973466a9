use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use risloc::estimator::{EstimatorConfig, Refit};
use risloc::harness::{
    cdf_curves, convergence_trace, heatmap_mean, peb_heatmap, read_results, run_monte_carlo, run_trial, summarize, timing_rows,
    write_csv, CdfMetric, EstimatorTuning, ExperimentSpec, PhaseShiftSource, PlaneSpec, TrialContext,
};
use risloc::ris::{optimize_phase_shifts, random_phase_shifts, PhaseShiftVector, SdrSettings};
use risloc::signal::{build_pn_covariance, SignalModel};
use risloc::{Position3, Result, ScenarioConfig};

#[derive(Parser)]
#[command(name = "risloc", version, about = "RIS-assisted near-field OFDM localization toolkit")]
struct Cli {
    /// Scenario TOML file; the reference scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Override the transmit power, dBm.
    #[arg(long, global = true, allow_negative_numbers = true)]
    tx_dbm: Option<f64>,
    /// Override the number of RIS elements.
    #[arg(long, global = true)]
    n_ris: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design phase shifts for the AOI and write them as CSV.
    OptimizeRis {
        /// AOI sample points in the relaxation.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        candidates: usize,
        #[arg(long, default_value = "phases.csv")]
        output: String,
    },
    /// Estimate one synthesized observation.
    Estimate {
        #[command(flatten)]
        phases: PhaseArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        /// True UE position `x,y,z`; a random AOI point when omitted.
        #[arg(long, value_parser = parse_position, allow_hyphen_values = true)]
        position: Option<Position3>,
        #[arg(long, default_value = "estimate.csv")]
        output: String,
    },
    /// Monte Carlo sweep over powers, RIS sizes and PN variances.
    MonteCarlo {
        #[command(flatten)]
        phases: PhaseArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, default_value = "mc")]
        prefix: String,
    },
    /// PEB over a grid in a horizontal plane.
    PebMap {
        #[command(flatten)]
        phases: PhaseArgs,
        #[arg(long, default_value_t = 9)]
        resolution: usize,
        /// Plane height; the AOI center height when omitted.
        #[arg(long, allow_negative_numbers = true)]
        z: Option<f64>,
        /// Extra width around the AOI, meters.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long, default_value = "heatmap.csv")]
        output: String,
    },
    /// Empirical CDFs of position error and PEB.
    Cdf {
        /// Existing results file; otherwise a sweep is run first.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        phases: PhaseArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, default_value = "cdf")]
        prefix: String,
    },
    /// Per-iteration objective of a single estimation run.
    Trace {
        #[command(flatten)]
        phases: PhaseArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_parser = parse_position, allow_hyphen_values = true, default_value = "1.5,2.15,0.45")]
        position: Position3,
        #[arg(long, default_value = "trace.csv")]
        output: String,
    },
}

#[derive(Args, Clone)]
struct PhaseArgs {
    /// `optimized`, `random`, or a phase CSV written by `optimize-ris`.
    #[arg(long, default_value = "optimized")]
    phases: String,
    /// AOI samples when optimizing.
    #[arg(long, default_value_t = 10)]
    samples: usize,
}

#[derive(Args, Clone)]
struct EstimatorArgs {
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    max_inner: Option<usize>,
    /// Refit the CFO after the phase noise instead of jointly.
    #[arg(long)]
    sequential: bool,
    /// Take every step as computed, even if the objective rises.
    #[arg(long)]
    no_backtracking: bool,
}

impl EstimatorArgs {
    fn tuning(&self) -> EstimatorTuning {
        EstimatorTuning {
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            refit: self.sequential.then_some(Refit::Sequential),
            backtracking: self.no_backtracking.then_some(false),
        }
    }
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Transmit powers, dBm.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    powers: Vec<f64>,
    /// RIS sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// PN increment variances, rad^2.
    #[arg(long, value_delimiter = ',')]
    pn_vars: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Fixed UE position `x,y,z`; random AOI points when omitted.
    #[arg(long, value_parser = parse_position, allow_hyphen_values = true)]
    position: Option<Position3>,
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(n) = cli.n_ris {
        cfg = cfg.with_ris_elements(n)?;
    }
    if let Some(p) = cli.tx_dbm {
        cfg = cfg.with_tx_power_dbm(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `x,y,z` in meters.
fn parse_position(s: &str) -> std::result::Result<Position3, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Position3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z but got {} values", v.len())),
    }
}

fn phase_source(args: &PhaseArgs, seed: u64) -> Result<PhaseShiftSource> {
    Ok(match args.phases.as_str() {
        "optimized" => PhaseShiftSource::Optimized { samples: args.samples },
        "random" => PhaseShiftSource::Random { seed },
        path => PhaseShiftSource::Fixed(PhaseShiftVector::load(path)?),
    })
}

fn phases_for(args: &PhaseArgs, model: &SignalModel, seed: u64) -> Result<PhaseShiftVector> {
    Ok(match phase_source(args, seed)? {
        PhaseShiftSource::Optimized { samples } => optimize_phase_shifts(model, samples, seed, &SdrSettings::default())?.extracted,
        PhaseShiftSource::Random { seed } => random_phase_shifts(model.n_ris(), seed),
        PhaseShiftSource::Fixed(w) => w,
    })
}

fn sweep_spec(cli: &Cli, id: &str, cfg: ScenarioConfig, phases: &PhaseArgs, est: &EstimatorArgs, sweep: &SweepArgs) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::single(id, cfg, sweep.trials, cli.seed);
    if !sweep.powers.is_empty() {
        spec.tx_powers_dbm = sweep.powers.clone();
    }
    if !sweep.sizes.is_empty() {
        spec.n_ris = sweep.sizes.clone();
    }
    if !sweep.pn_vars.is_empty() {
        spec.pn_vars = sweep.pn_vars.clone();
    }
    spec.test_position = sweep.position;
    spec.phase_shifts = phase_source(phases, cli.seed)?;
    spec.estimator = est.tuning();
    Ok(spec)
}

fn out(cli: &Cli, name: &str) -> PathBuf {
    cli.out_dir.join(name)
}

fn monte_carlo(cli: &Cli, spec: &ExperimentSpec, prefix: &str) -> Result<Vec<risloc::harness::ResultRecord>> {
    let records = run_monte_carlo(spec)?;
    write_csv(out(cli, &format!("{prefix}_results.csv")), &records)?;
    write_csv(out(cli, &format!("{prefix}_timing.csv")), &timing_rows(&records))?;
    let summary = summarize(&records);
    write_csv(out(cli, &format!("{prefix}_summary.csv")), &summary)?;
    for s in &summary {
        println!(
            "n_ris {:4} tx {:6.1} dBm pn {:.0e}: rmse {:.3e} m, median {:.3e} m, mean peb {:.3e} m, converged {:.0}%",
            s.n_ris,
            s.tx_power_dbm,
            s.pn_var,
            s.rmse,
            s.median_error,
            s.mean_peb,
            100.0 * s.converged_fraction
        );
    }
    Ok(records)
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)?;
    let cfg = scenario(cli)?;
    match &cli.command {
        Command::OptimizeRis { samples, candidates, output } => {
            let model = SignalModel::new(cfg)?;
            let settings = SdrSettings { randomization_candidates: *candidates, ..SdrSettings::default() };
            let sol = optimize_phase_shifts(&model, *samples, cli.seed, &settings)?;
            sol.extracted.save(out(cli, output))?;
            println!(
                "status {:?} after {} iterations; relaxed bound {:.4e} m^2, realized mean PEB {:.4e} m",
                sol.report.status, sol.report.iterations, sol.objective, sol.realized_mean_peb
            );
        }
        Command::Estimate { phases, est, position: pos, output } => {
            let pn = build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var)?;
            let pn_var = cfg.pn_increment_var;
            let model = SignalModel::new(cfg)?;
            let w = phases_for(phases, &model, cli.seed)?;
            let ctx = TrialContext {
                experiment: "estimate",
                model: &model,
                pn_cov: &pn,
                w: &w,
                estimator: est.tuning().apply(EstimatorConfig::for_model(&model)),
                test_position: *pos,
                pn_var,
            };
            let rec = run_trial(&ctx, 0, cli.seed);
            write_csv(out(cli, output), std::slice::from_ref(&rec))?;
            println!(
                "true ({:.4}, {:.4}, {:.4}) estimate ({:.4}, {:.4}, {:.4}) error {:.3e} m, PEB {:.3e} m, {:?}",
                rec.true_x, rec.true_y, rec.true_z, rec.est_x, rec.est_y, rec.est_z, rec.error(), rec.peb, rec.status
            );
        }
        Command::MonteCarlo { phases, est, sweep, prefix } => {
            let spec = sweep_spec(cli, prefix, cfg, phases, est, sweep)?;
            monte_carlo(cli, &spec, prefix)?;
        }
        Command::PebMap { phases, resolution, z, margin, output } => {
            let pn = build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var)?;
            let plane = PlaneSpec { z: z.unwrap_or(cfg.aoi_center.z), margin: *margin };
            let model = SignalModel::new(cfg)?;
            let w = phases_for(phases, &model, cli.seed)?;
            let rows = peb_heatmap(&model, &pn, &w, &plane, *resolution)?;
            write_csv(out(cli, output), &rows)?;
            println!("mean PEB {:.4e} m over {} points", heatmap_mean(&rows), rows.len());
        }
        Command::Cdf { input, phases, est, sweep, prefix } => {
            let records = match input {
                Some(p) => read_results(p)?,
                None => {
                    let spec = sweep_spec(cli, prefix, cfg, phases, est, sweep)?;
                    monte_carlo(cli, &spec, prefix)?
                }
            };
            for (metric, name) in [(CdfMetric::Error, "error"), (CdfMetric::Peb, "peb")] {
                write_csv(out(cli, &format!("{prefix}_{name}.csv")), &cdf_curves(&records, metric)?)?;
            }
        }
        Command::Trace { phases, est, position: pos, output } => {
            let pn = build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var)?;
            let model = SignalModel::new(cfg)?;
            let w = phases_for(phases, &model, cli.seed)?;
            let truth = *pos;
            let settings = est.tuning().apply(EstimatorConfig::for_model(&model));
            let (state, rows) = convergence_trace(&model, &pn, &w, settings, &truth, cli.seed)?;
            write_csv(out(cli, output), &rows)?;
            println!(
                "{} outer / {} inner iterations (converged: {}), final error {:.3e} m",
                state.outer_iters,
                state.total_inner_iters,
                state.converged,
                state.position().distance(&truth)
            );
        }
    }
    info!("outputs in {}", Path::new(&cli.out_dir).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
