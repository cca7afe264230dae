//! Experiment drivers behind the subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use lrpost::arnoldi::{
    lr_arnoldi, lr_arnoldi_with_restart, ones_start, random_start, Applied, ArnoldiResult, IterationRecord,
    StopReason, StopRule,
};
use lrpost::discretize::{analytic_poisson_eig, build_grid, discrete_fd_eig};
use lrpost::forward::{KrylovOptions, SolverBackend};
use lrpost::hessian::{HessianContext, ParameterMode, ProblemSpec};
use lrpost::lowrank::{LowRankMat, TruncationPolicy};
use lrpost::oracle::{compare, dense_misfit, matvec_agreement, DenseReference, OracleReport, Tolerances, DEFAULT_CAP};
use lrpost::posterior::PosteriorSummary;

use crate::config::{RunConfig, Solver};
use crate::output::{fmt_f64, grid_csv, pgm, write_csv, write_text};
use crate::CliError;

/// Retention threshold used when the posterior is compared with the dense
/// inversion: every direction that can matter at `1e-4` is kept.
pub const ORACLE_EPS_EIG: f64 = 1e-8;

/// Arnoldi output in the vector type of the parameter mode.
#[derive(Debug, Clone)]
pub enum Solved {
    Spatial(ArnoldiResult<DVector<f64>>),
    SpaceTime(ArnoldiResult<LowRankMat>),
}

macro_rules! both {
    ($s:expr, $r:ident => $e:expr) => {
        match $s {
            Solved::Spatial($r) => $e,
            Solved::SpaceTime($r) => $e,
        }
    };
}

impl Solved {
    /// `(re, im)` of every Ritz value, descending real part.
    pub fn values(&self) -> Vec<(f64, f64)> {
        both!(self, r => r.ritz().iter().map(|p| (p.value.re, p.value.im)).collect())
    }

    pub fn h(&self) -> &DMatrix<f64> {
        both!(self, r => r.h())
    }

    pub fn iterations(&self) -> usize {
        both!(self, r => r.iterations())
    }

    pub fn rank_trace(&self) -> &[usize] {
        both!(self, r => r.rank_trace())
    }

    pub fn max_rank(&self) -> usize {
        both!(self, r => r.max_rank())
    }

    pub fn records(&self) -> &[IterationRecord] {
        both!(self, r => r.records())
    }

    pub fn stop_reason(&self) -> StopReason {
        both!(self, r => r.stop_reason())
    }

    pub fn converged_count(&self) -> usize {
        both!(self, r => r.converged_count())
    }

    pub fn orthogonality_defect(&self) -> f64 {
        both!(self, r => r.orthogonality_defect())
    }

    pub fn max_relative_imag(&self) -> f64 {
        both!(self, r => r.max_relative_imag())
    }

    pub fn retained(&self, eps_eig: f64) -> usize {
        both!(self, r => r.retained(eps_eig).len())
    }

    pub fn spatial(&self) -> Option<&ArnoldiResult<DVector<f64>>> {
        match self {
            Solved::Spatial(r) => Some(r),
            Solved::SpaceTime(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigsRun {
    pub config: RunConfig,
    pub spec: ProblemSpec,
    pub notes: Vec<String>,
    pub solved: Solved,
    pub seconds: f64,
}

impl EigsRun {
    pub fn largest(&self) -> f64 {
        self.solved.values().first().map_or(0.0, |v| v.0)
    }
}

fn context(cfg: &RunConfig, spec: &ProblemSpec, pol: TruncationPolicy) -> Result<HessianContext, CliError> {
    let ctx = HessianContext::new(spec.clone(), pol)?;
    Ok(match cfg.solver {
        Solver::Sweep => ctx.with_backend(SolverBackend::Sweep),
        Solver::Krylov => ctx.with_backend(SolverBackend::Krylov(KrylovOptions::default())),
    })
}

fn spatial_start(n: usize, seed: Option<u64>) -> DVector<f64> {
    match seed {
        Some(s) => random_start(n, s),
        None => ones_start(n),
    }
}

fn space_time_start(n_x: usize, n_t: usize, seed: Option<u64>) -> LowRankMat {
    let (a, b) = match seed {
        Some(s) => (random_start(n_x, s), random_start(n_t, s.wrapping_add(0x9e37))),
        None => (ones_start(n_x), ones_start(n_t)),
    };
    LowRankMat::outer(&a, &b)
}

/// Runs the Arnoldi iteration described by `cfg` with the given stopping
/// rule, without writing anything.
pub fn solve(cfg: &RunConfig, stop: &StopRule) -> Result<EigsRun, CliError> {
    let (spec, notes) = cfg.problem_spec()?;
    let pol = cfg.policy()?;
    let mut ctx = context(cfg, &spec, pol)?;
    let seed = cfg.seed;
    let fresh_seed = |j: usize| seed.unwrap_or(0).wrapping_add(1 + j as u64);
    let clock = Instant::now();
    let solved = match spec.mode {
        ParameterMode::DistributedSource => {
            let (n_x, n_t) = (spec.grid.n_x(), spec.time.n_t());
            let apply = |v: &LowRankMat| ctx.apply_space_time(v);
            let start = space_time_start(n_x, n_t, seed);
            Solved::SpaceTime(if stop.restart_on_breakdown {
                lr_arnoldi_with_restart(apply, start, |j| space_time_start(n_x, n_t, Some(fresh_seed(j))), &pol, stop)?
            } else {
                lr_arnoldi(apply, start, &pol, stop)?
            })
        }
        _ => {
            let n = spec.grid.n_x();
            let apply = |v: &DVector<f64>| -> lrpost::Result<Applied<DVector<f64>>> { ctx.apply_spatial(v) };
            let start = spatial_start(n, seed);
            Solved::Spatial(if stop.restart_on_breakdown {
                lr_arnoldi_with_restart(apply, start, |j| random_start(n, fresh_seed(j)), &pol, stop)?
            } else {
                lr_arnoldi(apply, start, &pol, stop)?
            })
        }
    };
    Ok(EigsRun {
        config: cfg.clone(),
        spec,
        notes,
        solved,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

pub fn stop_rule(cfg: &RunConfig) -> Result<StopRule, CliError> {
    let dim = match cfg.resolved_mode() {
        ParameterMode::DistributedSource => cfg.n_side * cfg.n_side * cfg.n_t,
        _ => cfg.n_side * cfg.n_side,
    };
    Ok(StopRule::new(cfg.m_a.min(dim), cfg.eps_eig)?
        .with_check_every(cfg.check_every)
        .with_restart(cfg.restart))
}

fn diagnostics(run: &EigsRun) -> String {
    let mut s = String::new();
    for n in &run.notes {
        let _ = writeln!(s, "note: {n}");
    }
    let _ = writeln!(s, "j,h_next,max_rank,seconds");
    for r in run.solved.records() {
        let _ = writeln!(s, "{},{:.6e},{},{:.6}", r.j, r.h_next, r.max_rank, r.seconds);
    }
    let _ = writeln!(s, "iterations={}", run.solved.iterations());
    let _ = writeln!(s, "stop_reason={:?}", run.solved.stop_reason());
    let _ = writeln!(s, "converged_count={}", run.solved.converged_count());
    let _ = writeln!(s, "retained={}", run.solved.retained(run.config.eps_eig));
    let _ = writeln!(s, "max_rank={}", run.solved.max_rank());
    let _ = writeln!(s, "orthogonality_defect={:.3e}", run.solved.orthogonality_defect());
    let _ = writeln!(s, "max_relative_imag={:.3e}", run.solved.max_relative_imag());
    let _ = writeln!(s, "seconds={:.3}", run.seconds);
    s
}

fn write_eigs(run: &EigsRun, out: &Path) -> Result<(), CliError> {
    write_text(&out.join("manifest.txt"), &run.config.to_manifest())?;
    let values: Vec<Vec<String>> = run
        .solved
        .values()
        .iter()
        .enumerate()
        .map(|(i, (re, im))| vec![(i + 1).to_string(), fmt_f64(*re), fmt_f64(*im)])
        .collect();
    write_csv(&out.join("eigenvalues.csv"), &["index", "ritz_value", "imag_part"], &values)?;
    let ranks: Vec<Vec<String>> = run
        .solved
        .rank_trace()
        .iter()
        .enumerate()
        .map(|(j, r)| vec![(j + 1).to_string(), r.to_string()])
        .collect();
    write_csv(&out.join("ranks.csv"), &["iteration", "max_intermediate_rank"], &ranks)?;
    let h = run.solved.h();
    let header: Vec<String> = (0..h.ncols()).map(|j| format!("c{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = h.row_iter().map(|r| r.iter().map(|x| fmt_f64(*x)).collect()).collect();
    write_csv(&out.join("hessenberg.csv"), &header, &rows)?;
    write_text(&out.join("diagnostics.log"), &diagnostics(run))
}

pub fn cmd_eigs(cfg: &RunConfig) -> Result<EigsRun, CliError> {
    let run = solve(cfg, &stop_rule(cfg)?)?;
    write_eigs(&run, &cfg.out)?;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct VarianceRun {
    pub eigs: EigsRun,
    pub summary: PosteriorSummary,
}

pub fn variance(cfg: &RunConfig) -> Result<VarianceRun, CliError> {
    if cfg.resolved_mode() == ParameterMode::DistributedSource {
        return Err(CliError::Config("variance fields need a spatial parameter (mode ic or steady)".into()));
    }
    let eigs = solve(cfg, &stop_rule(cfg)?)?;
    let res = eigs.solved.spatial().expect("spatial mode");
    let summary = PosteriorSummary::from_arnoldi(res, eigs.spec.cov.gamma_prior, cfg.eps_eig)?;
    Ok(VarianceRun { eigs, summary })
}

pub fn cmd_variance(cfg: &RunConfig) -> Result<VarianceRun, CliError> {
    let run = variance(cfg)?;
    let out = &cfg.out;
    write_eigs(&run.eigs, out)?;
    let n = cfg.n_side;
    write_text(&out.join("variance.csv"), &grid_csv(run.summary.variance(), n))?;
    write_text(&out.join("variance.pgm"), &pgm(run.summary.variance(), n, run.summary.gamma_prior()))?;
    let rows: Vec<Vec<String>> = run
        .summary
        .eigenvalues()
        .iter()
        .zip(run.summary.filter().iter())
        .map(|(l, f)| vec![fmt_f64(*l), fmt_f64(*f)])
        .collect();
    write_csv(&out.join("retained.csv"), &["lambda", "lambda_tilde"], &rows)?;
    Ok(run)
}

/// Full-dimension Arnoldi (continuing past breakdowns) against the dense
/// reference, plus a matrix-free/dense agreement check on random vectors.
pub fn oracle(cfg: &RunConfig) -> Result<OracleReport, CliError> {
    oracle_run(cfg).map(|(report, _)| report)
}

/// As [`oracle`], also returning the Arnoldi run that was compared.
pub fn oracle_run(cfg: &RunConfig) -> Result<(OracleReport, EigsRun), CliError> {
    if cfg.resolved_mode() == ParameterMode::DistributedSource {
        return Err(CliError::Config("the oracle compares spatial parameters only (mode ic or steady)".into()));
    }
    let (spec, _) = cfg.problem_spec()?;
    let misfit = dense_misfit(&spec, DEFAULT_CAP)?;
    let pol = cfg.policy()?;
    let mut ctx = context(cfg, &spec, pol)?;
    let matvec = matvec_agreement(&mut ctx, &misfit, 20, cfg.seed.unwrap_or(0))?;
    let dim = spec.parameter_dim();
    let stop = StopRule::new(dim, ORACLE_EPS_EIG)?
        .with_check_every(cfg.check_every)
        .with_stability(1e-10)
        .with_restart(true);
    let mut full = cfg.clone();
    full.seed = Some(cfg.seed.unwrap_or(0));
    let run = solve(&full, &stop)?;
    let res = run.solved.spatial().expect("spatial mode");
    let post = PosteriorSummary::from_arnoldi(res, spec.cov.gamma_prior, ORACLE_EPS_EIG)?;
    let k = cfg.n_eigs.min(dim);
    let dense = DenseReference::build(&misfit, k)?;
    let mut report = compare(res, Some(&post), &dense, k, Tolerances::default())?;
    report.matvec_rel_error = Some(matvec);
    report.dense_asymmetry = Some(misfit.asymmetry);
    Ok((report, run))
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleReport, CliError> {
    let report = oracle(cfg)?;
    write_text(&cfg.out.join("manifest.txt"), &cfg.to_manifest())?;
    write_text(&cfg.out.join("oracle_report.txt"), &report.to_key_value())?;
    Ok(report)
}

/// Keys that cannot be swept because their values contain commas.
const UNSWEEPABLE: &[&str] = &["wind", "sensors", "out"];

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: String,
    pub outcome: Result<EigsRun, String>,
}

/// Parses `key=v1,v2,…`.
pub fn parse_axis(axis: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = axis
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("axis '{axis}' must look like key=v1,v2")))?;
    let key = key.trim().replace('-', "_");
    if UNSWEEPABLE.contains(&key.as_str()) || !crate::config::KEYS.contains(&key.as_str()) {
        return Err(CliError::Config(format!("cannot sweep over '{key}'")));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("sweep axis is empty".into()));
    }
    Ok((key, values))
}

/// Runs every point as an independent task; a failing point is recorded
/// and the others continue.
pub fn sweep(template: &RunConfig, key: &str, values: &[String]) -> Result<Vec<SweepPoint>, CliError> {
    let mut configs = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let mut c = template.clone();
        c.set(key, v)?;
        c.validate()?;
        c.out = template.out.join(format!("point{i}_{key}={v}"));
        configs.push(c);
    }
    let outcomes: Vec<Result<EigsRun, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || cmd_eigs(c).map_err(|e| e.to_string())))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("sweep point panicked".into())))
            .collect()
    });
    Ok(values
        .iter()
        .cloned()
        .zip(outcomes)
        .map(|(value, outcome)| SweepPoint { value, outcome })
        .collect())
}

pub fn cmd_sweep(template: &RunConfig, axis: &str) -> Result<Vec<SweepPoint>, CliError> {
    let (key, values) = parse_axis(axis)?;
    let points = sweep(template, &key, &values)?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| match &p.outcome {
            Ok(run) => vec![
                i.to_string(),
                p.value.clone(),
                run.solved.iterations().to_string(),
                run.solved.max_rank().to_string(),
                fmt_f64(run.largest()),
                "ok".into(),
            ],
            Err(e) => vec![
                i.to_string(),
                p.value.clone(),
                String::new(),
                String::new(),
                String::new(),
                format!("error: {}", e.replace(',', ";")),
            ],
        })
        .collect();
    write_text(&template.out.join("manifest.txt"), &template.to_manifest())?;
    write_csv(
        &template.out.join("summary.csv"),
        &["point", key.as_str(), "iterations_to_threshold", "max_rank", "largest_eig", "status"],
        &rows,
    )?;
    let failed = points.iter().filter(|p| p.outcome.is_err()).count();
    if failed > 0 {
        return Err(CliError::SweepFailed {
            failed,
            total: points.len(),
        });
    }
    Ok(points)
}

/// One row of the analytic table: continuum and discrete Laplacian
/// eigenvalues and the matching steady-Poisson Hessian eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticRow {
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub lambda_h: f64,
    pub mu: f64,
    pub mu_h: f64,
}

/// The `count` smallest discrete eigenvalues, both orderings of `(m, n)`.
pub fn analytic_table(n_side: usize, ratio: f64, count: usize) -> Result<Vec<AnalyticRow>, CliError> {
    let grid = build_grid(n_side)?;
    let mut rows = Vec::with_capacity(n_side * n_side);
    for m in 1..=n_side {
        for n in 1..=n_side {
            let lambda = analytic_poisson_eig(m, n, 1.0, 1.0);
            let lambda_h = discrete_fd_eig(m, n, &grid)?;
            rows.push(AnalyticRow {
                m,
                n,
                lambda,
                lambda_h,
                mu: 1.0 / (ratio * lambda * lambda),
                mu_h: 1.0 / (ratio * lambda_h * lambda_h),
            });
        }
    }
    rows.sort_by(|a, b| a.lambda_h.total_cmp(&b.lambda_h).then(a.m.cmp(&b.m)));
    rows.truncate(count);
    Ok(rows)
}

pub fn cmd_analytic(cfg: &RunConfig) -> Result<String, CliError> {
    let rows = analytic_table(cfg.n_side, cfg.beta_ratio, cfg.n_eigs)?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                r.n.to_string(),
                fmt_f64(r.lambda),
                fmt_f64(r.lambda_h),
                fmt_f64(r.mu),
                fmt_f64(r.mu_h),
            ]
        })
        .collect();
    let header = ["m", "n", "lambda", "lambda_h", "mu", "mu_h"];
    write_csv(&cfg.out.join("analytic.csv"), &header, &body)?;
    Ok(crate::output::csv_text(&header, &body))
}
