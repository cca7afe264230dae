//! Acceptance criteria. Each criterion prints one PASS/FAIL line with the
//! measured quantities; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use lrpost::arnoldi::{rank_one_check, StopRule};
use lrpost::discretize::{analytic_separable_eigvec, build_grid, discrete_fd_eig, spatial_matrix, spatial_vector};
use lrpost::hessian::ParameterMode;
use lrpost::oracle::max_principal_angle;
use lrpost_cli::config::{Problem, RunConfig, Sensors};
use lrpost_cli::run::{oracle_run, solve, stop_rule, variance, EigsRun, VarianceRun};
use nalgebra::{DMatrix, DVector};

/// Orthogonality and imaginary-part diagnostics gathered from every run.
#[derive(Default)]
struct Health {
    runs: Vec<(String, f64, f64)>,
}

impl Health {
    fn record(&mut self, label: &str, run: &EigsRun) {
        self.runs.push((
            label.to_string(),
            run.solved.orthogonality_defect(),
            run.solved.max_relative_imag(),
        ));
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn heat(n_side: usize, n_t: usize) -> RunConfig {
    RunConfig {
        problem: Problem::Heat,
        mode: Some(ParameterMode::InitialCondition),
        n_side,
        n_t,
        beta_ratio: 1e4,
        sensors: Sensors::Grid3x3,
        seed: Some(0),
        ..RunConfig::default()
    }
}

fn convdiff(n_side: usize, n_t: usize, nu: f64) -> RunConfig {
    RunConfig {
        problem: Problem::ConvDiff,
        nu,
        ..heat(n_side, n_t)
    }
}

fn steady(n_side: usize) -> RunConfig {
    RunConfig {
        problem: Problem::SteadyPoisson,
        mode: Some(ParameterMode::SteadyPoisson),
        sensors: Sensors::Full,
        ..heat(n_side, 1)
    }
}

fn top_values(run: &EigsRun, k: usize) -> Vec<f64> {
    run.solved.values().iter().take(k).map(|v| v.0).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Analytic Hessian eigenvalues `ratio / λ_h(m,n)²`, descending with
/// multiplicity, grouped into clusters of equal value.
fn analytic_groups(n_side: usize, ratio: f64, count: usize) -> Vec<(f64, Vec<(usize, usize)>)> {
    let grid = build_grid(n_side).unwrap();
    let mut modes: Vec<(f64, (usize, usize))> = (1..=12)
        .flat_map(|m| (1..=12).map(move |n| (m, n)))
        .map(|(m, n)| {
            let lam = discrete_fd_eig(m, n, &grid).unwrap();
            (ratio / (lam * lam), (m, n))
        })
        .collect();
    modes.sort_by(|a, b| b.0.total_cmp(&a.0));
    modes.truncate(count);
    let mut out: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    for (mu, mode) in modes {
        match out.last_mut() {
            Some((last, group)) if rel(mu, *last) <= 1e-12 => group.push(mode),
            _ => out.push((mu, vec![mode])),
        }
    }
    out
}

fn criterion_1_2(health: &mut Health) -> (Outcome, Outcome) {
    let cfg = steady(31);
    let clock = Instant::now();
    let groups = analytic_groups(31, 1e-4, 10);
    let expected: Vec<f64> = groups.iter().flat_map(|(mu, g)| std::iter::repeat_n(*mu, g.len())).collect();
    // stop once every value above 1e-3 of the largest is stable to 1e-10
    let stop = StopRule::new(961, 1e-3 * expected[0]).unwrap().with_stability(1e-10);
    let run = solve(&cfg, &stop).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    health.record("steady n=31", &run);
    let got = top_values(&run, 10);
    let err = if got.len() < 10 {
        f64::INFINITY
    } else {
        expected.iter().zip(&got).map(|(mu, g)| rel(*g, *mu)).fold(0.0, f64::max)
    };
    let c1 = outcome(
        err <= 1e-8 && seconds < 5.0,
        format!(
            "max rel error {err:.2e} over the top 10 (tol 1e-8), {} iterations, {seconds:.2}s (limit 5s)",
            run.solved.iterations()
        ),
    );

    let grid = build_grid(31).unwrap();
    let ritz = run.solved.spatial().unwrap().ritz();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_angle: f64 = 0.0;
    let (mut simple, mut degenerate) = (0, 0);
    let mut at = 0;
    for (_, modes) in &groups {
        let members = at..(at + modes.len()).min(ritz.len());
        at += modes.len();
        if modes.len() == 1 {
            simple += 1;
            let ratio = match ritz.get(members.start) {
                Some(p) => rank_one_check(&spatial_matrix(&p.vector, &grid)).1,
                None => 1.0,
            };
            worst_ratio = worst_ratio.max(ratio);
        } else {
            degenerate += 1;
            let span: Vec<DVector<f64>> = modes
                .iter()
                .map(|&(m, n)| spatial_vector(&analytic_separable_eigvec(m, n, &grid).unwrap()))
                .collect();
            let ours: Vec<DVector<f64>> = ritz[members].iter().map(|p| p.vector.clone()).collect();
            let angle = if ours.len() == span.len() {
                max_principal_angle(&DMatrix::from_columns(&ours), &DMatrix::from_columns(&span))
            } else {
                std::f64::consts::FRAC_PI_2
            };
            worst_angle = worst_angle.max(angle);
        }
    }
    let c2 = outcome(
        simple > 0 && degenerate > 0 && worst_ratio <= 1e-6 && worst_angle <= 1e-5,
        format!(
            "{simple} simple: max s2/s1 {worst_ratio:.2e} (tol 1e-6); {degenerate} degenerate pairs: max principal angle {worst_angle:.2e} (tol 1e-5)"
        ),
    );
    (c1, c2)
}

fn oracle_cases() -> Vec<(&'static str, RunConfig)> {
    vec![("heat n=7 nt=5", heat(7, 5)), ("convdiff n=5 nt=4", convdiff(5, 4, 1e-2))]
}

fn criterion_3_4(health: &mut Health) -> (Outcome, Outcome) {
    let mut pass3 = true;
    let mut pass4 = true;
    let mut d3 = Vec::new();
    let mut d4 = Vec::new();
    for (label, cfg) in oracle_cases() {
        let clock = Instant::now();
        let (report, run) = oracle_run(&cfg).unwrap();
        let seconds = clock.elapsed().as_secs_f64();
        health.record(label, &run);
        let (eig, angle) = (report.max_eig_error(), report.max_angle());
        pass3 &= report.k == 10 && eig <= 1e-6 && angle <= 1e-4 && seconds < 30.0;
        d3.push(format!("{label}: eig {eig:.2e}, angle {angle:.2e}, {seconds:.2}s"));
        let var = report.variance_rel_error.unwrap_or(f64::INFINITY);
        pass4 &= var <= 1e-4;
        d4.push(format!("{label}: {var:.2e}"));
    }
    (
        outcome(pass3, format!("{} (tol 1e-6, 1e-4, 30s)", d3.join("; "))),
        outcome(pass4, format!("max rel variance error {} (tol 1e-4)", d4.join("; "))),
    )
}

fn eigs(cfg: &RunConfig) -> EigsRun {
    solve(cfg, &stop_rule(cfg).unwrap()).unwrap()
}

fn criterion_5_6(health: &mut Health) -> (Outcome, Outcome) {
    let clock = Instant::now();
    let mut curves = BTreeMap::new();
    let mut ranks = BTreeMap::new();
    for n_t in [30, 60, 90] {
        let cfg = RunConfig {
            eps_eig: 1e-2,
            ..heat(31, n_t)
        };
        let run = eigs(&cfg);
        health.record(&format!("heat n=31 nt={n_t}"), &run);
        curves.insert(n_t, top_values(&run, 10));
        ranks.insert(n_t, run.solved.max_rank());
    }
    let seconds = clock.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    let mut worst_at = (0, 0, 0);
    let keys: Vec<usize> = curves.keys().copied().collect();
    for (a, &ka) in keys.iter().enumerate() {
        for &kb in &keys[a + 1..] {
            let (ca, cb) = (&curves[&ka], &curves[&kb]);
            if ca.len() < 10 || cb.len() < 10 {
                worst = f64::INFINITY;
                continue;
            }
            for i in 0..10 {
                let d = (ca[i] - cb[i]).abs() / ca[i].min(cb[i]);
                if d > worst {
                    worst = d;
                    worst_at = (ka, kb, i + 1);
                }
            }
        }
    }
    let firsts: Vec<String> = keys.iter().map(|k| format!("nt={k}: {:.3}..{:.4}", curves[k][0], curves[k].last().unwrap())).collect();
    let c5 = outcome(
        worst <= 0.15 && seconds < 300.0,
        format!(
            "max pairwise rel diff {worst:.3} at value {} (nt {} vs {}) (tol 0.15); [{}]; {seconds:.1}s (limit 300s)",
            worst_at.2,
            worst_at.0,
            worst_at.1,
            firsts.join(", ")
        ),
    );

    let mut nu_ranks = BTreeMap::new();
    for nu in [1e-1, 1e-2, 1e-3] {
        let cfg = RunConfig {
            eps_eig: 1e-2,
            ..convdiff(31, 30, nu)
        };
        let run = eigs(&cfg);
        health.record(&format!("convdiff nu={nu:e}"), &run);
        nu_ranks.insert(format!("{nu:e}"), run.solved.max_rank());
    }
    let spread = |m: &[usize]| m.iter().max().unwrap() - m.iter().min().unwrap();
    let t: Vec<usize> = ranks.values().copied().collect();
    let v: Vec<usize> = nu_ranks.values().copied().collect();
    let c6 = outcome(
        spread(&t) <= 5 && spread(&v) <= 5 && t.iter().chain(&v).all(|&r| r <= 40),
        format!("ranks by nt {ranks:?}, by nu {nu_ranks:?} (spread <= 5, max <= 40)"),
    );
    (c5, c6)
}

fn criterion_7(health: &Health) -> Outcome {
    let defect = health.runs.iter().map(|r| r.1).fold(0.0, f64::max);
    let imag = health.runs.iter().map(|r| r.2).fold(0.0, f64::max);
    outcome(
        defect <= 1e-6 && imag <= 1e-8,
        format!(
            "{} runs: max |V'V - I| {defect:.2e} (tol 1e-6), max rel imag {imag:.2e} (tol 1e-8)",
            health.runs.len()
        ),
    )
}

fn sensor_mask(v: &VarianceRun) -> Vec<bool> {
    v.eigs.spec.sensors.mask().to_vec()
}

fn criterion_8(health: &mut Health) -> (Outcome, VarianceRun) {
    let clock = Instant::now();
    let coarse = variance(&RunConfig { eps_eig: 1e-1, ..heat(63, 30) }).unwrap();
    let fine = variance(&RunConfig { eps_eig: 1e-3, ..heat(63, 30) }).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    health.record("heat n=63 eps_eig=1e-1", &coarse.eigs);
    health.record("heat n=63 eps_eig=1e-3", &fine.eigs);
    let gamma = coarse.summary.gamma_prior();
    let var = coarse.summary.variance();
    let mask = sensor_mask(&coarse);
    let spec = &coarse.eigs.spec;

    let a = var.iter().all(|&v| v <= gamma);
    let b = mask[var.imin()];
    let (mut at, mut n_at, mut far, mut n_far) = (0.0, 0, 0.0, 0);
    for (k, &v) in var.iter().enumerate() {
        if mask[k] {
            at += gamma - v;
            n_at += 1;
        } else if spec.sensors.distance(spec.grid.point(k)) > 0.125 {
            far += gamma - v;
            n_far += 1;
        }
    }
    let (at, far) = (at / n_at as f64, far / n_far as f64);
    let c = n_far > 0 && at > far;
    let fv = fine.summary.variance();
    let diff = var.iter().zip(fv.iter()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    let d = diff <= 0.02;
    let detail = format!(
        "(a) max {:.4} <= {gamma}: {a}; (b) min at sensor: {b}; (c) mean reduction {at:.3e} at {n_at} sensor dofs vs {far:.3e} at {n_far} far dofs: {c}; \
         (d) eps_eig 1e-1 vs 1e-3 max rel diff {diff:.2e} (tol 0.02): {d}; {seconds:.1}s (limit 600s)",
        var.max()
    );
    (outcome(a && b && c && d && seconds < 600.0, detail), coarse)
}

fn criterion_9(health: &mut Health) -> Outcome {
    let low = variance(&RunConfig { eps_eig: 1.0, ..heat(63, 30) }).unwrap();
    let high = variance(&RunConfig {
        eps_eig: 1.0,
        beta_ratio: 1e6,
        ..heat(63, 30)
    })
    .unwrap();
    health.record("heat n=63 ratio=1e4", &low.eigs);
    health.record("heat n=63 ratio=1e6", &high.eigs);
    let mask = sensor_mask(&low);
    let (vl, vh) = (low.summary.variance(), high.summary.variance());
    let decreases = (0..vl.len()).filter(|&k| mask[k]).all(|k| vh[k] < vl[k]);
    let (rl, rh) = (low.summary.retained(), high.summary.retained());
    let (il, ih) = (low.eigs.solved.iterations(), high.eigs.solved.iterations());
    outcome(
        decreases && rh > rl && ih > il,
        format!(
            "sensor variance strictly lower: {decreases}; retained {rl} -> {rh}; iterations {il} -> {ih}"
        ),
    )
}

fn criterion_10(health: &mut Health) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (label, cfg) in oracle_cases() {
        let (_, a) = oracle_run(&RunConfig { eps0: 1e-8, ..cfg.clone() }).unwrap();
        let (_, b) = oracle_run(&RunConfig { eps0: 1e-10, ..cfg }).unwrap();
        health.record(&format!("{label} eps0=1e-10"), &b);
        let (va, vb) = (top_values(&a, 10), top_values(&b, 10));
        let err = if va.len() < 10 || vb.len() < 10 {
            f64::INFINITY
        } else {
            va.iter().zip(&vb).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
        };
        worst = worst.max(err);
        parts.push(format!("{label}: {err:.2e}"));
    }
    outcome(worst <= 1e-6, format!("{} (tol 1e-6)", parts.join("; ")))
}

fn main() {
    let mut health = Health::default();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let report = |n: usize, o: Outcome, results: &mut Vec<(usize, Outcome)>| {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    let (c1, c2) = criterion_1_2(&mut health);
    report(1, c1, &mut results);
    report(2, c2, &mut results);
    let (c3, c4) = criterion_3_4(&mut health);
    report(3, c3, &mut results);
    report(4, c4, &mut results);
    let (c5, c6) = criterion_5_6(&mut health);
    report(5, c5, &mut results);
    report(6, c6, &mut results);
    let (c8, _) = criterion_8(&mut health);
    let c9 = criterion_9(&mut health);
    let c10 = criterion_10(&mut health);
    report(7, criterion_7(&health), &mut results);
    report(8, c8, &mut results);
    report(9, c9, &mut results);
    report(10, c10, &mut results);
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
