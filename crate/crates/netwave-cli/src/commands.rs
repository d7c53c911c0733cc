//! Implementations behind the five subcommands. Each takes a fully resolved
//! [`Experiment`] and writes its reports under the configured output
//! directory. All numeric work is delegated to the library crate; this module
//! only orchestrates runs, caches truth solves, and serializes results.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use netwave::certify::{
    certify, stability_constants, worst_case_constants, BoundConstants, CertifiedTrajectory,
    ResidualOffline,
};
use netwave::error::{Error, Result};
use netwave::greedy::{greedy_train_full, StopReason, TrainFailure};
use netwave::integrate::{derivative_energies, integrate_truth, Trajectory};
use netwave::persist::{load_basis_checked, load_trajectory, save_basis, save_trajectory};
use netwave::reduce::{integrate_reduced, project_initial, project_system, ReducedBasis};

use crate::config::{sample_test_parameters, Experiment};
use crate::report::{self, SweepRow};
use crate::svg::{self, Series};

/// Relative slack applied when comparing a squared error against its bound;
/// absorbs the last-ulp noise of two different summation orders without
/// masking a real violation.
pub const RIGOR_SLACK: f64 = 1e-9;

pub fn rigor_ok(err_sq: f64, bound: f64) -> bool {
    err_sq <= bound * (1.0 + RIGOR_SLACK) + 1e-300
}

/// Outcome of `test`, used by the caller to pick the exit status.
#[derive(Debug)]
pub struct TestSummary {
    pub rigor_violations: usize,
    pub checked_points: usize,
    /// Bound-sharpness ratio `delta(T) / delta_tilde(T)` at the largest basis
    /// size for the configured plot parameter, if any.
    pub tightness: Option<f64>,
}

fn mu_tag(mu: f64) -> String {
    // Stable, filesystem-safe tag for a parameter value.
    format!("{mu}").replace('-', "m").replace('.', "p")
}

fn ensure_out(exp: &Experiment) -> Result<()> {
    fs::create_dir_all(&exp.out_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Truth cache

fn cache_path(exp: &Experiment, mu: f64) -> PathBuf {
    exp.out_dir.join("cache").join(format!(
        "truth_{}_{:016x}.bin",
        &exp.run_hash[..16],
        mu.to_bits()
    ))
}

/// Solves the full-order system at `mu`, reusing an on-disk cache keyed by
/// the run hash. Unreadable or mismatched cache entries are silently
/// recomputed.
pub fn truth_cached(exp: &Experiment, mu: f64) -> Result<Trajectory> {
    let path = cache_path(exp, mu);
    let expected_len = exp.solver.steps() + 1;
    if path.exists() {
        if let Ok(t) = load_trajectory(&path) {
            if t.tau.to_bits() == exp.solver.tau.to_bits() && t.len() == expected_len {
                return Ok(t);
            }
        }
    }
    let t = integrate_truth(&exp.model, &exp.loads, mu, &exp.solver, &exp.p0, &exp.u0)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_trajectory(&path, &t)?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// truth

pub fn cmd_truth(exp: &Experiment, mu: f64) -> Result<()> {
    exp.model.coeff.check_mu(mu)?;
    ensure_out(exp)?;
    let traj = truth_cached(exp, mu)?;
    let tag = mu_tag(mu);
    report::write_truth_summary(&exp.out_dir.join(format!("truth_mu{tag}.csv")), &exp.model, &traj)?;
    let (times, energies) = derivative_energies(&exp.model, &traj);
    report::write_energy_series(
        &exp.out_dir.join(format!("truth_energy_mu{tag}.csv")),
        &times,
        &energies,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(exp: &Experiment) -> Result<()> {
    ensure_out(exp)?;
    let start = Instant::now();
    let history_path = exp.out_dir.join("greedy_history.csv");
    match greedy_train_full(
        &exp.model,
        &exp.loads,
        &exp.solver,
        &exp.greedy,
        &exp.p0,
        &exp.u0,
    ) {
        Ok(result) => {
            report::write_history(&history_path, &result.history)?;
            save_basis(
                &exp.out_dir.join("basis.json"),
                &exp.model,
                &result.basis,
                &result.history,
                Some(result.stop),
            )?;
            let stop = match result.stop {
                StopReason::MaxSize => "max_size",
                StopReason::Converged => "converged",
                StopReason::Saturated => "saturated",
            };
            fs::write(
                exp.out_dir.join("train_meta.txt"),
                format!(
                    "stop: {stop}\niterations: {}\ndim_q: {}\ndim_v: {}\ntotal: {}\nwall_seconds: {:.3}\n",
                    result.history.len(),
                    result.basis.dim_q(),
                    result.basis.dim_v(),
                    result.basis.total_dim(),
                    start.elapsed().as_secs_f64()
                ),
            )?;
            eprintln!(
                "train: {} iterations, basis {} + {} = {}, stop = {stop}",
                result.history.len(),
                result.basis.dim_q(),
                result.basis.dim_v(),
                result.basis.total_dim()
            );
            Ok(())
        }
        Err(TrainFailure::Stagnated { message, history }) => {
            // Keep the partial history around for post-mortems.
            report::write_history(&history_path, &history)?;
            Err(Error::GreedyStagnation(message))
        }
        Err(TrainFailure::Other(e)) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// test

/// Maps requested basis sizes to block-prefix stages: for each size, the
/// largest prefix whose total dimension does not exceed it (at least the
/// kernel-only stage). Without a grid every stage is evaluated.
fn select_stages(basis: &ReducedBasis, n_grid: Option<&[usize]>) -> Vec<usize> {
    match n_grid {
        None => (1..=basis.blocks.len()).collect(),
        Some(grid) => {
            let mut stages: Vec<usize> = grid
                .iter()
                .map(|&n| {
                    let mut best = 1;
                    for (i, &(dq, dv)) in basis.blocks.iter().enumerate() {
                        if dq + dv <= n {
                            best = i + 1;
                        }
                    }
                    best
                })
                .collect();
            stages.sort_unstable();
            stages.dedup();
            stages
        }
    }
}

struct StageData {
    total_dim: usize,
    per_mu: Vec<CertifiedTrajectory>,
    plot: Option<CertifiedTrajectory>,
}

fn constants_for(exp: &Experiment, mus: &[f64]) -> Result<Vec<BoundConstants>> {
    if exp.greedy.worst_case_constants {
        let c = worst_case_constants(&exp.model, exp.greedy.convention)?;
        Ok(vec![c; mus.len()])
    } else {
        mus.par_iter()
            .map(|&mu| stability_constants(&exp.model, mu, exp.greedy.convention))
            .collect()
    }
}

fn run_stage(
    exp: &Experiment,
    basis: &ReducedBasis,
    mus: &[f64],
    constants: &[BoundConstants],
    truths: &[Trajectory],
    plot: Option<(f64, &BoundConstants, &Trajectory)>,
) -> Result<StageData> {
    let offline = ResidualOffline::new(&exp.model, basis, &exp.loads);
    let sys = project_system(&exp.model, basis, &exp.loads);
    let init = project_initial(&exp.model, basis, &exp.p0, &exp.u0);
    let one = |mu: f64, consts: &BoundConstants, truth: &Trajectory| -> Result<CertifiedTrajectory> {
        let reduced = integrate_reduced(&sys, mu, &exp.solver, &init.p, &init.u)?;
        certify(
            &exp.model,
            basis,
            consts,
            &offline,
            mu,
            &reduced,
            (init.err_p, init.err_u),
            Some(truth),
        )
    };
    let per_mu: Vec<CertifiedTrajectory> = mus
        .par_iter()
        .zip(constants.par_iter())
        .zip(truths.par_iter())
        .map(|((&mu, c), t)| one(mu, c, t))
        .collect::<Result<_>>()?;
    let plot = match plot {
        Some((mu, c, t)) => Some(one(mu, c, t)?),
        None => None,
    };
    Ok(StageData {
        total_dim: basis.total_dim(),
        per_mu,
        plot,
    })
}

fn count_rigor(cert: &CertifiedTrajectory, violations: &mut usize, checked: &mut usize) {
    if let Some(err) = cert.err_sq.as_ref() {
        for n in 0..err.len() {
            *checked += 2;
            if !rigor_ok(err[n], cert.delta[n]) {
                *violations += 1;
            }
            if !rigor_ok(err[n], cert.delta_tilde[n]) {
                *violations += 1;
            }
        }
    }
}

pub fn cmd_test(
    exp: &Experiment,
    basis_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<TestSummary> {
    ensure_out(exp)?;
    let start = Instant::now();
    let default_path = exp.out_dir.join("basis.json");
    let basis_path = basis_path.unwrap_or(&default_path);
    let loaded = load_basis_checked(basis_path, &exp.model)?;
    let basis = loaded.basis;

    let seed = seed_override.unwrap_or(exp.test_seed);
    let mus = sample_test_parameters(
        exp.model.coeff.mu_min,
        exp.model.coeff.mu_max,
        exp.test_count,
        seed,
    );
    report::write_test_sample(&exp.out_dir.join("test_sample.csv"), &mus)?;

    let constants = constants_for(exp, &mus)?;
    let mut truths = Vec::with_capacity(mus.len());
    for &mu in &mus {
        truths.push(truth_cached(exp, mu)?);
    }

    // Optional extra certification runs at the plot parameter.
    let plot = match exp.plot_mu {
        Some(pmu) => {
            exp.model.coeff.check_mu(pmu)?;
            let c = if exp.greedy.worst_case_constants {
                worst_case_constants(&exp.model, exp.greedy.convention)?
            } else {
                stability_constants(&exp.model, pmu, exp.greedy.convention)?
            };
            let t = truth_cached(exp, pmu)?;
            Some((pmu, c, t))
        }
        None => None,
    };

    let stages = select_stages(&basis, exp.n_grid.as_deref());
    let mut nsweep: Vec<(usize, SweepRow)> = Vec::new();
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut tightness = None;

    for &stage in &stages {
        let prefix = basis.prefix(stage);
        let data = run_stage(
            exp,
            &prefix,
            &mus,
            &constants,
            &truths,
            plot.as_ref().map(|(pmu, c, t)| (*pmu, c, t)),
        )?;
        let n = data.total_dim;

        let mut stage_row: Option<SweepRow> = None;
        let mut musweep: Vec<(f64, SweepRow)> = Vec::new();
        for (i, cert) in data.per_mu.iter().enumerate() {
            report::write_timeseries(
                &exp.out_dir.join(format!("timeseries_mu{i:03}_N{n:04}.csv")),
                cert,
            )?;
            count_rigor(cert, &mut violations, &mut checked);
            let row = SweepRow::from_certified(cert);
            musweep.push((mus[i], row.clone()));
            stage_row = Some(match stage_row {
                Some(acc) => acc.merge(&row),
                None => row,
            });
        }
        report::write_musweep(&exp.out_dir.join(format!("musweep_N{n:04}.csv")), &musweep)?;
        if let Some(row) = stage_row {
            nsweep.push((n, row));
        }

        if let Some(cert) = &data.plot {
            report::write_timeseries(
                &exp.out_dir.join(format!("timeseries_plot_N{n:04}.csv")),
                cert,
            )?;
            count_rigor(cert, &mut violations, &mut checked);
            if stage == *stages.last().unwrap() {
                let d = *cert.delta.last().unwrap();
                let dt = *cert.delta_tilde.last().unwrap();
                if dt > 0.0 {
                    tightness = Some(d / dt);
                }
            }
        }
    }

    report::write_nsweep(&exp.out_dir.join("nsweep.csv"), &nsweep)?;

    let tightness_line = match tightness {
        Some(r) => format!(
            "tightness_ratio: {r}\ntightness_flag: {}\n",
            if r <= 0.3 { "ok" } else { "exceeded" }
        ),
        None => String::new(),
    };
    fs::write(
        exp.out_dir.join("test_meta.txt"),
        format!(
            "basis: {}\nseed: {seed}\nsample_size: {}\nstages: {}\nchecked_points: {checked}\nrigor_violations: {violations}\n{tightness_line}wall_seconds: {:.3}\n",
            basis_path.display(),
            mus.len(),
            stages
                .iter()
                .map(|s| (basis.blocks[s - 1].0 + basis.blocks[s - 1].1).to_string())
                .collect::<Vec<_>>()
                .join(" "),
            start.elapsed().as_secs_f64()
        ),
    )?;
    eprintln!(
        "test: {} parameters x {} basis sizes, {checked} bound checks, {violations} violations",
        mus.len(),
        stages.len()
    );
    if let Some(r) = tightness {
        eprintln!(
            "test: delta(T)/delta_tilde(T) = {r:.3e} at N = {}{}",
            nsweep.last().map(|(n, _)| *n).unwrap_or(0),
            if r <= 0.3 { "" } else { "  (exceeds 0.3)" }
        );
    }

    Ok(TestSummary {
        rigor_violations: violations,
        checked_points: checked,
        tightness,
    })
}

// ---------------------------------------------------------------------------
// plotdata

fn find_plot_series(exp: &Experiment) -> Result<Option<PathBuf>> {
    if exp.plot_mu.is_none() {
        return Ok(None);
    }
    let mut candidates: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&exp.out_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(rest) = name
            .strip_prefix("timeseries_plot_N")
            .and_then(|r| r.strip_suffix(".csv"))
        {
            if let Ok(n) = rest.parse::<usize>() {
                candidates.push((n, entry.path()));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Persist(format!(
            "no timeseries_plot_N*.csv in {}; run the test command first",
            exp.out_dir.display()
        )));
    }
    candidates.sort();
    let chosen = match exp.plot_n {
        Some(n) => candidates
            .iter()
            .rev()
            .find(|(cn, _)| *cn <= n)
            .unwrap_or_else(|| candidates.last().unwrap()),
        None => candidates.last().unwrap(),
    };
    Ok(Some(chosen.1.clone()))
}

pub fn cmd_plotdata(exp: &Experiment, svg_out: bool) -> Result<()> {
    ensure_out(exp)?;
    let nsweep = report::read_nsweep(&exp.out_dir.join("nsweep.csv"))?;

    // Error and bounds versus basis size.
    {
        let path = exp.out_dir.join("fig3.csv");
        let mut text = String::from("N,max_err_sq,max_delta,max_delta_tilde\n");
        for (n, row) in &nsweep {
            text.push_str(&format!(
                "{n},{},{},{}\n",
                row.max_err_sq, row.max_delta, row.max_delta_tilde
            ));
        }
        fs::write(path, text)?;
    }

    // Effectivities versus basis size.
    {
        let path = exp.out_dir.join("fig4.csv");
        let mut text = String::from("N,max_eta,max_eta_tilde\n");
        for (n, row) in &nsweep {
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            text.push_str(&format!(
                "{n},{},{}\n",
                cell(row.max_eta),
                cell(row.max_eta_tilde)
            ));
        }
        fs::write(path, text)?;
    }

    // Error and bounds over time at the plot parameter.
    let plot_rows = match find_plot_series(exp)? {
        Some(path) => {
            let rows = report::read_timeseries(&path)?;
            let mut text = String::from("t,err_sq,delta,delta_tilde\n");
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    r.t,
                    r.err_sq.map(|x| x.to_string()).unwrap_or_default(),
                    r.delta,
                    r.delta_tilde
                ));
            }
            fs::write(exp.out_dir.join("fig2.csv"), text)?;
            Some(rows)
        }
        None => None,
    };

    if svg_out {
        let ns: Vec<f64> = nsweep.iter().map(|(n, _)| *n as f64).collect();
        let col = |f: &dyn Fn(&SweepRow) -> f64| -> Vec<f64> {
            nsweep.iter().map(|(_, r)| f(r)).collect::<Vec<_>>()
        };
        let errs = col(&|r| r.max_err_sq);
        let deltas = col(&|r| r.max_delta);
        let tildes = col(&|r| r.max_delta_tilde);
        svg::write_line_plot(
            &exp.out_dir.join("fig3.svg"),
            "worst-case error and bounds vs basis size",
            "N",
            "squared error",
            true,
            &[
                Series { label: "max err^2", xs: &ns, ys: &errs },
                Series { label: "max delta", xs: &ns, ys: &deltas },
                Series { label: "max delta~", xs: &ns, ys: &tildes },
            ],
        )?;
        let etas: Vec<f64> = nsweep
            .iter()
            .map(|(_, r)| r.max_eta.unwrap_or(f64::NAN))
            .collect();
        let etas_t: Vec<f64> = nsweep
            .iter()
            .map(|(_, r)| r.max_eta_tilde.unwrap_or(f64::NAN))
            .collect();
        svg::write_line_plot(
            &exp.out_dir.join("fig4.svg"),
            "worst-case effectivities vs basis size",
            "N",
            "effectivity",
            true,
            &[
                Series { label: "max eta", xs: &ns, ys: &etas },
                Series { label: "max eta~", xs: &ns, ys: &etas_t },
            ],
        )?;
        if let Some(rows) = &plot_rows {
            let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
            let errs: Vec<f64> = rows.iter().map(|r| r.err_sq.unwrap_or(f64::NAN)).collect();
            let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
            let tildes: Vec<f64> = rows.iter().map(|r| r.delta_tilde).collect();
            svg::write_line_plot(
                &exp.out_dir.join("fig2.svg"),
                "error and certified bounds over time",
                "t",
                "squared error",
                true,
                &[
                    Series { label: "err^2", xs: &ts, ys: &errs },
                    Series { label: "delta", xs: &ts, ys: &deltas },
                    Series { label: "delta~", xs: &ts, ys: &tildes },
                ],
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// constants

pub fn cmd_constants(exp: &Experiment, mu: Option<f64>) -> Result<()> {
    ensure_out(exp)?;
    let mus: Vec<f64> = match mu {
        Some(m) => {
            exp.model.coeff.check_mu(m)?;
            vec![m]
        }
        None => exp.mu_train.clone(),
    };
    let rows: Vec<BoundConstants> = mus
        .par_iter()
        .map(|&m| stability_constants(&exp.model, m, exp.greedy.convention))
        .collect::<Result<_>>()?;
    let text = report::write_constants(&exp.out_dir.join("constants.csv"), &rows)?;
    print!("{text}");
    Ok(())
}
