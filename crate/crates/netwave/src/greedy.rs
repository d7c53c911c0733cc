//! POD-greedy construction of the reduced space.
//!
//! Each sweep evaluates the certified error indicator (max over time of
//! Delta, or of Delta-tilde) for every training parameter using the current
//! basis, picks the worst one, solves the truth problem there (cached), and
//! enriches the basis with constrained-PCA modes of the deflated snapshots.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{
    delta_series, delta_tilde_series, stability_constants, worst_case_constants, BoundConstants,
    CpConvention, ResidualOffline,
};
use crate::error::{Error, Result};
use crate::fem::TruthModel;
use crate::integrate::{integrate_truth, SolverSettings, Trajectory};
use crate::reduce::{
    deflate_snapshots, integrate_reduced, joint_snapshots, pca_q_modes, project_initial,
    project_system, LiftOperator, PcaSettings, ReducedBasis,
};
use crate::system::LoadModel;

/// Which bound drives the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreedyIndicator {
    Delta,
    DeltaTilde,
}

#[derive(Debug, Clone)]
pub struct GreedySettings {
    /// Training parameters, evaluated in the given order.
    pub mu_train: Vec<f64>,
    /// Stop once the total reduced dimension reaches this size.
    pub max_basis: usize,
    /// Stop once the worst indicator falls to or below this value.
    pub tol: f64,
    pub pca: PcaSettings,
    pub indicator: GreedyIndicator,
    pub convention: CpConvention,
    /// Use one conservative constant set for all parameters instead of
    /// per-parameter constants.
    pub worst_case_constants: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Basis reached `max_basis`.
    MaxSize,
    /// Worst indicator dropped to `tol`.
    Converged,
    /// Deflated snapshots contributed no new modes.
    Saturated,
}

/// One greedy iteration: the selected parameter, its indicator value, the
/// number of accepted modes, and the basis dimensions after enrichment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreedyRecord {
    pub iteration: usize,
    pub mu: f64,
    pub indicator: f64,
    pub accepted: usize,
    pub dim_q: usize,
    pub dim_v: usize,
}

#[derive(Debug)]
pub struct GreedyResult {
    pub basis: ReducedBasis,
    pub history: Vec<GreedyRecord>,
    pub stop: StopReason,
}

/// Failure modes of a training run. Stagnation keeps the partial history so
/// callers can persist it for diagnosis.
#[derive(Debug)]
pub enum TrainFailure {
    Stagnated {
        message: String,
        history: Vec<GreedyRecord>,
    },
    Other(Error),
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Error {
        match f {
            TrainFailure::Stagnated { message, .. } => Error::GreedyStagnation(message),
            TrainFailure::Other(e) => e,
        }
    }
}

impl From<Error> for TrainFailure {
    fn from(e: Error) -> TrainFailure {
        TrainFailure::Other(e)
    }
}

/// Three consecutive selections of the same parameter without indicator
/// decrease. The greedy loop aborts when this pattern appears, since further
/// sweeps would only repeat it.
pub fn stagnated(history: &[GreedyRecord]) -> bool {
    let n = history.len();
    if n < 3 {
        return false;
    }
    let (a, b, c) = (&history[n - 3], &history[n - 2], &history[n - 1]);
    a.mu == b.mu
        && b.mu == c.mu
        && b.indicator >= a.indicator
        && c.indicator >= b.indicator
}

pub fn greedy_train(
    m: &TruthModel,
    loads: &LoadModel,
    solver: &SolverSettings,
    settings: &GreedySettings,
    p0: &DVector<f64>,
    u0: &DVector<f64>,
) -> Result<GreedyResult> {
    greedy_train_full(m, loads, solver, settings, p0, u0).map_err(Into::into)
}

/// Like [`greedy_train`] but surfaces the stagnation history on abort.
pub fn greedy_train_full(
    m: &TruthModel,
    loads: &LoadModel,
    solver: &SolverSettings,
    settings: &GreedySettings,
    p0: &DVector<f64>,
    u0: &DVector<f64>,
) -> std::result::Result<GreedyResult, TrainFailure> {
    solver.validate()?;
    if settings.mu_train.is_empty() {
        return Err(Error::InvalidConfig("empty training parameter set".into()).into());
    }
    for &mu in &settings.mu_train {
        m.coeff.check_mu(mu)?;
    }
    if settings.tol < 0.0 || !settings.tol.is_finite() {
        return Err(Error::InvalidConfig("greedy tolerance must be finite and >= 0".into()).into());
    }

    let lift = LiftOperator::new(m)?;
    let constants: Vec<BoundConstants> = if settings.worst_case_constants {
        let wc = worst_case_constants(m, settings.convention)?;
        settings.mu_train.iter().map(|_| wc.clone()).collect()
    } else {
        settings
            .mu_train
            .par_iter()
            .map(|&mu| stability_constants(m, mu, settings.convention))
            .collect::<Result<Vec<_>>>()?
    };

    let mut basis = ReducedBasis::kernel_only(m)?;
    let mut truth_cache: Vec<Option<Trajectory>> = vec![None; settings.mu_train.len()];
    let mut history: Vec<GreedyRecord> = Vec::new();

    loop {
        // A cap at or below the current size means no enrichment is allowed;
        // with max_basis <= dim(K) that returns the kernel-only space.
        if basis.total_dim() >= settings.max_basis {
            return Ok(GreedyResult {
                basis,
                history,
                stop: StopReason::MaxSize,
            });
        }
        let offline = ResidualOffline::new(m, &basis, loads);
        let init = project_initial(m, &basis, p0, u0);
        let sys = project_system(m, &basis, loads);

        // Indicator for every training parameter with the current basis.
        let indicators: Vec<f64> = settings
            .mu_train
            .par_iter()
            .zip(constants.par_iter())
            .map(|(&mu, consts)| -> Result<f64> {
                let reduced = integrate_reduced(&sys, mu, solver, &init.p, &init.u)?;
                let (rp_sq, ru_sq) = offline.residual_norms_sq(mu, &reduced)?;
                let series = match settings.indicator {
                    GreedyIndicator::Delta => {
                        let e0 = init.err_p * init.err_p + init.err_u * init.err_u;
                        delta_series(&reduced.times, &rp_sq, &ru_sq, consts, e0)?
                    }
                    GreedyIndicator::DeltaTilde => delta_tilde_series(
                        &reduced.times,
                        &rp_sq,
                        &ru_sq,
                        consts,
                        init.err_p,
                        init.err_u,
                    ),
                };
                Ok(series.iter().cloned().fold(0.0, f64::max))
            })
            .collect::<Result<Vec<_>>>()?;

        let (worst_idx, worst) = indicators
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        if !worst.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite greedy indicator {worst} at mu = {}",
                settings.mu_train[worst_idx]
            ))
            .into());
        }

        let iteration = history.len();
        if worst <= settings.tol {
            history.push(GreedyRecord {
                iteration,
                mu: settings.mu_train[worst_idx],
                indicator: worst,
                accepted: 0,
                dim_q: basis.dim_q(),
                dim_v: basis.dim_v(),
            });
            return Ok(GreedyResult {
                basis,
                history,
                stop: StopReason::Converged,
            });
        }

        let mu_star = settings.mu_train[worst_idx];
        if truth_cache[worst_idx].is_none() {
            truth_cache[worst_idx] =
                Some(integrate_truth(m, loads, mu_star, solver, p0, u0)?);
        }
        let truth = truth_cache[worst_idx].as_ref().unwrap();

        let snaps = joint_snapshots(m, truth);
        let deflated = deflate_snapshots(m, &basis, &snaps);
        let modes = pca_q_modes(m, &deflated, &settings.pca);
        let (next, accepted) = basis.enrich(m, &lift, &modes)?;
        basis = next;

        history.push(GreedyRecord {
            iteration,
            mu: mu_star,
            indicator: worst,
            accepted,
            dim_q: basis.dim_q(),
            dim_v: basis.dim_v(),
        });

        if accepted == 0 {
            return Ok(GreedyResult {
                basis,
                history,
                stop: StopReason::Saturated,
            });
        }
        if stagnated(&history) {
            let tail: Vec<String> = history
                .iter()
                .rev()
                .take(3)
                .map(|r| format!("iter {} mu {} indicator {:.6e}", r.iteration, r.mu, r.indicator))
                .collect();
            return Err(TrainFailure::Stagnated {
                message: format!(
                    "no indicator progress over three sweeps at the same parameter: {}",
                    tail.join("; ")
                ),
                history,
            });
        }
    }
}
