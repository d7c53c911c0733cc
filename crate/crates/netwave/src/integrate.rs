//! Implicit Euler time integration of the truth system.
//!
//! Each step solves the coupled block system
//! `M_a (p+ - p)/tau = F(t+) - G u+` and
//! `M_b (u+ - u)/tau = G^T p+ - mu D u+ + L(t+)`
//! exactly, via the flux Schur complement
//! `S = M_b + tau mu D + tau^2 G^T M_a^{-1} G`, which is symmetric positive
//! definite; its Cholesky factor is computed once per (mu, tau) and reused
//! for every step. Loads are evaluated at the new time level, so the scheme
//! is fully implicit and matches the residual convention used by the
//! certification module.

use nalgebra::{Cholesky, DVector, Dyn};

use crate::error::{Error, Result};
use crate::fem::TruthModel;
use crate::system::LoadModel;

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tau: f64,
    pub t_final: f64,
    /// Record every k-th state (the initial state is always recorded).
    pub record_every: usize,
}

impl SolverSettings {
    pub fn new(tau: f64, t_final: f64) -> SolverSettings {
        SolverSettings {
            tau,
            t_final,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig("time step must be positive".into()));
        }
        if !(self.t_final.is_finite() && self.t_final >= self.tau) {
            return Err(Error::InvalidConfig(
                "final time must be at least one time step".into(),
            ));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of time steps (final time rounded to a whole step count).
    pub fn steps(&self) -> usize {
        ((self.t_final / self.tau).round() as usize).max(1)
    }
}

/// Recorded states of one integration run. `p[i]`, `u[i]` belong to
/// `times[i]`; with unit recording cadence consecutive states are one
/// integration step apart.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Integration step (not the recording interval).
    pub tau: f64,
    pub record_every: usize,
    pub times: Vec<f64>,
    pub p: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Factorized step operator for one (mu, tau) pair.
pub struct TruthSolver<'m> {
    model: &'m TruthModel,
    pub mu: f64,
    pub tau: f64,
    schur: Cholesky<f64, Dyn>,
}

impl<'m> TruthSolver<'m> {
    pub fn new(model: &'m TruthModel, mu: f64, tau: f64) -> Result<TruthSolver<'m>> {
        model.coeff.check_mu(mu)?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidConfig("time step must be positive".into()));
        }
        // S = M_b + tau mu D + tau^2 G^T M_a^{-1} G
        let mut ga = model.g_div.clone();
        for i in 0..model.n_p {
            let inv = 1.0 / model.m_a[i];
            for j in 0..model.n_u {
                ga[(i, j)] *= inv;
            }
        }
        let mut s = model.g_div.transpose() * ga;
        s *= tau * tau;
        s += &model.m_b;
        s += model.d_unit.scale(tau * mu);
        let schur = Cholesky::new(s).ok_or_else(|| {
            Error::Numerical("implicit Euler step matrix is not positive definite".into())
        })?;
        Ok(TruthSolver {
            model,
            mu,
            tau,
            schur,
        })
    }

    /// Advance one step from `(p, u)` in place; loads evaluated at `t_next`.
    pub fn step(&self, loads: &LoadModel, t_next: f64, p: &mut DVector<f64>, u: &mut DVector<f64>) {
        let m = self.model;
        let tau = self.tau;
        // w = p_n + tau M_a^{-1} F(t+): the pressure update minus its flux part.
        let f = loads.f_at(t_next);
        let mut w = p.clone();
        for i in 0..m.n_p {
            w[i] += tau * f[i] / m.m_a[i];
        }
        // rhs = M_b u_n + tau G^T w + tau L(t+)
        let mut rhs = &m.m_b * &*u;
        rhs.gemv_tr(tau, &m.g_div, &w, 1.0);
        rhs.axpy(tau, &loads.flux_load_at(m, t_next), 1.0);
        let u_next = self.schur.solve(&rhs);
        // p+ = w - tau M_a^{-1} G u+
        let gu = &m.g_div * &u_next;
        for i in 0..m.n_p {
            w[i] -= tau * gu[i] / m.m_a[i];
        }
        *p = w;
        *u = u_next;
    }

    /// Integrate from the given initial state, recording at the requested
    /// cadence (initial and final states always included).
    pub fn run(
        &self,
        loads: &LoadModel,
        settings: &SolverSettings,
        p0: &DVector<f64>,
        u0: &DVector<f64>,
    ) -> Result<Trajectory> {
        settings.validate()?;
        let m = self.model;
        if p0.len() != m.n_p || u0.len() != m.n_u {
            return Err(Error::DimensionMismatch(format!(
                "initial state ({}, {}) does not match truth spaces ({}, {})",
                p0.len(),
                u0.len(),
                m.n_p,
                m.n_u
            )));
        }
        let steps = settings.steps();
        let every = settings.record_every;
        let mut traj = Trajectory {
            tau: self.tau,
            record_every: every,
            times: Vec::with_capacity(steps / every + 2),
            p: Vec::with_capacity(steps / every + 2),
            u: Vec::with_capacity(steps / every + 2),
        };
        let mut p = p0.clone();
        let mut u = u0.clone();
        traj.times.push(0.0);
        traj.p.push(p.clone());
        traj.u.push(u.clone());
        for n in 1..=steps {
            let t = n as f64 * self.tau;
            self.step(loads, t, &mut p, &mut u);
            if !(p.iter().all(|x| x.is_finite()) && u.iter().all(|x| x.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite state at t = {t} (step {n})"
                )));
            }
            if n % every == 0 || n == steps {
                traj.times.push(t);
                traj.p.push(p.clone());
                traj.u.push(u.clone());
            }
        }
        Ok(traj)
    }
}

/// One-shot integration; factorizes, runs, and drops the factorization.
pub fn integrate_truth(
    model: &TruthModel,
    loads: &LoadModel,
    mu: f64,
    settings: &SolverSettings,
    p0: &DVector<f64>,
    u0: &DVector<f64>,
) -> Result<Trajectory> {
    TruthSolver::new(model, mu, settings.tau)?.run(loads, settings, p0, u0)
}

/// Weighted state energy `0.5 (p^T M_a p + u^T M_b u)`.
pub fn state_energy(model: &TruthModel, p: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let pa: f64 = p.iter().zip(model.m_a.iter()).map(|(x, m)| x * x * m).sum();
    let ub = (u.transpose() * &model.m_b * u)[(0, 0)];
    0.5 * (pa + ub)
}

/// Plain squared L2 state norm `||p||^2 + ||u||^2`, used in decay checks.
pub fn plain_norm_sq(model: &TruthModel, p: &DVector<f64>, u: &DVector<f64>) -> f64 {
    model.norm_sq_q(p) + model.norm_sq_v(u)
}

/// Remark-style energies of the discrete time-derivative states,
/// `E_n = 0.5 (dp^T M_a dp + du^T M_b du)` with backward differences;
/// returned per recorded state from the second one on, with its times.
pub fn derivative_energies(model: &TruthModel, traj: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let mut times = Vec::new();
    let mut energies = Vec::new();
    for n in 1..traj.len() {
        let dt = traj.times[n] - traj.times[n - 1];
        let dp = (&traj.p[n] - &traj.p[n - 1]) / dt;
        let du = (&traj.u[n] - &traj.u[n - 1]) / dt;
        times.push(traj.times[n]);
        energies.push(state_energy(model, &dp, &du));
    }
    (times, energies)
}
