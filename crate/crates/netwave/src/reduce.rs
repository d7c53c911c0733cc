//! Compatible reduced spaces and the projected Galerkin system.
//!
//! The pressure space Q_N collects PCA modes of truth snapshots; the flux
//! space is always `V_N = K + lift(Q_N)` where K is the divergence-free
//! edgewise-constant kernel and `lift` is the minimum-norm right-inverse of
//! the discrete spatial derivative. This pairing keeps the reduced model
//! well-posed and dissipative: the divergence of any V_N element lands in
//! Q_N (A1) and K is always contained in V_N (A2).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::fem::TruthModel;
use crate::forcing::TimeSignal;
use crate::integrate::{SolverSettings, Trajectory};
use crate::system::LoadModel;

/// Minimum-M_V-norm right-inverse of the discrete derivative: for Q
/// coefficients q it returns v in V with `M_Q^{-1} G v = q`.
pub struct LiftOperator {
    /// Cholesky of `G M_V^{-1} G^T`.
    chol: Cholesky<f64, Dyn>,
}

impl LiftOperator {
    pub fn new(m: &TruthModel) -> Result<LiftOperator> {
        let minv_gt = m.m_v_solve_mat(&m.g_div.transpose());
        let s = &m.g_div * minv_gt;
        let chol = Cholesky::new(s).ok_or_else(|| {
            Error::Numerical(
                "derivative lift operator is singular (network without boundary nodes?)".into(),
            )
        })?;
        Ok(LiftOperator { chol })
    }

    /// Lift one Q coefficient vector into V.
    pub fn apply(&self, m: &TruthModel, q: &DVector<f64>) -> DVector<f64> {
        let mq = DVector::from_fn(m.n_p, |i, _| m.m_q[i] * q[i]);
        let w = self.chol.solve(&mq);
        m.m_v_solve(&(m.g_div.transpose() * w))
    }
}

/// Derivative of a flux vector expressed in Q coefficients: `M_Q^{-1} G u`.
pub fn derivative_to_q(m: &TruthModel, u: &DVector<f64>) -> DVector<f64> {
    let gu = &m.g_div * u;
    DVector::from_fn(m.n_p, |i, _| gu[i] / m.m_q[i])
}

/// Compatible reduced basis. Q columns are M_Q-orthonormal, V columns
/// M_V-orthonormal with the kernel block first.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub q_basis: DMatrix<f64>,
    pub v_basis: DMatrix<f64>,
    pub kernel_dim: usize,
    /// Cumulative (dim Q, dim V) after each enrichment; the first entry is
    /// the initial kernel-only space (0, k). Prefixes at these boundaries
    /// are themselves compatible bases.
    pub blocks: Vec<(usize, usize)>,
}

impl ReducedBasis {
    /// Initial space: no pressure modes, fluxes spanned by the kernel.
    pub fn kernel_only(m: &TruthModel) -> Result<ReducedBasis> {
        let k = m.kernel_v.ncols();
        let mut v = DMatrix::zeros(m.n_u, 0);
        for c in 0..k {
            let col = DVector::from(m.kernel_v.column(c));
            if let Some(col) = gs_insert_v(m, &v, &col) {
                let n = v.ncols();
                v = v.insert_column(n, 0.0);
                v.set_column(n, &col);
            }
        }
        let kernel_dim = v.ncols();
        Ok(ReducedBasis {
            q_basis: DMatrix::zeros(m.n_p, 0),
            v_basis: v,
            kernel_dim,
            blocks: vec![(0, kernel_dim)],
        })
    }

    pub fn dim_q(&self) -> usize {
        self.q_basis.ncols()
    }

    pub fn dim_v(&self) -> usize {
        self.v_basis.ncols()
    }

    /// Reported size N = dim Q_N + dim V_N.
    pub fn total_dim(&self) -> usize {
        self.dim_q() + self.dim_v()
    }

    /// Enrich by new Q modes (M_Q-orthonormal, deflated against the current
    /// Q); their lifts are appended to V after M_V re-orthonormalization.
    /// Returns the enriched basis and the number of Q modes accepted.
    pub fn enrich(
        &self,
        m: &TruthModel,
        lift: &LiftOperator,
        new_modes: &DMatrix<f64>,
    ) -> Result<(ReducedBasis, usize)> {
        let mut q = self.q_basis.clone();
        let mut v = self.v_basis.clone();
        let mut accepted = 0;
        for c in 0..new_modes.ncols() {
            let col = DVector::from(new_modes.column(c));
            let Some(col) = gs_insert_q(m, &q, &col) else {
                continue;
            };
            let n = q.ncols();
            q = q.insert_column(n, 0.0);
            q.set_column(n, &col);
            accepted += 1;
            let lifted = lift.apply(m, &col);
            if let Some(lifted) = gs_insert_v(m, &v, &lifted) {
                let n = v.ncols();
                v = v.insert_column(n, 0.0);
                v.set_column(n, &lifted);
            }
        }
        let mut blocks = self.blocks.clone();
        blocks.push((q.ncols(), v.ncols()));
        Ok((
            ReducedBasis {
                q_basis: q,
                v_basis: v,
                kernel_dim: self.kernel_dim,
                blocks,
            },
            accepted,
        ))
    }

    /// The basis as it stood after `count` block boundaries (1 = kernel-only).
    pub fn prefix(&self, count: usize) -> ReducedBasis {
        assert!(count >= 1 && count <= self.blocks.len());
        let (dq, dv) = self.blocks[count - 1];
        ReducedBasis {
            q_basis: self.q_basis.columns(0, dq).into_owned(),
            v_basis: self.v_basis.columns(0, dv).into_owned(),
            kernel_dim: self.kernel_dim,
            blocks: self.blocks[..count].to_vec(),
        }
    }

    /// Reduced coefficients of the M_Q-orthogonal projection of `p`.
    pub fn project_q(&self, m: &TruthModel, p: &DVector<f64>) -> DVector<f64> {
        let weighted = DVector::from_fn(m.n_p, |i, _| m.m_q[i] * p[i]);
        self.q_basis.transpose() * weighted
    }

    /// Reduced coefficients of the M_V-orthogonal projection of `u`.
    pub fn project_v(&self, m: &TruthModel, u: &DVector<f64>) -> DVector<f64> {
        self.v_basis.transpose() * (&m.m_v * u)
    }

    /// Truth coefficients of a reduced pressure state.
    pub fn expand_q(&self, pr: &DVector<f64>) -> DVector<f64> {
        &self.q_basis * pr
    }

    pub fn expand_v(&self, ur: &DVector<f64>) -> DVector<f64> {
        &self.v_basis * ur
    }
}

/// Two-pass Gram-Schmidt of `col` against the M_Q-orthonormal columns of
/// `q`; `None` when the remainder is numerically zero.
fn gs_insert_q(m: &TruthModel, q: &DMatrix<f64>, col: &DVector<f64>) -> Option<DVector<f64>> {
    let weigh = |x: &DVector<f64>| DVector::from_fn(m.n_p, |i, _| m.m_q[i] * x[i]);
    let mut w = col.clone();
    let norm0 = m.norm_sq_q(&w).sqrt();
    for _ in 0..2 {
        if q.ncols() > 0 {
            let coeffs = q.transpose() * weigh(&w);
            w -= q * coeffs;
        }
    }
    let norm = m.norm_sq_q(&w).sqrt();
    if norm <= 1e-10 * norm0.max(1e-300) || norm == 0.0 {
        return None;
    }
    Some(w / norm)
}

fn gs_insert_v(m: &TruthModel, v: &DMatrix<f64>, col: &DVector<f64>) -> Option<DVector<f64>> {
    let mut w = col.clone();
    let norm0 = m.norm_sq_v(&w).sqrt();
    for _ in 0..2 {
        if v.ncols() > 0 {
            let coeffs = v.transpose() * (&m.m_v * &w);
            w -= v * coeffs;
        }
    }
    let norm = m.norm_sq_v(&w).sqrt();
    if norm <= 1e-10 * norm0.max(1e-300) || norm == 0.0 {
        return None;
    }
    Some(w / norm)
}

#[derive(Debug, Clone)]
pub struct PcaSettings {
    /// Retain modes until the captured fraction of snapshot energy reaches
    /// `1 - energy_cutoff`.
    pub energy_cutoff: f64,
    /// Hard cap on modes returned per call.
    pub max_modes: usize,
}

impl Default for PcaSettings {
    fn default() -> Self {
        PcaSettings {
            energy_cutoff: 1e-7,
            max_modes: 10,
        }
    }
}

/// M_Q-weighted PCA (method of snapshots) of pressure-space snapshot
/// vectors. Returns up to `max_modes` M_Q-orthonormal modes ordered by
/// decreasing energy. Eigenvalues below `1e-14 * lambda_max` are treated
/// as rank noise and never produce modes.
pub fn pca_q_modes(
    m: &TruthModel,
    snapshots: &[DVector<f64>],
    settings: &PcaSettings,
) -> DMatrix<f64> {
    let l = snapshots.len();
    if l == 0 || settings.max_modes == 0 {
        return DMatrix::zeros(m.n_p, 0);
    }
    let sqrt_w = DVector::from_fn(m.n_p, |i, _| m.m_q[i].sqrt());
    let mut y = DMatrix::zeros(m.n_p, l);
    for (c, s) in snapshots.iter().enumerate() {
        for i in 0..m.n_p {
            y[(i, c)] = sqrt_w[i] * s[i];
        }
    }
    // Eigendecompose on the smaller side.
    let (eigvals, modes_scaled): (Vec<f64>, DMatrix<f64>) = if l <= m.n_p {
        let gram = y.transpose() * &y;
        let eig = gram.symmetric_eigen();
        let order = sorted_desc(&eig.eigenvalues);
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut modes = DMatrix::zeros(m.n_p, order.len());
        for (k, &i) in order.iter().enumerate() {
            if vals[k] > 0.0 {
                let col = &y * eig.eigenvectors.column(i) / vals[k].sqrt();
                modes.set_column(k, &col);
            }
        }
        (vals, modes)
    } else {
        let cov = &y * y.transpose();
        let eig = cov.symmetric_eigen();
        let order = sorted_desc(&eig.eigenvalues);
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut modes = DMatrix::zeros(m.n_p, order.len());
        for (k, &i) in order.iter().enumerate() {
            modes.set_column(k, &eig.eigenvectors.column(i));
        }
        (vals, modes)
    };

    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return DMatrix::zeros(m.n_p, 0);
    }
    let floor = 1e-14 * eigvals[0].max(0.0);
    let mut kept = 0;
    let mut captured = 0.0;
    for &v in &eigvals {
        if kept >= settings.max_modes || v <= floor {
            break;
        }
        captured += v;
        kept += 1;
        if captured >= (1.0 - settings.energy_cutoff) * total {
            break;
        }
    }
    let mut out = DMatrix::zeros(m.n_p, kept);
    for k in 0..kept {
        // Undo the sqrt-weight scaling to return Q coefficients.
        let col = DVector::from_fn(m.n_p, |i, _| modes_scaled[(i, k)] / sqrt_w[i]);
        out.set_column(k, &col);
    }
    out
}

fn sorted_desc(vals: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    idx
}

/// Joint snapshot collection of a truth trajectory: every recorded pressure
/// plus every recorded flux derivative expressed in Q coefficients.
pub fn joint_snapshots(m: &TruthModel, traj: &Trajectory) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(2 * traj.len());
    for p in &traj.p {
        out.push(p.clone());
    }
    for u in &traj.u {
        out.push(derivative_to_q(m, u));
    }
    out
}

/// Remove the M_Q-projection onto the current Q_N from each snapshot.
pub fn deflate_snapshots(
    m: &TruthModel,
    basis: &ReducedBasis,
    snapshots: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    snapshots
        .iter()
        .map(|s| {
            if basis.dim_q() == 0 {
                s.clone()
            } else {
                s - basis.expand_q(&basis.project_q(m, s))
            }
        })
        .collect()
}

/// Reduced initial state plus the initial-error norms for the bound.
pub struct ReducedInitial {
    pub p: DVector<f64>,
    pub u: DVector<f64>,
    pub err_p: f64,
    pub err_u: f64,
}

pub fn project_initial(
    m: &TruthModel,
    basis: &ReducedBasis,
    p0: &DVector<f64>,
    u0: &DVector<f64>,
) -> ReducedInitial {
    let pr = basis.project_q(m, p0);
    let ur = basis.project_v(m, u0);
    // Pythagoras: projection error from the norm difference, clamped.
    let err_p = (m.norm_sq_q(p0) - pr.norm_squared()).max(0.0).sqrt();
    let err_u = (m.norm_sq_v(u0) - ur.norm_squared()).max(0.0).sqrt();
    ReducedInitial {
        p: pr,
        u: ur,
        err_p,
        err_u,
    }
}

/// Projected operators and loads of the reduced Galerkin system.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub dim_q: usize,
    pub dim_v: usize,
    pub m_a_r: DMatrix<f64>,
    pub m_b_r: DMatrix<f64>,
    pub d_r: DMatrix<f64>,
    /// `dim_q x dim_v` divergence coupling.
    pub g_r: DMatrix<f64>,
    /// `dim_v x #boundary` boundary pressure map.
    pub b_r: DMatrix<f64>,
    pub f_terms: Vec<(TimeSignal, DVector<f64>)>,
    pub g_terms: Vec<(TimeSignal, DVector<f64>)>,
    pub boundary: Vec<TimeSignal>,
}

pub fn project_system(m: &TruthModel, basis: &ReducedBasis, loads: &LoadModel) -> ReducedSystem {
    let q = &basis.q_basis;
    let v = &basis.v_basis;
    let scale_rows = |mat: &DMatrix<f64>, w: &DVector<f64>| {
        let mut out = mat.clone();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] *= w[i];
            }
        }
        out
    };
    let m_a_r = q.transpose() * scale_rows(q, &m.m_a);
    let m_b_r = v.transpose() * &m.m_b * v;
    let d_r = v.transpose() * &m.d_unit * v;
    let g_r = q.transpose() * &m.g_div * v;
    let b_r = v.transpose() * &m.b_bnd;
    let f_terms = loads
        .f_components()
        .iter()
        .map(|(s, vec)| (s.clone(), q.transpose() * vec))
        .collect();
    let g_terms = loads
        .g_components()
        .iter()
        .map(|(s, vec)| (s.clone(), v.transpose() * vec))
        .collect();
    ReducedSystem {
        dim_q: basis.dim_q(),
        dim_v: basis.dim_v(),
        m_a_r,
        m_b_r,
        d_r,
        g_r,
        b_r,
        f_terms,
        g_terms,
        boundary: loads.boundary_signals().to_vec(),
    }
}

impl ReducedSystem {
    fn f_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim_q);
        for (s, vec) in &self.f_terms {
            let theta = s.eval(t);
            if theta != 0.0 {
                out.axpy(theta, vec, 1.0);
            }
        }
        out
    }

    fn flux_load_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim_v);
        for (s, vec) in &self.g_terms {
            let theta = s.eval(t);
            if theta != 0.0 {
                out.axpy(theta, vec, 1.0);
            }
        }
        let pb = DVector::from_iterator(self.boundary.len(), self.boundary.iter().map(|s| s.eval(t)));
        out.gemv(1.0, &self.b_r, &pb, 1.0);
        out
    }
}

/// Implicit Euler on the reduced system with the same Schur-complement
/// elimination as the truth solver.
pub struct ReducedSolver<'s> {
    sys: &'s ReducedSystem,
    pub mu: f64,
    pub tau: f64,
    m_a_chol: Cholesky<f64, Dyn>,
    schur: Cholesky<f64, Dyn>,
}

impl<'s> ReducedSolver<'s> {
    pub fn new(sys: &'s ReducedSystem, mu: f64, tau: f64) -> Result<ReducedSolver<'s>> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidConfig("time step must be positive".into()));
        }
        let m_a_chol = Cholesky::new(sys.m_a_r.clone()).ok_or_else(|| {
            Error::Numerical("reduced pressure mass is not positive definite".into())
        })?;
        let ga = m_a_chol.solve(&sys.g_r);
        let mut s = sys.g_r.transpose() * ga;
        s *= tau * tau;
        s += &sys.m_b_r;
        s += sys.d_r.scale(tau * mu);
        let schur = Cholesky::new(s).ok_or_else(|| {
            Error::Numerical("reduced step matrix is not positive definite".into())
        })?;
        Ok(ReducedSolver {
            sys,
            mu,
            tau,
            m_a_chol,
            schur,
        })
    }

    pub fn step(&self, t_next: f64, p: &mut DVector<f64>, u: &mut DVector<f64>) {
        let sys = self.sys;
        let tau = self.tau;
        let mut w = p.clone();
        w += self.m_a_chol.solve(&sys.f_at(t_next)) * tau;
        let mut rhs = &sys.m_b_r * &*u;
        rhs.gemv_tr(tau, &sys.g_r, &w, 1.0);
        rhs.axpy(tau, &sys.flux_load_at(t_next), 1.0);
        let u_next = self.schur.solve(&rhs);
        w -= self.m_a_chol.solve(&(&sys.g_r * &u_next)) * tau;
        *p = w;
        *u = u_next;
    }

    pub fn run(
        &self,
        settings: &SolverSettings,
        p0: &DVector<f64>,
        u0: &DVector<f64>,
    ) -> Result<Trajectory> {
        settings.validate()?;
        if p0.len() != self.sys.dim_q || u0.len() != self.sys.dim_v {
            return Err(Error::DimensionMismatch(format!(
                "reduced initial state ({}, {}) does not match spaces ({}, {})",
                p0.len(),
                u0.len(),
                self.sys.dim_q,
                self.sys.dim_v
            )));
        }
        let steps = settings.steps();
        let every = settings.record_every;
        let mut traj = Trajectory {
            tau: self.tau,
            record_every: every,
            times: Vec::with_capacity(steps + 1),
            p: Vec::with_capacity(steps + 1),
            u: Vec::with_capacity(steps + 1),
        };
        let mut p = p0.clone();
        let mut u = u0.clone();
        traj.times.push(0.0);
        traj.p.push(p.clone());
        traj.u.push(u.clone());
        for n in 1..=steps {
            let t = n as f64 * self.tau;
            self.step(t, &mut p, &mut u);
            if !(p.iter().all(|x| x.is_finite()) && u.iter().all(|x| x.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite reduced state at t = {t} (step {n})"
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

pub fn integrate_reduced(
    sys: &ReducedSystem,
    mu: f64,
    settings: &SolverSettings,
    p0: &DVector<f64>,
    u0: &DVector<f64>,
) -> Result<Trajectory> {
    ReducedSolver::new(sys, mu, settings.tau)?.run(settings, p0, u0)
}

/// Reduced-state energy `0.5 (p^T M_a_r p + u^T M_b_r u)`.
pub fn reduced_energy(sys: &ReducedSystem, p: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let pa = (p.transpose() * &sys.m_a_r * p)[(0, 0)];
    let ub = (u.transpose() * &sys.m_b_r * u)[(0, 0)];
    0.5 * (pa + ub)
}

/// Compatibility diagnostics: worst relative defects of the A1 property
/// (derivatives of V_N basis vectors lie in Q_N), the A2 property (kernel
/// contained in V_N), and the two orthonormality defects.
pub struct CompatibilityReport {
    pub a1: f64,
    pub a2: f64,
    pub orth_q: f64,
    pub orth_v: f64,
}

pub fn check_compatibility(m: &TruthModel, basis: &ReducedBasis) -> CompatibilityReport {
    let mut a1 = 0.0f64;
    for c in 0..basis.dim_v() {
        let v = DVector::from(basis.v_basis.column(c));
        let q = derivative_to_q(m, &v);
        let norm = m.norm_sq_q(&q).sqrt();
        if norm <= 1e-12 {
            continue;
        }
        let resid = &q - basis.expand_q(&basis.project_q(m, &q));
        a1 = a1.max(m.norm_sq_q(&resid).sqrt() / norm);
    }
    let mut a2 = 0.0f64;
    for c in 0..m.kernel_v.ncols() {
        let k = DVector::from(m.kernel_v.column(c));
        let norm = m.norm_sq_v(&k).sqrt();
        let resid = &k - basis.expand_v(&basis.project_v(m, &k));
        a2 = a2.max(m.norm_sq_v(&resid).sqrt() / norm.max(1e-300));
    }
    let weighted_q = {
        let mut w = basis.q_basis.clone();
        for i in 0..m.n_p {
            for j in 0..w.ncols() {
                w[(i, j)] *= m.m_q[i];
            }
        }
        basis.q_basis.transpose() * w
    };
    let orth_q = (&weighted_q - DMatrix::identity(basis.dim_q(), basis.dim_q())).amax();
    let gram_v = basis.v_basis.transpose() * &m.m_v * &basis.v_basis;
    let orth_v = (&gram_v - DMatrix::identity(basis.dim_v(), basis.dim_v())).amax();
    CompatibilityReport {
        a1,
        a2,
        orth_q,
        orth_v,
    }
}
