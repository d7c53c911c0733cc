//! Mixed finite-element truth discretization on the network.
//!
//! Pressures live in the edgewise-P0 space Q, fluxes in the edgewise-P1
//! space V with the junction flux balance built in: at every interior node
//! one incident endpoint value is eliminated in favour of the others, so V
//! carries `|E|*(c+1) - #junctions` free coefficients. The elimination is
//! encoded in a signed 0/1 matrix C mapping free coefficients to the raw
//! per-edge P1 coefficients; every constrained operator is `C^T * raw * C`.
//!
//! Local integrals are closed-form: P0 mass `h`, P1 cell mass
//! `(h/6) [[2,1],[1,2]]`, P1 cell stiffness `(1/(w h)) [[1,-1],[-1,1]]`,
//! divergence coupling `[-1, +1]` per cell. Loads from general spatial
//! profiles use three-point Gauss quadrature per cell.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::forcing::Expr;
use crate::network::{KernelBasis, NetworkGraph};

/// Per-edge material coefficients and the admissible damping-scale range.
#[derive(Debug, Clone)]
pub struct EdgeCoefficients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub d_base: Vec<f64>,
    pub mu_min: f64,
    pub mu_max: f64,
}

impl EdgeCoefficients {
    pub fn validate(&self, edge_count: usize) -> Result<()> {
        for (name, v) in [("a", &self.a), ("b", &self.b), ("d_base", &self.d_base)] {
            if v.len() != edge_count {
                return Err(Error::InvalidCoefficients(format!(
                    "coefficient '{name}' has {} entries for {edge_count} edges",
                    v.len()
                )));
            }
            if v.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
                return Err(Error::InvalidCoefficients(format!(
                    "coefficient '{name}' must be positive and finite"
                )));
            }
        }
        if !(self.mu_min.is_finite() && self.mu_max.is_finite() && 0.0 < self.mu_min) {
            return Err(Error::InvalidCoefficients(
                "damping-scale range must be positive and finite".into(),
            ));
        }
        if self.mu_min > self.mu_max {
            return Err(Error::InvalidCoefficients(
                "damping-scale range is empty (min > max)".into(),
            ));
        }
        Ok(())
    }

    pub fn check_mu(&self, mu: f64) -> Result<()> {
        if !(mu >= self.mu_min && mu <= self.mu_max) {
            return Err(Error::MuOutOfRange {
                mu,
                min: self.mu_min,
                max: self.mu_max,
            });
        }
        Ok(())
    }
}

/// Assembled truth-level spaces and operators for one network + mesh.
///
/// Time-independent and damping-scale independent; the damping matrix is
/// stored at unit scale and multiplied by the scale online.
#[derive(Debug, Clone)]
pub struct TruthModel {
    pub graph: NetworkGraph,
    pub coeff: EdgeCoefficients,
    pub cells_per_edge: usize,
    pub n_p: usize,
    pub n_u: usize,
    n_raw: usize,
    /// Raw index of each free flux coefficient, ascending.
    raw_of_free: Vec<usize>,
    /// Elimination matrix, `n_raw x n_u`.
    c_mat: DMatrix<f64>,
    /// P0 mass diagonal (cell volumes).
    pub m_q: DVector<f64>,
    /// a-weighted P0 mass diagonal.
    pub m_a: DVector<f64>,
    /// Unweighted P1 mass on V.
    pub m_v: DMatrix<f64>,
    /// b-weighted P1 mass on V.
    pub m_b: DMatrix<f64>,
    /// Damping matrix on V at unit scale (weight d_base).
    pub d_unit: DMatrix<f64>,
    /// (1/a)-weighted P1 stiffness on V.
    pub a_stiff: DMatrix<f64>,
    /// Divergence coupling, `n_p x n_u`: `G[i][j] = (dx phi_j, psi_i)`.
    pub g_div: DMatrix<f64>,
    /// Boundary pressure load map, `n_u x #boundary`: +1 at the start of an
    /// edge leaving a boundary node, -1 at the end of an edge entering one.
    pub b_bnd: DMatrix<f64>,
    /// Divergence-free edgewise-constant fluxes expanded to V coefficients,
    /// `n_u x dim K`.
    pub kernel_v: DMatrix<f64>,
    m_v_chol: Cholesky<f64, Dyn>,
}

impl TruthModel {
    pub fn build(
        graph: NetworkGraph,
        coeff: EdgeCoefficients,
        kernel: &KernelBasis,
        cells_per_edge: usize,
    ) -> Result<TruthModel> {
        coeff.validate(graph.edge_count())?;
        if cells_per_edge == 0 {
            return Err(Error::InvalidConfig("cells_per_edge must be at least 1".into()));
        }
        let ne = graph.edge_count();
        let c = cells_per_edge;
        let n_p = ne * c;
        let n_raw = ne * (c + 1);
        let raw_index = |e: usize, k: usize| e * (c + 1) + k;
        let cell_index = |e: usize, k: usize| e * c + k;

        // One eliminated endpoint coefficient per junction: the end value of
        // the first incoming edge, or the start value of the first outgoing
        // edge for a junction without inflow.
        let mut pivot_of_raw = vec![None; n_raw];
        for &v in graph.interior_nodes() {
            let pivot = if let Some(&e) = graph.incoming(v).first() {
                raw_index(e, c)
            } else {
                raw_index(graph.outgoing(v)[0], 0)
            };
            pivot_of_raw[pivot] = Some(v);
        }
        let raw_of_free: Vec<usize> =
            (0..n_raw).filter(|&r| pivot_of_raw[r].is_none()).collect();
        let n_u = raw_of_free.len();
        let mut free_of_raw = vec![usize::MAX; n_raw];
        for (j, &r) in raw_of_free.iter().enumerate() {
            free_of_raw[r] = j;
        }

        // C: identity on free coefficients; each pivot row rebuilds the
        // eliminated value from the balance at its junction.
        let mut c_mat = DMatrix::zeros(n_raw, n_u);
        for (j, &r) in raw_of_free.iter().enumerate() {
            c_mat[(r, j)] = 1.0;
        }
        for (pivot, node) in pivot_of_raw.iter().enumerate() {
            let Some(v) = *node else { continue };
            // Solving the balance sum_in u(end) = sum_out u(start) for the
            // pivot: an eliminated end value gets +start -end coefficients,
            // an eliminated start value the opposite. Endpoint coefficients
            // at distinct junctions are disjoint, so every referenced
            // coefficient here is free.
            let pivot_is_start = pivot % (c + 1) == 0;
            let (in_sign, out_sign) = if pivot_is_start { (1.0, -1.0) } else { (-1.0, 1.0) };
            for &e in graph.incoming(v) {
                let r = raw_index(e, c);
                if r != pivot {
                    c_mat[(pivot, free_of_raw[r])] += in_sign;
                }
            }
            for &e in graph.outgoing(v) {
                let r = raw_index(e, 0);
                if r != pivot {
                    c_mat[(pivot, free_of_raw[r])] += out_sign;
                }
            }
        }

        // Diagonal P0 matrices.
        let mut m_q = DVector::zeros(n_p);
        let mut m_a = DVector::zeros(n_p);
        for (e, edge) in graph.edges().iter().enumerate() {
            let h = edge.length / c as f64;
            for k in 0..c {
                m_q[cell_index(e, k)] = h;
                m_a[cell_index(e, k)] = coeff.a[e] * h;
            }
        }

        // Raw P1 matrices from closed-form cell integrals.
        let assemble_p1 = |weight: &dyn Fn(usize) -> f64| -> DMatrix<f64> {
            let mut m = DMatrix::zeros(n_raw, n_raw);
            for (e, edge) in graph.edges().iter().enumerate() {
                let h = edge.length / c as f64;
                let w = weight(e);
                for k in 0..c {
                    let (i0, i1) = (raw_index(e, k), raw_index(e, k + 1));
                    m[(i0, i0)] += w * h / 3.0;
                    m[(i1, i1)] += w * h / 3.0;
                    m[(i0, i1)] += w * h / 6.0;
                    m[(i1, i0)] += w * h / 6.0;
                }
            }
            m
        };
        let m_v_raw = assemble_p1(&|_| 1.0);
        let m_b_raw = assemble_p1(&|e| coeff.b[e]);
        let d_raw = assemble_p1(&|e| coeff.d_base[e]);
        let mut a_raw = DMatrix::zeros(n_raw, n_raw);
        for (e, edge) in graph.edges().iter().enumerate() {
            let h = edge.length / c as f64;
            let w = 1.0 / (coeff.a[e] * h);
            for k in 0..c {
                let (i0, i1) = (raw_index(e, k), raw_index(e, k + 1));
                a_raw[(i0, i0)] += w;
                a_raw[(i1, i1)] += w;
                a_raw[(i0, i1)] -= w;
                a_raw[(i1, i0)] -= w;
            }
        }

        let constrain = |m: &DMatrix<f64>| c_mat.transpose() * m * &c_mat;
        let m_v = constrain(&m_v_raw);
        let m_b = constrain(&m_b_raw);
        let d_unit = constrain(&d_raw);
        let a_stiff = constrain(&a_raw);

        // Divergence coupling: each cell contributes -1 at its left node
        // and +1 at its right node.
        let mut g_raw = DMatrix::zeros(n_p, n_raw);
        for e in 0..ne {
            for k in 0..c {
                g_raw[(cell_index(e, k), raw_index(e, k))] = -1.0;
                g_raw[(cell_index(e, k), raw_index(e, k + 1))] = 1.0;
            }
        }
        let g_div = g_raw * &c_mat;

        // Boundary pressure loads from the integration by parts of (dx p, phi).
        let nb = graph.boundary_nodes().len();
        let mut b_raw = DMatrix::zeros(n_raw, nb);
        for (bi, &v) in graph.boundary_nodes().iter().enumerate() {
            for &e in graph.outgoing(v) {
                b_raw[(raw_index(e, 0), bi)] += 1.0;
            }
            for &e in graph.incoming(v) {
                b_raw[(raw_index(e, c), bi)] -= 1.0;
            }
        }
        let b_bnd = c_mat.transpose() * b_raw;

        // Edgewise-constant kernel fluxes satisfy every junction balance, so
        // their free coefficients are read straight off the raw layout.
        let mut kernel_v = DMatrix::zeros(n_u, kernel.dim);
        for (j, &r) in raw_of_free.iter().enumerate() {
            let e = r / (c + 1);
            for col in 0..kernel.dim {
                kernel_v[(j, col)] = kernel.vectors[(e, col)];
            }
        }

        let m_v_chol = Cholesky::new(m_v.clone())
            .ok_or_else(|| Error::Numerical("flux mass matrix is not positive definite".into()))?;

        Ok(TruthModel {
            graph,
            coeff,
            cells_per_edge,
            n_p,
            n_u,
            n_raw,
            raw_of_free,
            c_mat,
            m_q,
            m_a,
            m_v,
            m_b,
            d_unit,
            a_stiff,
            g_div,
            b_bnd,
            kernel_v,
            m_v_chol,
        })
    }

    pub fn h(&self, e: usize) -> f64 {
        self.graph.edges()[e].length / self.cells_per_edge as f64
    }

    pub fn cell_index(&self, e: usize, k: usize) -> usize {
        e * self.cells_per_edge + k
    }

    pub fn raw_index(&self, e: usize, k: usize) -> usize {
        e * (self.cells_per_edge + 1) + k
    }

    pub fn n_raw(&self) -> usize {
        self.n_raw
    }

    pub fn elimination(&self) -> &DMatrix<f64> {
        &self.c_mat
    }

    /// Raw P1 index backing each free flux coefficient, ascending.
    pub fn free_flux_indices(&self) -> &[usize] {
        &self.raw_of_free
    }

    /// Raw per-edge P1 coefficients of a constrained flux vector.
    pub fn to_raw(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.c_mat * u
    }

    /// Solve `M_V x = rhs`.
    pub fn m_v_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.m_v_chol.solve(rhs)
    }

    pub fn m_v_solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.m_v_chol.solve(rhs)
    }

    /// Squared L2 norm of a pressure coefficient vector.
    pub fn norm_sq_q(&self, p: &DVector<f64>) -> f64 {
        p.iter().zip(self.m_q.iter()).map(|(x, m)| x * x * m).sum()
    }

    /// Squared L2 norm of a flux coefficient vector.
    pub fn norm_sq_v(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.m_v * u)[(0, 0)]
    }

    /// L2 projection of an edgewise function onto Q (cell averages).
    pub fn project_p0(&self, f: &dyn Fn(usize, f64) -> f64) -> DVector<f64> {
        let mut p = DVector::zeros(self.n_p);
        for e in 0..self.graph.edge_count() {
            let h = self.h(e);
            for k in 0..self.cells_per_edge {
                let x0 = k as f64 * h;
                p[self.cell_index(e, k)] = gauss3(x0, x0 + h, &|x| f(e, x)) / h;
            }
        }
        p
    }

    /// L2 projection of an edgewise function onto V.
    pub fn project_p1(&self, f: &dyn Fn(usize, f64) -> f64) -> DVector<f64> {
        let rhs = self.c_mat.transpose() * self.raw_p1_load(f, None);
        self.m_v_solve(&rhs)
    }

    /// Load vector on Q for a spatial profile restricted to `edges`
    /// (all edges when `None`).
    pub fn p0_load(&self, space: &Expr, edges: Option<&[usize]>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_p);
        for e in edge_list(edges, self.graph.edge_count()) {
            let h = self.h(e);
            for k in 0..self.cells_per_edge {
                let x0 = k as f64 * h;
                v[self.cell_index(e, k)] = gauss3(x0, x0 + h, &|x| space.eval(x));
            }
        }
        v
    }

    /// Load vector on V for a spatial profile restricted to `edges`.
    pub fn p1_load(&self, space: &Expr, edges: Option<&[usize]>) -> DVector<f64> {
        let set: Vec<usize> = edge_list(edges, self.graph.edge_count()).collect();
        let raw = self.raw_p1_load(&|e, x| if set.contains(&e) { space.eval(x) } else { 0.0 }, None);
        self.c_mat.transpose() * raw
    }

    fn raw_p1_load(
        &self,
        f: &dyn Fn(usize, f64) -> f64,
        edges: Option<&[usize]>,
    ) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_raw);
        for e in edge_list(edges, self.graph.edge_count()) {
            let h = self.h(e);
            for k in 0..self.cells_per_edge {
                let x0 = k as f64 * h;
                let x1 = x0 + h;
                // Hat functions on this cell: left decreasing, right increasing.
                v[self.raw_index(e, k)] += gauss3(x0, x1, &|x| f(e, x) * (x1 - x) / h);
                v[self.raw_index(e, k + 1)] += gauss3(x0, x1, &|x| f(e, x) * (x - x0) / h);
            }
        }
        v
    }
}

fn edge_list(edges: Option<&[usize]>, ne: usize) -> impl Iterator<Item = usize> + '_ {
    match edges {
        Some(list) => EitherIter::Slice(list.iter().copied()),
        None => EitherIter::Range(0..ne),
    }
}

enum EitherIter<'a> {
    Slice(std::iter::Copied<std::slice::Iter<'a, usize>>),
    Range(std::ops::Range<usize>),
}

impl Iterator for EitherIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            EitherIter::Slice(i) => i.next(),
            EitherIter::Range(i) => i.next(),
        }
    }
}

/// Three-point Gauss-Legendre quadrature on `[x0, x1]` (exact to degree 5).
pub fn gauss3(x0: f64, x1: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    const P: f64 = 0.774596669241483; // sqrt(3/5)
    const W0: f64 = 8.0 / 9.0;
    const W1: f64 = 5.0 / 9.0;
    let mid = 0.5 * (x0 + x1);
    let half = 0.5 * (x1 - x0);
    half * (W0 * f(mid) + W1 * f(mid - half * P) + W1 * f(mid + half * P))
}
