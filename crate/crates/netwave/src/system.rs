//! Discrete loads: volume sources projected onto the truth spaces and
//! boundary pressure signals mapped through the boundary coupling.
//!
//! Every load is affine in a fixed set of time signals,
//! `F(t) = sum_k theta_k(t) F_k`, which the certification module relies on
//! for its offline-online residual split.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fem::TruthModel;
use crate::forcing::{ForcingModel, TimeSignal};

/// Time-affine discrete loads for one truth model.
#[derive(Debug, Clone)]
pub struct LoadModel {
    n_p: usize,
    n_u: usize,
    /// Volume sources in the pressure equation: coefficient vectors on Q.
    f_terms: Vec<(TimeSignal, DVector<f64>)>,
    /// Volume sources in the flux equation: coefficient vectors on V.
    g_terms: Vec<(TimeSignal, DVector<f64>)>,
    /// Boundary pressure signal per boundary node, in boundary order.
    boundary: Vec<TimeSignal>,
}

impl LoadModel {
    pub fn build(model: &TruthModel, forcing: &ForcingModel) -> Result<LoadModel> {
        let nb = model.graph.boundary_nodes().len();
        if !forcing.boundary.is_empty() && forcing.boundary.len() != nb {
            return Err(Error::InvalidConfig(format!(
                "expected {} boundary signals, got {}",
                nb,
                forcing.boundary.len()
            )));
        }
        let ne = model.graph.edge_count();
        let check_edges = |edges: &[usize]| -> Result<()> {
            match edges.iter().find(|&&e| e >= ne) {
                Some(&e) => Err(Error::InvalidConfig(format!(
                    "source term references edge {e}, network has {ne} edges"
                ))),
                None => Ok(()),
            }
        };
        let mut f_terms = Vec::new();
        for term in &forcing.f_terms {
            check_edges(&term.edges)?;
            let vec = model.p0_load(&term.space, Some(&term.edges));
            f_terms.push((term.time.clone(), vec));
        }
        let mut g_terms = Vec::new();
        for term in &forcing.g_terms {
            check_edges(&term.edges)?;
            let vec = model.p1_load(&term.space, Some(&term.edges));
            g_terms.push((term.time.clone(), vec));
        }
        let boundary = if forcing.boundary.is_empty() {
            vec![TimeSignal::Zero; nb]
        } else {
            forcing.boundary.clone()
        };
        Ok(LoadModel {
            n_p: model.n_p,
            n_u: model.n_u,
            f_terms,
            g_terms,
            boundary,
        })
    }

    /// Loads with all signals identically zero (homogeneous runs).
    pub fn homogeneous(model: &TruthModel) -> LoadModel {
        LoadModel {
            n_p: model.n_p,
            n_u: model.n_u,
            f_terms: Vec::new(),
            g_terms: Vec::new(),
            boundary: vec![TimeSignal::Zero; model.graph.boundary_nodes().len()],
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.f_terms.iter().all(|(s, _)| s.is_zero())
            && self.g_terms.iter().all(|(s, _)| s.is_zero())
            && self.boundary.iter().all(|s| s.is_zero())
    }

    /// Pressure-equation load F(t).
    pub fn f_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_p);
        for (signal, vec) in &self.f_terms {
            let theta = signal.eval(t);
            if theta != 0.0 {
                out.axpy(theta, vec, 1.0);
            }
        }
        out
    }

    /// Flux-equation load: volume part plus boundary coupling.
    pub fn flux_load_at(&self, model: &TruthModel, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_u);
        for (signal, vec) in &self.g_terms {
            let theta = signal.eval(t);
            if theta != 0.0 {
                out.axpy(theta, vec, 1.0);
            }
        }
        let pb = self.boundary_values(t);
        out.gemv(1.0, &model.b_bnd, &pb, 1.0);
        out
    }

    /// Boundary pressure values at time t, in boundary-node order.
    pub fn boundary_values(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.boundary.len(), self.boundary.iter().map(|s| s.eval(t)))
    }

    pub fn f_components(&self) -> &[(TimeSignal, DVector<f64>)] {
        &self.f_terms
    }

    pub fn g_components(&self) -> &[(TimeSignal, DVector<f64>)] {
        &self.g_terms
    }

    pub fn boundary_signals(&self) -> &[TimeSignal] {
        &self.boundary
    }
}
