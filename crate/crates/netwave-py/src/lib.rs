//! Python bindings for the netwave solver: model construction, truth solves,
//! stability constants, greedy training, and certified reduced runs.
//!
//! The surface mirrors the library's main pipeline; batch experiments with
//! report files stay in the command-line tool.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nalgebra::{DMatrix, DVector};

use netwave::certify::{
    self, stability_constants, CpConvention, ResidualOffline,
};
use netwave::error::Error;
use netwave::fem::{EdgeCoefficients, TruthModel};
use netwave::greedy::{greedy_train, GreedyIndicator, GreedySettings};
use netwave::integrate::{integrate_truth, state_energy, SolverSettings, Trajectory};
use netwave::network::{build_graph, diamond, kernel_space, EdgeSpec, TopologySpec};
use netwave::persist;
use netwave::reduce::{
    check_compatibility, integrate_reduced, project_initial, project_system, PcaSettings,
    ReducedBasis,
};
use netwave::system::LoadModel;
use netwave::forcing::{Expr, ForcingModel, TimeSignal};

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Numerical(_)
        | Error::DecayFit(_)
        | Error::GreedyStagnation(_)
        | Error::DimensionMismatch(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_convention(name: &str) -> PyResult<CpConvention> {
    match name {
        "sqrt" => Ok(CpConvention::Sqrt),
        "eigenvalue" => Ok(CpConvention::Eigenvalue),
        other => Err(PyValueError::new_err(format!(
            "unknown convention `{other}` (expected `sqrt` or `eigenvalue`)"
        ))),
    }
}

fn parse_indicator(name: &str) -> PyResult<GreedyIndicator> {
    match name {
        "delta" => Ok(GreedyIndicator::Delta),
        "delta_tilde" => Ok(GreedyIndicator::DeltaTilde),
        other => Err(PyValueError::new_err(format!(
            "unknown indicator `{other}` (expected `delta` or `delta_tilde`)"
        ))),
    }
}

fn columns(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..mat.ncols())
        .map(|c| mat.column(c).iter().cloned().collect())
        .collect()
}

fn states(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().cloned().collect()).collect()
}

/// Truth discretization of a damped wave network: topology, coefficients,
/// and the mixed piecewise-constant / piecewise-linear spaces.
#[pyclass(frozen)]
struct Model {
    inner: TruthModel,
}

/// A compatible reduced space pair produced by training or loaded from disk.
#[pyclass(frozen)]
struct Basis {
    inner: ReducedBasis,
    model_hash: String,
    history: Vec<netwave::greedy::GreedyRecord>,
    stop: Option<netwave::greedy::StopReason>,
}

impl Model {
    fn loads_from(&self, boundary: Option<&Bound<'_, PyDict>>) -> PyResult<LoadModel> {
        let m = &self.inner;
        match boundary {
            None => Ok(LoadModel::homogeneous(m)),
            Some(dict) => {
                let mut signals = vec![TimeSignal::Zero; m.graph.boundary_nodes().len()];
                for (key, value) in dict.iter() {
                    let node: String = key.extract()?;
                    let expr: String = value.extract()?;
                    let idx = m
                        .graph
                        .node_index(&node)
                        .filter(|i| m.graph.is_boundary(*i))
                        .ok_or_else(|| {
                            PyValueError::new_err(format!("`{node}` is not a boundary node"))
                        })?;
                    let slot = m
                        .graph
                        .boundary_nodes()
                        .iter()
                        .position(|&b| b == idx)
                        .expect("boundary membership checked above");
                    signals[slot] = TimeSignal::from_expr(&expr).map_err(to_py)?;
                }
                let forcing = ForcingModel {
                    f_terms: vec![],
                    g_terms: vec![],
                    boundary: signals,
                };
                LoadModel::build(m, &forcing).map_err(to_py)
            }
        }
    }

    fn initial_from(
        &self,
        p0: Option<&str>,
        u0: Option<&str>,
    ) -> PyResult<(DVector<f64>, DVector<f64>)> {
        let m = &self.inner;
        let p = match p0 {
            None => DVector::zeros(m.n_p),
            Some(src) => {
                let e = Expr::parse(src, "x").map_err(to_py)?;
                m.project_p0(&|_, x| e.eval(x))
            }
        };
        let u = match u0 {
            None => DVector::zeros(m.n_u),
            Some(src) => {
                let e = Expr::parse(src, "x").map_err(to_py)?;
                m.project_p1(&|_, x| e.eval(x))
            }
        };
        Ok((p, u))
    }

    fn check_basis(&self, basis: &Basis) -> PyResult<()> {
        if basis.model_hash != persist::model_hash(&self.inner) {
            return Err(PyValueError::new_err(
                "basis belongs to a different model (hash mismatch)",
            ));
        }
        Ok(())
    }
}

#[pymethods]
impl Model {
    /// Builds a model from explicit topology and per-edge coefficients.
    /// `edges` is a list of `(id, tail, head, length)` tuples. Nodes of
    /// degree one are boundary nodes unless `boundary_nodes` is given.
    #[new]
    #[pyo3(signature = (nodes, edges, a, b, d_base, mu_min, mu_max, cells_per_edge, boundary_nodes=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        nodes: Vec<String>,
        edges: Vec<(String, String, String, f64)>,
        a: Vec<f64>,
        b: Vec<f64>,
        d_base: Vec<f64>,
        mu_min: f64,
        mu_max: f64,
        cells_per_edge: usize,
        boundary_nodes: Option<Vec<String>>,
    ) -> PyResult<Model> {
        let spec = TopologySpec {
            nodes,
            edges: edges
                .into_iter()
                .map(|(id, tail, head, length)| EdgeSpec { id, tail, head, length })
                .collect(),
            boundary_nodes,
        };
        Model::from_spec(spec, a, b, d_base, mu_min, mu_max, cells_per_edge)
    }

    /// The two-port diamond benchmark topology with caller-supplied
    /// coefficients (7 edges: feed, four ring edges, feed).
    #[staticmethod]
    #[pyo3(signature = (a, b, d_base, mu_min, mu_max, cells_per_edge))]
    fn diamond(
        a: Vec<f64>,
        b: Vec<f64>,
        d_base: Vec<f64>,
        mu_min: f64,
        mu_max: f64,
        cells_per_edge: usize,
    ) -> PyResult<Model> {
        Model::from_spec(diamond(), a, b, d_base, mu_min, mu_max, cells_per_edge)
    }

    #[getter]
    fn n_p(&self) -> usize {
        self.inner.n_p
    }

    #[getter]
    fn n_u(&self) -> usize {
        self.inner.n_u
    }

    #[getter]
    fn total_dim(&self) -> usize {
        self.inner.n_p + self.inner.n_u
    }

    #[getter]
    fn kernel_dim(&self) -> usize {
        self.inner.kernel_v.ncols()
    }

    #[getter]
    fn edge_ids(&self) -> Vec<String> {
        self.inner
            .graph
            .edges()
            .iter()
            .map(|e| e.id.clone())
            .collect()
    }

    #[getter]
    fn model_hash(&self) -> String {
        persist::model_hash(&self.inner)
    }

    /// Stability constants entering the error bounds at one damping scale.
    #[pyo3(signature = (mu, convention="sqrt"))]
    fn constants<'py>(&self, py: Python<'py>, mu: f64, convention: &str) -> PyResult<Bound<'py, PyDict>> {
        let c = stability_constants(&self.inner, mu, parse_convention(convention)?).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("mu", c.mu)?;
        d.set_item("c0", c.c0)?;
        d.set_item("c1", c.c1)?;
        d.set_item("c_p", c.c_p)?;
        d.set_item("gamma", c.gamma)?;
        d.set_item("c_prime", c.c_prime)?;
        d.set_item("c_dprime", c.c_dprime)?;
        d.set_item("c_tilde", c.c_tilde)?;
        Ok(d)
    }

    /// Largest generalized Poincare eigenvalue and its eigenvector.
    fn poincare(&self, mu: f64) -> PyResult<(f64, Vec<f64>)> {
        let (lambda, vec) = certify::poincare_eigenpair(&self.inner, mu).map_err(to_py)?;
        Ok((lambda, vec.iter().cloned().collect()))
    }

    /// Full-order implicit Euler run. Returns a dict with `times`, the
    /// recorded `p` and `u` states, and the physical `energy` series.
    #[pyo3(signature = (mu, tau, t_final, boundary=None, p0=None, u0=None))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        mu: f64,
        tau: f64,
        t_final: f64,
        boundary: Option<&Bound<'py, PyDict>>,
        p0: Option<&str>,
        u0: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let loads = self.loads_from(boundary)?;
        let (p_init, u_init) = self.initial_from(p0, u0)?;
        let settings = SolverSettings::new(tau, t_final);
        let traj =
            integrate_truth(&self.inner, &loads, mu, &settings, &p_init, &u_init).map_err(to_py)?;
        let energy: Vec<f64> = (0..traj.len())
            .map(|n| state_energy(&self.inner, &traj.p[n], &traj.u[n]))
            .collect();
        let d = PyDict::new(py);
        d.set_item("times", traj.times.clone())?;
        d.set_item("p", states(&traj.p))?;
        d.set_item("u", states(&traj.u))?;
        d.set_item("energy", energy)?;
        Ok(d)
    }

    /// POD-greedy training. Returns a [`Basis`]; raises `RuntimeError` if
    /// the loop stagnates.
    #[pyo3(signature = (mu_train, tau, t_final, boundary=None, p0=None, u0=None, tol=1e-2,
                        max_basis=250, max_modes=10, energy_cutoff=1e-7, indicator="delta",
                        convention="sqrt", worst_case_constants=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        mu_train: Vec<f64>,
        tau: f64,
        t_final: f64,
        boundary: Option<&Bound<'_, PyDict>>,
        p0: Option<&str>,
        u0: Option<&str>,
        tol: f64,
        max_basis: usize,
        max_modes: usize,
        energy_cutoff: f64,
        indicator: &str,
        convention: &str,
        worst_case_constants: bool,
    ) -> PyResult<Basis> {
        let loads = self.loads_from(boundary)?;
        let (p_init, u_init) = self.initial_from(p0, u0)?;
        let settings = GreedySettings {
            mu_train,
            max_basis,
            tol,
            pca: PcaSettings {
                energy_cutoff,
                max_modes,
            },
            indicator: parse_indicator(indicator)?,
            convention: parse_convention(convention)?,
            worst_case_constants,
        };
        let solver = SolverSettings::new(tau, t_final);
        let result = greedy_train(&self.inner, &loads, &solver, &settings, &p_init, &u_init)
            .map_err(to_py)?;
        Ok(Basis {
            inner: result.basis,
            model_hash: persist::model_hash(&self.inner),
            history: result.history,
            stop: Some(result.stop),
        })
    }

    /// Certified reduced run at `mu`: reduced solve, residual-driven bounds,
    /// and (with `with_truth`) the measured squared error and effectivities.
    #[pyo3(signature = (basis, mu, tau, t_final, boundary=None, p0=None, u0=None,
                        convention="sqrt", with_truth=true))]
    #[allow(clippy::too_many_arguments)]
    fn certify<'py>(
        &self,
        py: Python<'py>,
        basis: &Basis,
        mu: f64,
        tau: f64,
        t_final: f64,
        boundary: Option<&Bound<'py, PyDict>>,
        p0: Option<&str>,
        u0: Option<&str>,
        convention: &str,
        with_truth: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_basis(basis)?;
        let m = &self.inner;
        let loads = self.loads_from(boundary)?;
        let (p_init, u_init) = self.initial_from(p0, u0)?;
        let settings = SolverSettings::new(tau, t_final);
        let constants =
            stability_constants(m, mu, parse_convention(convention)?).map_err(to_py)?;
        let offline = ResidualOffline::new(m, &basis.inner, &loads);
        let sys = project_system(m, &basis.inner, &loads);
        let init = project_initial(m, &basis.inner, &p_init, &u_init);
        let reduced = integrate_reduced(&sys, mu, &settings, &init.p, &init.u).map_err(to_py)?;
        let truth: Option<Trajectory> = if with_truth {
            Some(integrate_truth(m, &loads, mu, &settings, &p_init, &u_init).map_err(to_py)?)
        } else {
            None
        };
        let cert = certify::certify(
            m,
            &basis.inner,
            &constants,
            &offline,
            mu,
            &reduced,
            (init.err_p, init.err_u),
            truth.as_ref(),
        )
        .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("times", cert.times.clone())?;
        d.set_item("delta", cert.delta.clone())?;
        d.set_item("delta_tilde", cert.delta_tilde.clone())?;
        d.set_item("residual_p_sq", cert.rp_sq.clone())?;
        d.set_item("residual_u_sq", cert.ru_sq.clone())?;
        d.set_item("err_sq", cert.err_sq.clone())?;
        d.set_item("eta", cert.eta.clone())?;
        d.set_item("eta_tilde", cert.eta_tilde.clone())?;
        Ok(d)
    }

    /// A1/A2 compatibility and orthonormality defects of a basis.
    fn compatibility<'py>(&self, py: Python<'py>, basis: &Basis) -> PyResult<Bound<'py, PyDict>> {
        self.check_basis(basis)?;
        let rep = check_compatibility(&self.inner, &basis.inner);
        let d = PyDict::new(py);
        d.set_item("a1", rep.a1)?;
        d.set_item("a2", rep.a2)?;
        d.set_item("orth_q", rep.orth_q)?;
        d.set_item("orth_v", rep.orth_v)?;
        Ok(d)
    }

    /// Loads a basis file (as written by training or the CLI) and verifies
    /// it matches this model.
    fn load_basis(&self, path: &str) -> PyResult<Basis> {
        let loaded =
            persist::load_basis_checked(std::path::Path::new(path), &self.inner).map_err(to_py)?;
        Ok(Basis {
            inner: loaded.basis,
            model_hash: loaded.model_hash,
            history: loaded.history,
            stop: loaded.stop,
        })
    }

    /// Writes a basis to disk in the same format the CLI uses.
    fn save_basis(&self, basis: &Basis, path: &str) -> PyResult<()> {
        self.check_basis(basis)?;
        persist::save_basis(
            std::path::Path::new(path),
            &self.inner,
            &basis.inner,
            &basis.history,
            basis.stop,
        )
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(edges={}, cells_per_edge={}, n_p={}, n_u={})",
            self.inner.graph.edge_count(),
            self.inner.cells_per_edge,
            self.inner.n_p,
            self.inner.n_u
        )
    }
}

impl Model {
    fn from_spec(
        spec: TopologySpec,
        a: Vec<f64>,
        b: Vec<f64>,
        d_base: Vec<f64>,
        mu_min: f64,
        mu_max: f64,
        cells_per_edge: usize,
    ) -> PyResult<Model> {
        let graph = build_graph(&spec).map_err(to_py)?;
        let kernel = kernel_space(&graph);
        let coeff = EdgeCoefficients {
            a,
            b,
            d_base,
            mu_min,
            mu_max,
        };
        let inner = TruthModel::build(graph, coeff, &kernel, cells_per_edge).map_err(to_py)?;
        Ok(Model { inner })
    }
}

#[pymethods]
impl Basis {
    #[getter]
    fn dim_q(&self) -> usize {
        self.inner.dim_q()
    }

    #[getter]
    fn dim_v(&self) -> usize {
        self.inner.dim_v()
    }

    #[getter]
    fn total_dim(&self) -> usize {
        self.inner.total_dim()
    }

    #[getter]
    fn kernel_dim(&self) -> usize {
        self.inner.kernel_dim
    }

    /// Cumulative `(dim_q, dim_v)` after each enrichment block.
    #[getter]
    fn blocks(&self) -> Vec<(usize, usize)> {
        self.inner.blocks.clone()
    }

    /// Greedy iteration log as a list of dicts.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("iteration", r.iteration)?;
                d.set_item("mu", r.mu)?;
                d.set_item("indicator", r.indicator)?;
                d.set_item("accepted", r.accepted)?;
                d.set_item("dim_q", r.dim_q)?;
                d.set_item("dim_v", r.dim_v)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn stop(&self) -> Option<String> {
        self.stop.map(|s| {
            match s {
                netwave::greedy::StopReason::MaxSize => "max_size",
                netwave::greedy::StopReason::Converged => "converged",
                netwave::greedy::StopReason::Saturated => "saturated",
            }
            .to_string()
        })
    }

    /// The first `count` enrichment blocks as a standalone basis.
    fn prefix(&self, count: usize) -> PyResult<Basis> {
        if count < 1 || count > self.inner.blocks.len() {
            return Err(PyValueError::new_err(format!(
                "prefix count must be in 1..={}",
                self.inner.blocks.len()
            )));
        }
        Ok(Basis {
            inner: self.inner.prefix(count),
            model_hash: self.model_hash.clone(),
            history: self.history.clone(),
            stop: self.stop,
        })
    }

    /// Pressure modes as a list of coefficient vectors.
    fn q_modes(&self) -> Vec<Vec<f64>> {
        columns(&self.inner.q_basis)
    }

    /// Flux modes as a list of coefficient vectors.
    fn v_modes(&self) -> Vec<Vec<f64>> {
        columns(&self.inner.v_basis)
    }

    fn __repr__(&self) -> String {
        format!(
            "Basis(dim_q={}, dim_v={}, blocks={})",
            self.inner.dim_q(),
            self.inner.dim_v(),
            self.inner.blocks.len()
        )
    }
}

#[pymodule]
fn netwave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Basis>()?;
    Ok(())
}
